//! Phoneme encoder: embedding followed by stacked multi-receptive-field
//! fusion (MRF) blocks. Sequence length is never changed.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv1d, ConvSpec, Embedding, Norm, Scope};

pub const HIDDEN_DIM: usize = 256;
pub(crate) const LRELU_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub kernel_sizes: Vec<usize>,
    /// One dilation list per kernel size.
    pub dilations: Vec<Vec<usize>>,
    pub num_blocks: usize,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: HIDDEN_DIM,
            kernel_sizes: vec![3, 7, 11],
            dilations: vec![vec![1, 3, 5]; 3],
            num_blocks: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim != HIDDEN_DIM {
            return Err(Error::Config(format!(
                "encoder.hidden_dim must be {HIDDEN_DIM}, got {}",
                self.hidden_dim
            )));
        }
        validate_mrf(&self.kernel_sizes, &self.dilations, "encoder")?;
        if self.num_blocks == 0 || self.vocab_size < 2 {
            return Err(Error::Config(
                "encoder needs num_blocks >= 1 and vocab_size >= 2".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn validate_mrf(kernels: &[usize], dilations: &[Vec<usize>], what: &str) -> Result<()> {
    if kernels.is_empty() || kernels.len() != dilations.len() {
        return Err(Error::Config(format!(
            "{what}: need one dilation list per kernel size ({} kernels, {} lists)",
            kernels.len(),
            dilations.len()
        )));
    }
    if kernels.iter().any(|k| k % 2 == 0) || dilations.iter().any(Vec::is_empty) {
        return Err(Error::Config(format!(
            "{what}: kernel sizes must be odd and dilation lists non-empty"
        )));
    }
    Ok(())
}

/// Residual block: per dilation, `x += conv_1(lrelu(conv_d(lrelu(x))))`.
///
/// The optional mask is re-applied after every convolution so padded
/// positions stay zero and never leak into real ones.
#[derive(Clone)]
pub(crate) struct ResBlock {
    dilated: Vec<Conv1d>,
    plain: Vec<Conv1d>,
}

impl ResBlock {
    pub(crate) fn new(scope: &Scope, channels: usize, kernel: usize, dilations: &[usize]) -> Result<Self> {
        let mut dilated = Vec::new();
        let mut plain = Vec::new();
        for (i, &d) in dilations.iter().enumerate() {
            dilated.push(Conv1d::new(
                &scope.pp(format!("convs1.{i}")),
                channels,
                channels,
                ConvSpec::same(kernel, d).norm(Norm::Weight),
            )?);
            plain.push(Conv1d::new(
                &scope.pp(format!("convs2.{i}")),
                channels,
                channels,
                ConvSpec::same(kernel, 1).norm(Norm::Weight),
            )?);
        }
        Ok(Self { dilated, plain })
    }

    pub(crate) fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let apply_mask = |t: Tensor| -> Result<Tensor> {
            match mask {
                Some(m) => Ok(t.broadcast_mul(m)?),
                None => Ok(t),
            }
        };
        let mut x = x.clone();
        for (c1, c2) in self.dilated.iter().zip(&self.plain) {
            let xt = apply_mask(c1.forward(&leaky_relu(&x, LRELU_SLOPE)?)?)?;
            let xt = apply_mask(c2.forward(&leaky_relu(&xt, LRELU_SLOPE)?)?)?;
            x = (x + xt)?;
        }
        Ok(x)
    }
}

/// Parallel residual blocks with different kernels, averaged.
#[derive(Clone)]
pub(crate) struct Mrf {
    blocks: Vec<ResBlock>,
}

impl Mrf {
    pub(crate) fn new(scope: &Scope, channels: usize, kernels: &[usize], dilations: &[Vec<usize>]) -> Result<Self> {
        let blocks = kernels
            .iter()
            .zip(dilations)
            .enumerate()
            .map(|(i, (&k, d))| ResBlock::new(&scope.pp(format!("resblocks.{i}")), channels, k, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub(crate) fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for b in &self.blocks {
            let y = b.forward(x, mask)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        let acc = acc.expect("at least one residual block");
        Ok((acc / self.blocks.len() as f64)?)
    }
}

/// Per-token hidden states handed to the duration predictor.
#[derive(Debug, Clone)]
pub struct EncoderState {
    /// `[B, N, hidden]`.
    pub hidden: Tensor,
    /// `[B, N]`, 1.0 for real tokens and 0.0 for padding.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl EncoderState {
    /// Hidden rows of one utterance without padding, `[len, hidden]`.
    pub fn utterance(&self, b: usize) -> Result<Tensor> {
        Ok(self.hidden.get(b)?.narrow(0, 0, self.lengths[b])?)
    }
}

#[derive(Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    embedding: Embedding,
    blocks: Vec<Mrf>,
    dtype: candle_core::DType,
}

impl Encoder {
    pub fn new(scope: &Scope, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let embedding = Embedding::new(&scope.pp("embedding"), config.vocab_size, config.hidden_dim)?;
        let blocks = (0..config.num_blocks)
            .map(|i| {
                Mrf::new(
                    &scope.pp(format!("mrf.{i}")),
                    config.hidden_dim,
                    &config.kernel_sizes,
                    &config.dilations,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            embedding,
            blocks,
            dtype: scope.dtype(),
        })
    }

    pub fn encode(&self, batch: &Batch, device: &Device) -> Result<EncoderState> {
        if let Some(&id) = batch
            .tokens
            .iter()
            .find(|&&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        if batch.lengths.iter().any(|&l| l == 0) {
            return Err(Error::EmptyInput("phoneme sequence"));
        }
        let (b, n) = (batch.size(), batch.max_len);
        let ids = Tensor::from_vec(batch.tokens.clone(), (b, n), device)?;
        let mask = Tensor::from_vec(batch.mask(), (b, n), device)?.to_dtype(self.dtype)?;
        let mask_c = mask.unsqueeze(1)?;

        // [B, N, H] -> [B, H, N] for the convolutions.
        let mut x = self
            .embedding
            .forward(&ids)?
            .transpose(1, 2)?
            .broadcast_mul(&mask_c)?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask_c))?.broadcast_mul(&mask_c)?;
        }
        Ok(EncoderState {
            hidden: x.transpose(1, 2)?.contiguous()?,
            mask,
            lengths: batch.lengths.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PhonemeSequence, Tokenizer, Vocabulary};
    use crate::nn::ParamStore;
    use candle_core::DType;

    fn small_config(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            num_blocks: 1,
            kernel_sizes: vec![3, 5],
            dilations: vec![vec![1, 3], vec![1]],
            ..EncoderConfig::new(vocab)
        }
    }

    #[test]
    fn single_token_shape() {
        let vocab = Vocabulary::characters();
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let enc = Encoder::new(&store.root(), &small_config(vocab.len())).unwrap();
        let seq = vocab.tokenize("a").unwrap();
        let state = enc.encode(&Batch::from_sequences(&[&seq]), &Device::Cpu).unwrap();
        assert_eq!(state.hidden.dims(), &[1, 1, 256]);
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let enc = Encoder::new(&store.root(), &small_config(5)).unwrap();
        let seq = PhonemeSequence {
            utterance_id: "x".into(),
            ids: vec![1, 7],
        };
        assert!(matches!(
            enc.encode(&Batch::from_sequences(&[&seq]), &Device::Cpu),
            Err(Error::TokenOutOfRange { id: 7, .. })
        ));
    }

    #[test]
    fn padded_batch_matches_unbatched_runs() {
        let vocab = Vocabulary::characters();
        let store = ParamStore::new(4, DType::F64, &Device::Cpu);
        let enc = Encoder::new(&store.root(), &small_config(vocab.len())).unwrap();
        let a = vocab.tokenize("hello there").unwrap();
        let b = vocab.tokenize("hi").unwrap();
        let batched = enc.encode(&Batch::from_sequences(&[&a, &b]), &Device::Cpu).unwrap();
        for (i, seq) in [&a, &b].iter().enumerate() {
            let single = enc.encode(&Batch::from_sequences(&[seq]), &Device::Cpu).unwrap();
            let want: Vec<Vec<f64>> = single.utterance(0).unwrap().to_vec2().unwrap();
            let got: Vec<Vec<f64>> = batched.utterance(i).unwrap().to_vec2().unwrap();
            for (x, y) in got.iter().flatten().zip(want.iter().flatten()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        // Padding rows are exactly zero.
        let pad_row: Vec<f64> = batched.hidden.get(1).unwrap().get(5).unwrap().to_vec1().unwrap();
        assert!(pad_row.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn every_real_token_embedding_receives_gradient() {
        let vocab = Vocabulary::characters();
        let store = ParamStore::new(5, DType::F64, &Device::Cpu);
        let enc = Encoder::new(&store.root(), &small_config(vocab.len())).unwrap();
        let seq = vocab.tokenize("abc").unwrap();
        let state = enc.encode(&Batch::from_sequences(&[&seq]), &Device::Cpu).unwrap();
        let loss = state.hidden.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let (_, table) = store
            .trainable()
            .into_iter()
            .find(|(n, _)| n == "embedding.weight")
            .unwrap();
        let g: Vec<Vec<f64>> = grads.get(table.as_tensor()).unwrap().to_vec2().unwrap();
        for &id in &seq.ids {
            let norm: f64 = g[id as usize].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm.is_finite() && norm > 0.0, "token {id}");
        }
        assert!(g[0].iter().all(|v| *v == 0.0), "pad row untouched");
    }
}
