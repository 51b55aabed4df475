//! Frame-to-waveform decoder and the multi-scale / multi-period
//! discriminators with least-squares adversarial losses.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::encoder::{validate_mrf, Mrf, HIDDEN_DIM, LRELU_SLOPE};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, reflect_pad_last, Conv1d, ConvSpec, ConvTranspose1d, Init, Norm, Scope};

/// Samples produced per input frame.
pub const UPSAMPLE_FACTOR: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub input_dim: usize,
    /// Channels after the input convolution; halved at every upsampling stage.
    pub initial_channels: usize,
    pub upsample_rates: Vec<usize>,
    pub upsample_kernel_sizes: Vec<usize>,
    pub resblock_kernel_sizes: Vec<usize>,
    pub resblock_dilations: Vec<Vec<usize>>,
}

impl DecoderConfig {
    /// HiFi-GAN V1 sizes.
    pub fn v1() -> Self {
        Self {
            input_dim: HIDDEN_DIM,
            initial_channels: 512,
            upsample_rates: vec![8, 8, 2, 2],
            upsample_kernel_sizes: vec![16, 16, 4, 4],
            resblock_kernel_sizes: vec![3, 7, 11],
            resblock_dilations: vec![vec![1, 3, 5]; 3],
        }
    }

    /// HiFi-GAN V2 sizes.
    pub fn v2() -> Self {
        Self {
            initial_channels: 128,
            ..Self::v1()
        }
    }

    /// Small enough to overfit a couple of utterances on a laptop CPU.
    pub fn tiny() -> Self {
        Self {
            initial_channels: 32,
            resblock_kernel_sizes: vec![3, 5],
            resblock_dilations: vec![vec![1, 3], vec![1, 3]],
            ..Self::v1()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "v1" => Ok(Self::v1()),
            "v2" => Ok(Self::v2()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown decoder preset '{other}' (expected v1, v2 or tiny)"
            ))),
        }
    }

    pub fn channels_at(&self, stage: usize) -> usize {
        self.initial_channels >> stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim != HIDDEN_DIM {
            return Err(Error::Config(format!(
                "decoder.input_dim must be {HIDDEN_DIM}, got {}",
                self.input_dim
            )));
        }
        let product: usize = self.upsample_rates.iter().product();
        if product != UPSAMPLE_FACTOR {
            return Err(Error::Config(format!(
                "decoder upsample rates {:?} multiply to {product}, need {UPSAMPLE_FACTOR}",
                self.upsample_rates
            )));
        }
        if self.upsample_rates.len() != self.upsample_kernel_sizes.len() {
            return Err(Error::Config(
                "decoder needs one kernel size per upsample rate".into(),
            ));
        }
        for (&u, &k) in self.upsample_rates.iter().zip(&self.upsample_kernel_sizes) {
            if k < u || (k - u) % 2 != 0 {
                return Err(Error::Config(format!(
                    "decoder upsample kernel {k} incompatible with rate {u}"
                )));
            }
        }
        if self.channels_at(self.upsample_rates.len()) == 0 {
            return Err(Error::Config(format!(
                "decoder.initial_channels {} too small for {} halvings",
                self.initial_channels,
                self.upsample_rates.len()
            )));
        }
        validate_mrf(&self.resblock_kernel_sizes, &self.resblock_dilations, "decoder")
    }
}

#[derive(Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    conv_pre: Conv1d,
    ups: Vec<ConvTranspose1d>,
    mrfs: Vec<Mrf>,
    conv_post: Conv1d,
}

impl Decoder {
    pub fn new(scope: &Scope, config: &DecoderConfig) -> Result<Self> {
        config.validate()?;
        let conv_pre = Conv1d::new(
            &scope.pp("conv_pre"),
            config.input_dim,
            config.initial_channels,
            ConvSpec::same(7, 1).norm(Norm::Weight),
        )?;
        let mut ups = Vec::new();
        let mut mrfs = Vec::new();
        for (i, (&u, &k)) in config
            .upsample_rates
            .iter()
            .zip(&config.upsample_kernel_sizes)
            .enumerate()
        {
            ups.push(ConvTranspose1d::new(
                &scope.pp(format!("ups.{i}")),
                config.channels_at(i),
                config.channels_at(i + 1),
                k,
                u,
                (k - u) / 2,
                Norm::Weight,
                Init::Normal(0.01),
            )?);
            mrfs.push(Mrf::new(
                &scope.pp(format!("mrf.{i}")),
                config.channels_at(i + 1),
                &config.resblock_kernel_sizes,
                &config.resblock_dilations,
            )?);
        }
        let conv_post = Conv1d::new(
            &scope.pp("conv_post"),
            config.channels_at(config.upsample_rates.len()),
            1,
            ConvSpec::same(7, 1).norm(Norm::Weight),
        )?;
        Ok(Self {
            config: config.clone(),
            conv_pre,
            ups,
            mrfs,
            conv_post,
        })
    }

    /// `frames: [B, T, input_dim]` to `[B, T * 256]` samples in (-1, 1).
    pub fn decode(&self, frames: &Tensor) -> Result<Tensor> {
        let (b, t, h) = frames.dims3()?;
        if t == 0 {
            return Err(Error::EmptyInput("decoder frames"));
        }
        if h != self.config.input_dim {
            return Err(Error::Shape(format!(
                "decoder expects {} input channels, got {h}",
                self.config.input_dim
            )));
        }
        let mut x = self.conv_pre.forward(&frames.transpose(1, 2)?.contiguous()?)?;
        for (up, mrf) in self.ups.iter().zip(&self.mrfs) {
            x = up.forward(&leaky_relu(&x, LRELU_SLOPE)?)?;
            x = mrf.forward(&x, None)?;
        }
        let x = self.conv_post.forward(&leaky_relu(&x, 0.01)?)?.tanh()?;
        Ok(x.reshape((b, t * UPSAMPLE_FACTOR))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    /// Number of scale discriminators; scale `i` sees the input mean-pooled
    /// by `2^i`.
    pub num_scales: usize,
    /// Output channels of the period discriminator convs (four strided, one plain).
    pub mpd_channels: Vec<usize>,
    /// Output channels of the seven scale discriminator convs.
    pub msd_channels: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn hifigan() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            num_scales: 3,
            mpd_channels: vec![32, 128, 512, 1024, 1024],
            msd_channels: vec![128, 128, 256, 512, 1024, 1024, 1024],
        }
    }

    pub fn tiny() -> Self {
        Self {
            periods: vec![2, 3, 5],
            num_scales: 2,
            mpd_channels: vec![8, 16, 32, 32, 32],
            msd_channels: vec![8, 8, 16, 16, 32, 32, 32],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "v1" | "v2" => Ok(Self::hifigan()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown discriminator preset '{other}' (expected v1, v2 or tiny)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() || self.periods.contains(&0) || self.num_scales == 0 {
            return Err(Error::Config(
                "discriminators need positive periods and at least one scale".into(),
            ));
        }
        if self.mpd_channels.len() != 5 || self.msd_channels.len() != 7 {
            return Err(Error::Config(
                "mpd_channels needs 5 entries and msd_channels 7".into(),
            ));
        }
        if self.mpd_channels.iter().chain(&self.msd_channels).any(|&c| c == 0) {
            return Err(Error::Config("discriminator channels must be positive".into()));
        }
        Ok(())
    }
}

/// Output of one sub-discriminator.
#[derive(Debug, Clone)]
pub struct Judgement {
    /// `[B, *]` flattened logit map.
    pub logits: Tensor,
    pub features: Vec<Tensor>,
}

/// Largest group count not above `wanted` that divides both channel counts.
fn fit_groups(wanted: usize, c_in: usize, c_out: usize) -> usize {
    (1..=wanted).rev().find(|g| c_in % g == 0 && c_out % g == 0).unwrap_or(1)
}

#[derive(Clone)]
struct PeriodDiscriminator {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodDiscriminator {
    fn new(scope: &Scope, period: usize, channels: &[usize]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in channels.iter().enumerate() {
            let stride = if i + 1 < channels.len() { 3 } else { 1 };
            convs.push(Conv1d::new(
                &scope.pp(format!("convs.{i}")),
                c_in,
                c,
                ConvSpec::same(5, 1).stride(stride).norm(Norm::Weight),
            )?);
            c_in = c;
        }
        let post = Conv1d::new(&scope.pp("conv_post"), c_in, 1, ConvSpec::same(3, 1).norm(Norm::Weight))?;
        Ok(Self { period, convs, post })
    }

    /// Folds `[B, L]` into `period` interleaved columns, each convolved
    /// independently along time.
    fn fold(&self, wav: &Tensor) -> Result<Tensor> {
        let (b, len) = wav.dims2()?;
        let p = self.period;
        let pad = (p - len % p) % p;
        let x = if pad > 0 {
            let x = wav.unsqueeze(1)?;
            if pad < len {
                reflect_pad_last(&x, 0, pad)?
            } else {
                x.pad_with_zeros(2, 0, pad)?
            }
            .squeeze(1)?
        } else {
            wav.clone()
        };
        let rows = (len + pad) / p;
        Ok(x.reshape((b, rows, p))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * p, 1, rows))?)
    }

    fn forward(&self, wav: &Tensor) -> Result<Judgement> {
        let b = wav.dim(0)?;
        let mut x = self.fold(wav)?;
        let mut features = Vec::new();
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, LRELU_SLOPE)?;
            features.push(x.clone());
        }
        let x = self.post.forward(&x)?;
        features.push(x.clone());
        Ok(Judgement {
            logits: x.reshape((b, ()))?,
            features,
        })
    }
}

#[derive(Clone)]
struct ScaleDiscriminator {
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl ScaleDiscriminator {
    fn new(scope: &Scope, channels: &[usize], norm: Norm) -> Result<Self> {
        // (kernel, stride, groups) of the HiFi-GAN scale discriminator.
        const LAYOUT: [(usize, usize, usize); 7] = [
            (15, 1, 1),
            (41, 2, 4),
            (41, 2, 16),
            (41, 4, 16),
            (41, 4, 16),
            (41, 1, 16),
            (5, 1, 1),
        ];
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, (&c, &(k, s, g))) in channels.iter().zip(LAYOUT.iter()).enumerate() {
            convs.push(Conv1d::new(
                &scope.pp(format!("convs.{i}")),
                c_in,
                c,
                ConvSpec::same(k, 1)
                    .stride(s)
                    .groups(fit_groups(g, c_in, c))
                    .norm(norm),
            )?);
            c_in = c;
        }
        let post = Conv1d::new(&scope.pp("conv_post"), c_in, 1, ConvSpec::same(3, 1).norm(norm))?;
        Ok(Self { convs, post })
    }

    fn forward(&self, wav: &Tensor) -> Result<Judgement> {
        let b = wav.dim(0)?;
        let mut x = wav.unsqueeze(1)?;
        let mut features = Vec::new();
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, LRELU_SLOPE)?;
            features.push(x.clone());
        }
        let x = self.post.forward(&x)?;
        features.push(x.clone());
        Ok(Judgement {
            logits: x.reshape((b, ()))?,
            features,
        })
    }
}

/// Stride-2 mean pool over the last axis; a trailing odd sample is dropped.
pub fn halve(wav: &Tensor) -> Result<Tensor> {
    let (b, len) = wav.dims2()?;
    let half = len / 2;
    if half == 0 {
        return Err(Error::Shape(format!("cannot halve a signal of {len} samples")));
    }
    Ok(wav.narrow(1, 0, half * 2)?.reshape((b, half, 2))?.mean(D::Minus1)?)
}

#[derive(Clone)]
pub struct Discriminators {
    pub config: DiscriminatorConfig,
    scales: Vec<ScaleDiscriminator>,
    periods: Vec<PeriodDiscriminator>,
}

impl Discriminators {
    pub fn new(scope: &Scope, config: &DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let scales = (0..config.num_scales)
            .map(|i| {
                let norm = if i == 0 { Norm::Spectral } else { Norm::Weight };
                ScaleDiscriminator::new(&scope.pp(format!("msd.{i}")), &config.msd_channels, norm)
            })
            .collect::<Result<Vec<_>>>()?;
        let periods = config
            .periods
            .iter()
            .map(|&p| PeriodDiscriminator::new(&scope.pp(format!("mpd.{p}")), p, &config.mpd_channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            scales,
            periods,
        })
    }

    pub fn count(&self) -> usize {
        self.scales.len() + self.periods.len()
    }

    /// Inputs seen by the scale discriminators, finest first.
    pub fn scale_inputs(&self, wav: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = vec![wav.clone()];
        for _ in 1..self.scales.len() {
            let next = halve(out.last().expect("non-empty"))?;
            out.push(next);
        }
        Ok(out)
    }

    /// `wav: [B, L]`. Scale discriminators first, then one per period.
    pub fn discriminate(&self, wav: &Tensor) -> Result<Vec<Judgement>> {
        let mut out = Vec::with_capacity(self.count());
        for (d, x) in self.scales.iter().zip(self.scale_inputs(wav)?) {
            out.push(d.forward(&x)?);
        }
        for d in &self.periods {
            out.push(d.forward(wav)?);
        }
        Ok(out)
    }
}

/// Least-squares adversarial losses summed over sub-discriminators:
/// `d = mean((D(x) - 1)^2) + mean(D(G)^2)` and `g = mean((D(G) - 1)^2)`.
pub fn lsgan_losses(real: &[Tensor], fake: &[Tensor]) -> Result<(Tensor, Tensor)> {
    Ok((discriminator_loss(real, fake)?, generator_loss(fake)?))
}

pub fn discriminator_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::Shape(format!(
            "lsgan: {} real vs {} fake logit maps",
            real.len(),
            fake.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let term = (r.affine(1.0, -1.0)?.sqr()?.mean_all()? + f.sqr()?.mean_all()?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

pub fn generator_loss(fake: &[Tensor]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for f in fake {
        let term = f.affine(1.0, -1.0)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or(Error::EmptyInput("logit maps"))
}

/// Mean absolute difference of intermediate features, summed over layers and
/// sub-discriminators.
pub fn feature_matching_loss(real: &[Judgement], fake: &[Judgement]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        for (a, b) in r.features.iter().zip(&f.features) {
            let term = (a.detach() - b)?.abs()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    total.ok_or(Error::EmptyInput("feature maps"))
}

pub fn logits_of(judgements: &[Judgement]) -> Vec<Tensor> {
    judgements.iter().map(|j| j.logits.clone()).collect()
}
