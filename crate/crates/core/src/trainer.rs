//! Training loop: dual KEEP/SHIFT syntheses per step, rewards from their
//! mel losses, generator then discriminator updates, checkpoints and
//! inference.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{
    apply_shift, centers_from_lengths, compute_reward, gaussian_upsample, reinforced_duration_loss_tensor,
    sample_segment, scale_durations, scale_durations_tensor, tokens_in_segment, AlignmentGrid, DurationPredictor,
    RewardMode, RewardVector, SegmentLosses, SegmentSpec,
};
use crate::checkpoint::{self, new_manifest, read_checkpoint, write_checkpoint, LoadedCheckpoint};
use crate::config::{ModelSpec, ReconstructionLoss, RewardScope, TrainConfig};
use crate::data::{
    build_entries, epoch_batches, load_utterances, make_splits, read_metadata, Batch, CorpusEntry, PhonemeSequence,
    Splits, Tokenizer, Utterance, Vocabulary,
};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, ParamStore};
use crate::objectives::soft_dtw_tensor;
use crate::signal::{MelExtractor, Waveform, SAMPLE_RATE};
use crate::vocoder::{
    discriminator_loss, feature_matching_loss, generator_loss, logits_of, Decoder, Discriminators, UPSAMPLE_FACTOR,
};

const GEN_PREFIX: &str = "gen.";
const DISC_PREFIX: &str = "disc.";
const OPT_G_PREFIX: &str = "optim.gen.";
const OPT_D_PREFIX: &str = "optim.disc.";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Encoder, duration predictor and decoder, plus the discriminators and the
/// differentiable mel front end.
pub struct Models {
    pub store: ParamStore,
    pub spec: ModelSpec,
    pub vocabulary: Vocabulary,
    pub encoder: Encoder,
    pub predictor: DurationPredictor,
    pub decoder: Decoder,
    pub discriminators: Discriminators,
    pub mel: MelExtractor,
}

impl Models {
    pub fn new(spec: &ModelSpec, vocabulary: &Vocabulary, seed: u64, device: &Device) -> Result<Self> {
        spec.validate()?;
        if spec.encoder.vocab_size != vocabulary.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} does not match vocabulary of {} symbols",
                spec.encoder.vocab_size,
                vocabulary.len()
            )));
        }
        let store = ParamStore::new(seed, DType::F32, device);
        let root = store.root();
        let gen = root.pp("gen");
        let encoder = Encoder::new(&gen.pp("encoder"), &spec.encoder)?;
        let predictor = DurationPredictor::new(&gen.pp("predictor"), spec.encoder.hidden_dim, &spec.predictor)?;
        let decoder = Decoder::new(&gen.pp("decoder"), &spec.decoder)?;
        let discriminators = Discriminators::new(&root.pp("disc"), &spec.discriminator)?;
        let mel = MelExtractor::new(&spec.spectral, DType::F32, device)?;
        Ok(Self {
            store,
            spec: spec.clone(),
            vocabulary: vocabulary.clone(),
            encoder,
            predictor,
            decoder,
            discriminators,
            mel,
        })
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    fn params_with_prefix(&self, prefix: &str) -> Vec<(String, candle_core::Var)> {
        self.store
            .trainable()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect()
    }

    pub fn generator_params(&self) -> Vec<(String, candle_core::Var)> {
        self.params_with_prefix(GEN_PREFIX)
    }

    pub fn discriminator_params(&self) -> Vec<(String, candle_core::Var)> {
        self.params_with_prefix(DISC_PREFIX)
    }

    /// Raw predicted durations (frames per token), dropout off.
    pub fn predict_durations(&self, seq: &PhonemeSequence) -> Result<Vec<f64>> {
        let state = self.encoder.encode(&Batch::from_sequences(&[seq]), self.device())?;
        let d = self.predictor.forward::<ChaCha8Rng>(&state, None)?;
        let d: Vec<f32> = d.get(0)?.to_vec1()?;
        Ok(d.into_iter().map(f64::from).collect())
    }

    /// Full-utterance inference: integer durations by cumulative rounding,
    /// Gaussian upsampling and decoding of every frame.
    pub fn synthesize_sequence(&self, seq: &PhonemeSequence, sigma2: f64) -> Result<Synthesis> {
        if seq.is_empty() {
            return Err(Error::EmptyInput("phoneme sequence"));
        }
        let state = self.encoder.encode(&Batch::from_sequences(&[seq]), self.device())?;
        let d: Vec<f32> = self.predictor.forward::<ChaCha8Rng>(&state, None)?.get(0)?.to_vec1()?;
        let raw: Vec<f64> = d.into_iter().map(f64::from).collect();
        let frames = integer_durations(&raw);
        let total: u32 = frames.iter().sum();
        let lengths: Vec<f64> = frames.iter().map(|&f| f as f64).collect();
        let centers = Tensor::from_vec(
            centers_from_lengths(&lengths).into_iter().map(|c| c as f32).collect::<Vec<_>>(),
            seq.len(),
            self.device(),
        )?;
        let up = gaussian_upsample(&state.utterance(0)?, &centers, sigma2, total as usize)?;
        let audio = self.decoder.decode(&up.frames.unsqueeze(0)?)?;
        let samples: Vec<f32> = audio.get(0)?.to_vec1()?;
        Ok(Synthesis {
            waveform: Waveform::new(samples, SAMPLE_RATE),
            raw_durations: raw,
            frames,
            alignment: AlignmentGrid::from_tensor(&up.weights, sigma2)?,
        })
    }

    pub fn synthesize(&self, text: &str, sigma2: f64) -> Result<Synthesis> {
        let seq = self.vocabulary.tokenize(text)?;
        self.synthesize_sequence(&seq, sigma2)
    }
}

/// Rounds the running sum so integer lengths never drift from the real
/// total; at least one frame is produced.
pub fn integer_durations(d: &[f64]) -> Vec<u32> {
    let mut out = Vec::with_capacity(d.len());
    let mut acc = 0.0;
    let mut prev = 0.0f64;
    for &v in d {
        acc += v.max(0.0);
        let r = acc.round();
        out.push((r - prev) as u32);
        prev = r;
    }
    if prev == 0.0 && !out.is_empty() {
        let best = d
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        out[best] = 1;
    }
    out
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub waveform: Waveform,
    pub raw_durations: Vec<f64>,
    /// Integer frames per token; they sum to the decoded frame count.
    pub frames: Vec<u32>,
    pub alignment: AlignmentGrid,
}

/// Audio trimmed to whole frames, ready for training.
#[derive(Debug, Clone)]
pub struct TrainingUtterance {
    pub utterance_id: String,
    pub phonemes: PhonemeSequence,
    /// `frames * 256` samples.
    pub audio: Vec<f32>,
    pub frames: usize,
}

impl TrainingUtterance {
    pub fn new(phonemes: PhonemeSequence, audio: &Waveform) -> Result<Self> {
        let frames = audio.len() / UPSAMPLE_FACTOR;
        if frames < 2 {
            return Err(Error::TooShort {
                len: audio.len(),
                min: 2 * UPSAMPLE_FACTOR,
            });
        }
        Ok(Self {
            utterance_id: phonemes.utterance_id.clone(),
            phonemes,
            audio: audio.samples[..frames * UPSAMPLE_FACTOR].to_vec(),
            frames,
        })
    }

    pub fn from_utterance(u: &Utterance) -> Result<Self> {
        Self::new(u.entry.phonemes.clone(), &u.audio)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Weighted generator objective.
    pub generator: f64,
    pub adversarial: f64,
    /// Reconstruction term actually optimized (mel L1 or normalized soft-DTW).
    pub reconstruction: f64,
    /// Mel L1 of the KEEP synthesis on the segment.
    pub mel: f64,
    /// Mel L1 of the SHIFT synthesis on the segment (0 when the pass is off).
    pub mel_shift: f64,
    pub duration_total: f64,
    pub duration_reinforced: f64,
    pub feature_matching: f64,
    pub discriminator: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: u64,
    pub losses: LossReport,
    /// Share of evaluated tokens rewarded SHIFT.
    pub reward_shift_fraction: f64,
    pub lr: f64,
    /// Tokens whose shifted duration was clamped at zero.
    pub clamped: usize,
}

/// Generator-side forward pass of one step, before any update.
pub struct GeneratorPass {
    pub loss: Tensor,
    pub keep_audio: Tensor,
    pub target_audio: Tensor,
    pub losses: LossReport,
    pub rewards: Vec<RewardVector>,
    pub shift_fraction: f64,
    pub clamped: usize,
}

struct UtteranceSegment {
    keep_frames: Tensor,
    shift_frames: Option<Tensor>,
    target: Vec<f32>,
    segment: SegmentSpec,
    valid: usize,
    centers: Vec<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub models: Models,
    opt_g: AdamW,
    opt_d: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
    pub epoch_position: usize,
    last_report: Option<StepReport>,
}

impl Trainer {
    pub fn new(config: &TrainConfig, vocabulary: &Vocabulary, device: &Device) -> Result<Self> {
        config.validate()?;
        let spec = config.model.resolve(vocabulary.len())?;
        let models = Models::new(&spec, vocabulary, config.seed, device)?;
        let t = &config.train;
        let opt = |params| {
            AdamW::new(
                params,
                AdamWConfig {
                    lr: t.learning_rate,
                    beta1: t.betas.0,
                    beta2: t.betas.1,
                    eps: 1e-8,
                    weight_decay: t.weight_decay,
                },
            )
        };
        let opt_g = opt(models.generator_params())?;
        let opt_d = opt(models.discriminator_params())?;
        Ok(Self {
            config: config.clone(),
            models,
            opt_g,
            opt_d,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_A11E),
            step: 0,
            epoch: 0,
            epoch_position: 0,
            last_report: None,
        })
    }

    /// Restores parameters, optimizer moments, counters and RNG state.
    pub fn resume(config: &TrainConfig, checkpoint_path: &Path, device: &Device) -> Result<Self> {
        let ckpt = read_checkpoint(checkpoint_path, device)?;
        let mut trainer = Self::new(config, &ckpt.vocabulary, device)?;
        if trainer.models.spec != ckpt.manifest.model {
            return Err(Error::Checkpoint(format!(
                "model architecture in {} differs from the configured one",
                ckpt.dir.display()
            )));
        }
        if ckpt.manifest.config_hash != config.hash()? {
            log::warn!(
                "resuming {} with a config that differs from the one it was trained with",
                ckpt.dir.display()
            );
        }
        trainer.models.store.assign(&ckpt.tensors, "")?;
        trainer.opt_g.load_state(&ckpt.tensors, OPT_G_PREFIX)?;
        trainer.opt_d.load_state(&ckpt.tensors, OPT_D_PREFIX)?;
        trainer.set_lr(ckpt.manifest.learning_rate);
        trainer.step = ckpt.manifest.step;
        trainer.epoch = ckpt.manifest.epoch;
        trainer.epoch_position = ckpt.manifest.epoch_position;
        trainer.rng = ckpt.manifest.rng.clone();
        trainer.last_report = ckpt.manifest.metrics.clone();
        Ok(trainer)
    }

    pub fn lr(&self) -> f64 {
        self.opt_g.lr()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
    }

    pub fn last_report(&self) -> Option<&StepReport> {
        self.last_report.as_ref()
    }

    /// Encode, predict, shift, upsample both duration vectors, cut one shared
    /// segment, decode both, score both, reward, and assemble the generator
    /// objective. Consumes the trainer RNG (dropout, segment offsets).
    pub fn generator_pass(&mut self, batch: &[&TrainingUtterance]) -> Result<GeneratorPass> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch"));
        }
        let t = self.config.train.clone();
        let device = self.models.device().clone();
        let gamma = t.gamma;
        let seqs: Vec<&PhonemeSequence> = batch.iter().map(|u| &u.phonemes).collect();
        let tokens = Batch::from_sequences(&seqs);
        let state = self.models.encoder.encode(&tokens, &device)?;
        let d = self.models.predictor.forward(&state, Some(&mut self.rng))?;
        let b = batch.len();

        let mut segs = Vec::with_capacity(b);
        let mut d_shift_rows = Vec::with_capacity(b);
        let mut clamped = 0;
        for (i, utt) in batch.iter().enumerate() {
            let n = tokens.lengths[i];
            let m = utt.frames;
            let d_i = d.get(i)?.narrow(0, 0, n)?;
            let d_vals: Vec<f32> = d_i.to_vec1()?;
            let d_f64: Vec<f64> = d_vals.iter().map(|&v| v as f64).collect();
            let hidden = state.utterance(i)?;
            let (_, centers_t) = scale_durations_tensor(&d_i, m)?;
            let keep = gaussian_upsample(&hidden, &centers_t, t.sigma2, m)?;
            let shifted = apply_shift(&d_f64, t.alpha);
            clamped += shifted.clamped;
            let shift_vals: Vec<f32> = shifted.durations.iter().map(|&v| v as f32).collect();
            let shift_frames = if t.shift_pass {
                let ds = Tensor::from_vec(shift_vals.clone(), n, &device)?;
                match scale_durations_tensor(&ds, m) {
                    Ok((_, c)) => Some(gaussian_upsample(&hidden.detach(), &c, t.sigma2, m)?.frames),
                    Err(Error::DegenerateDurations) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            let mut row = shift_vals;
            row.resize(tokens.max_len, 0.0);
            d_shift_rows.push(row);

            let segment = sample_segment(m, gamma, &mut self.rng);
            let valid = segment.valid_frames(m);
            let cut = |f: &Tensor| -> Result<Tensor> {
                Ok(f.narrow(0, segment.offset, valid)?.pad_with_zeros(0, 0, gamma - valid)?)
            };
            let mut target = utt.audio
                [segment.offset * UPSAMPLE_FACTOR..(segment.offset + valid) * UPSAMPLE_FACTOR]
                .to_vec();
            target.resize(gamma * UPSAMPLE_FACTOR, 0.0);
            segs.push(UtteranceSegment {
                keep_frames: cut(&keep.frames)?,
                shift_frames: shift_frames.as_ref().map(cut).transpose()?,
                target,
                segment,
                valid,
                centers: scale_durations(&d_f64, m)?.centers,
            });
        }

        let keep_in = Tensor::stack(&segs.iter().map(|s| s.keep_frames.clone()).collect::<Vec<_>>(), 0)?;
        let keep_audio = self.models.decoder.decode(&keep_in)?;
        let target_audio = Tensor::from_vec(
            segs.iter().flat_map(|s| s.target.iter().copied()).collect::<Vec<_>>(),
            (b, gamma * UPSAMPLE_FACTOR),
            &device,
        )?;
        let mel_keep = self.models.mel.forward(&keep_audio)?;
        let mel_gt = self.models.mel.forward(&target_audio)?;

        let mut frame_mask = vec![0f32; b * gamma];
        for (i, s) in segs.iter().enumerate() {
            frame_mask[i * gamma..i * gamma + s.valid].fill(1.0);
        }
        let frame_mask = Tensor::from_vec(frame_mask, (b, gamma), &device)?;
        let valid_total: usize = segs.iter().map(|s| s.valid).sum();
        let per_frame_keep = (&mel_gt - &mel_keep)?.abs()?.mean(D::Minus1)?;
        let mel_l1 = (per_frame_keep.mul(&frame_mask)?.sum_all()? / valid_total as f64)?;

        let reconstruction = match t.reconstruction {
            ReconstructionLoss::MelL1 => mel_l1.clone(),
            ReconstructionLoss::SoftDtw => {
                let n_mels = self.models.spec.spectral.n_mels;
                let mut acc: Option<Tensor> = None;
                for (i, s) in segs.iter().enumerate() {
                    let gt_i = mel_gt.get(i)?.narrow(0, 0, s.valid)?;
                    let pr_i = mel_keep.get(i)?.narrow(0, 0, s.valid)?;
                    let v = (soft_dtw_tensor(&gt_i, &pr_i, &t.soft_dtw)? / (s.valid * n_mels) as f64)?;
                    acc = Some(match acc {
                        Some(a) => (a + v)?,
                        None => v,
                    });
                }
                (acc.expect("non-empty batch") / b as f64)?
            }
        };

        // Rewards.
        let pf_keep_rows: Vec<Vec<f32>> = per_frame_keep.to_vec2()?;
        let mut rewards = Vec::with_capacity(b);
        let mut evaluated = 0usize;
        let mut shifted_tokens = 0usize;
        let mut mel_shift_sum = 0.0;
        for (i, s) in segs.iter().enumerate() {
            let n = tokens.lengths[i];
            let mut reward = RewardVector::all_keep(n);
            match (&s.shift_frames, t.reward_scope) {
                (None, _) => {}
                (Some(shift_frames), RewardScope::Segment) => {
                    let audio = self.models.decoder.decode(&shift_frames.unsqueeze(0)?)?.detach();
                    let mel_s = self.models.mel.forward(&audio)?;
                    let pf_shift: Vec<f32> = (mel_gt.get(i)? - mel_s.get(0)?)?.abs()?.mean(D::Minus1)?.to_vec1()?;
                    let keep_l: Vec<f64> = pf_keep_rows[i][..s.valid].iter().map(|&v| v as f64).collect();
                    let shift_l: Vec<f64> = pf_shift[..s.valid].iter().map(|&v| v as f64).collect();
                    mel_shift_sum += shift_l.iter().sum::<f64>();
                    let range = tokens_in_segment(&s.centers, &s.segment, batch[i].frames);
                    let part = compute_reward(segment_losses(t.reward_mode, &keep_l, &shift_l), range.len())?;
                    evaluated += range.len();
                    shifted_tokens += part.shift_count();
                    reward.splice(range, &part);
                }
                (Some(_), RewardScope::Utterance) => {
                    let (keep_l, shift_l) = self.utterance_losses(&state, &d, i, &d_shift_rows[i][..n], batch[i])?;
                    mel_shift_sum += shift_l[..].iter().sum::<f64>() * s.valid as f64 / shift_l.len() as f64;
                    let part = compute_reward(segment_losses(t.reward_mode, &keep_l, &shift_l), n)?;
                    evaluated += n;
                    shifted_tokens += part.shift_count();
                    reward = part;
                }
            }
            rewards.push(reward);
        }

        let max_len = tokens.max_len;
        let mut mask = vec![0f32; b * max_len];
        for (i, r) in rewards.iter().enumerate() {
            for (j, &s) in r.shift.iter().enumerate() {
                mask[i * max_len + j] = s as f32;
            }
        }
        let shift_mask = Tensor::from_vec(mask, (b, max_len), &device)?;
        let d_shift = Tensor::from_vec(d_shift_rows.concat(), (b, max_len), &device)?;
        let l_re = (reinforced_duration_loss_tensor(&d, &d_shift, &shift_mask)? / b as f64)?;
        let m_lengths: Vec<f32> = batch.iter().map(|u| u.frames as f32).collect();
        let m_lengths = Tensor::from_vec(m_lengths, b, &device)?;
        let l_total = (m_lengths - d.sum(1)?)?.sqr()?.mean_all()?;

        let fake = self.models.discriminators.discriminate(&keep_audio)?;
        let adv = generator_loss(&logits_of(&fake))?;
        let mut loss = ((adv.affine(t.lambda_adv, 0.0)? + reconstruction.affine(t.lambda_mel, 0.0)?)?
            + (l_total.affine(t.lambda_dur_total, 0.0)? + l_re.affine(t.lambda_re, 0.0)?)?)?;
        let mut fm_value = 0.0;
        if t.feature_matching {
            let real = self.models.discriminators.discriminate(&target_audio)?;
            let fm = feature_matching_loss(&real, &fake)?;
            fm_value = scalar(&fm)?;
            loss = (loss + fm.affine(t.lambda_fm, 0.0)?)?;
        }

        let losses = LossReport {
            generator: scalar(&loss)?,
            adversarial: scalar(&adv)?,
            reconstruction: scalar(&reconstruction)?,
            mel: scalar(&mel_l1)?,
            mel_shift: if evaluated > 0 { mel_shift_sum / valid_total as f64 } else { 0.0 },
            duration_total: scalar(&l_total)?,
            duration_reinforced: scalar(&l_re)?,
            feature_matching: fm_value,
            discriminator: 0.0,
        };
        Ok(GeneratorPass {
            loss,
            keep_audio,
            target_audio,
            losses,
            rewards,
            shift_fraction: if evaluated > 0 {
                shifted_tokens as f64 / evaluated as f64
            } else {
                0.0
            },
            clamped,
        })
    }

    /// Per-frame KEEP and SHIFT losses over a whole utterance, no gradients.
    fn utterance_losses(
        &self,
        state: &crate::encoder::EncoderState,
        d: &Tensor,
        i: usize,
        d_shift: &[f32],
        utt: &TrainingUtterance,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let device = self.models.device();
        let n = d_shift.len();
        let m = utt.frames;
        let hidden = state.utterance(i)?.detach();
        let sigma2 = self.config.train.sigma2;
        let d_i = d.get(i)?.narrow(0, 0, n)?.detach();
        let gt = Tensor::from_vec(utt.audio.clone(), (1, m * UPSAMPLE_FACTOR), device)?;
        let mel_gt = self.models.mel.forward(&gt)?;
        let per_frame = |durations: &Tensor| -> Result<Vec<f64>> {
            let (_, c) = scale_durations_tensor(durations, m)?;
            let frames = gaussian_upsample(&hidden, &c, sigma2, m)?.frames;
            let audio = self.models.decoder.decode(&frames.unsqueeze(0)?)?.detach();
            let mel = self.models.mel.forward(&audio)?;
            let v: Vec<f32> = (&mel_gt - mel)?.abs()?.mean(D::Minus1)?.get(0)?.to_vec1()?;
            Ok(v.into_iter().map(f64::from).collect())
        };
        let keep = per_frame(&d_i)?;
        let shift = per_frame(&Tensor::from_vec(d_shift.to_vec(), n, device)?)?;
        Ok((keep, shift))
    }

    /// One full optimization step: generator update, then discriminator update.
    pub fn train_step(&mut self, batch: &[&TrainingUtterance]) -> Result<StepReport> {
        let ids: Vec<String> = batch.iter().map(|u| u.utterance_id.clone()).collect();
        let step = self.step + 1;
        let diverged = |reason: String| Error::Diverged {
            step,
            utterance_ids: ids.clone(),
            reason,
        };
        let pass = match self.generator_pass(batch) {
            Ok(p) => p,
            Err(Error::NonFiniteLoss(m)) => return Err(diverged(m)),
            Err(e) => return Err(e),
        };
        check_finite(&pass.losses).map_err(&diverged)?;
        let grads = pass.loss.backward()?;
        self.opt_g.apply(&grads)?;

        let real = self.models.discriminators.discriminate(&pass.target_audio)?;
        let fake = self.models.discriminators.discriminate(&pass.keep_audio.detach())?;
        let d_loss = discriminator_loss(&logits_of(&real), &logits_of(&fake))?;
        let d_value = scalar(&d_loss)?;
        if !d_value.is_finite() {
            return Err(diverged(format!("discriminator loss {d_value}")));
        }
        let grads = d_loss.backward()?;
        self.opt_d.apply(&grads)?;

        self.step = step;
        let mut losses = pass.losses;
        losses.discriminator = d_value;
        if pass.clamped > 0 {
            log::debug!("step {step}: {} shifted durations clamped at zero", pass.clamped);
        }
        let report = StepReport {
            step,
            epoch: self.epoch,
            losses,
            reward_shift_fraction: pass.shift_fraction,
            lr: self.lr(),
            clamped: pass.clamped,
        };
        self.last_report = Some(report.clone());
        Ok(report)
    }

    /// Mel L1 of full-utterance KEEP syntheses at ground-truth length.
    pub fn validation_loss(&self, utterances: &[TrainingUtterance]) -> Result<f64> {
        if utterances.is_empty() {
            return Err(Error::EmptyInput("validation set"));
        }
        let device = self.models.device();
        let mut total = 0.0;
        for utt in utterances {
            let seqs = [&utt.phonemes];
            let state = self.models.encoder.encode(&Batch::from_sequences(&seqs), device)?;
            let d = self.models.predictor.forward::<ChaCha8Rng>(&state, None)?.get(0)?;
            let (_, c) = scale_durations_tensor(&d, utt.frames)?;
            let frames = gaussian_upsample(&state.utterance(0)?, &c, self.config.train.sigma2, utt.frames)?.frames;
            let audio = self.models.decoder.decode(&frames.unsqueeze(0)?)?;
            let gt = Tensor::from_vec(utt.audio.clone(), (1, utt.audio.len()), device)?;
            let diff = (self.models.mel.forward(&gt)? - self.models.mel.forward(&audio)?)?;
            total += scalar(&diff.abs()?.mean_all()?)?;
        }
        Ok(total / utterances.len() as f64)
    }

    fn state_tensors(&self) -> Result<HashMap<String, Tensor>> {
        let mut tensors = self.models.store.tensors("");
        tensors.extend(self.opt_g.state_tensors(OPT_G_PREFIX)?);
        tensors.extend(self.opt_d.state_tensors(OPT_D_PREFIX)?);
        Ok(tensors)
    }

    pub fn save_checkpoint(&self, root: &Path) -> Result<PathBuf> {
        let manifest = new_manifest(
            self.step,
            self.epoch,
            self.epoch_position,
            self.lr(),
            &self.config,
            &self.models.spec,
            self.last_report.clone(),
            &self.rng,
        )?;
        write_checkpoint(root, &manifest, &self.state_tensors()?, &self.models.vocabulary)
    }
}

fn segment_losses<'a>(mode: RewardMode, keep: &'a [f64], shift: &'a [f64]) -> SegmentLosses<'a> {
    match mode {
        RewardMode::PhonemeWise => SegmentLosses::PerFrame { keep, shift },
        RewardMode::SegmentWise => SegmentLosses::Scalar {
            keep: keep.iter().sum::<f64>() / keep.len() as f64,
            shift: shift.iter().sum::<f64>() / shift.len() as f64,
        },
    }
}

fn check_finite(l: &LossReport) -> std::result::Result<(), String> {
    let named = [
        ("generator", l.generator),
        ("adversarial", l.adversarial),
        ("reconstruction", l.reconstruction),
        ("duration_total", l.duration_total),
        ("duration_reinforced", l.duration_reinforced),
        ("feature_matching", l.feature_matching),
    ];
    match named.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(format!("{name} loss is {v}")),
        None => Ok(()),
    }
}

/// Corpus split, vocabulary and loaded audio of a run.
pub struct PreparedData {
    pub vocabulary: Vocabulary,
    pub splits: Splits<CorpusEntry>,
}

/// Reads the metadata, splits it and builds the vocabulary from the
/// training split. Audio is checked for existence but not decoded.
pub fn prepare_data(config: &TrainConfig) -> Result<PreparedData> {
    let records = read_metadata(&config.data.metadata)?;
    let parts = make_splits(&records, config.data.val_size, config.data.test_size, config.seed)?;
    let vocabulary = Vocabulary::for_mode(config.data.tokenizer, parts.train.iter().map(|r| r.text.as_str()));
    prepare_with_vocabulary(config, vocabulary)
}

/// Same split as [`prepare_data`], tokenized with a stored vocabulary.
pub fn prepare_with_vocabulary(config: &TrainConfig, vocabulary: Vocabulary) -> Result<PreparedData> {
    let records = read_metadata(&config.data.metadata)?;
    let parts = make_splits(&records, config.data.val_size, config.data.test_size, config.seed)?;
    let build = |r: &[crate::data::MetadataRecord]| {
        build_entries(r, &config.data.metadata, &config.data.wav_dir, &vocabulary)
    };
    let splits = Splits {
        train: build(&parts.train)?,
        val: build(&parts.val)?,
        test: build(&parts.test)?,
    };
    Ok(PreparedData { vocabulary, splits })
}

pub fn load_training_utterances(entries: &[CorpusEntry]) -> Result<Vec<TrainingUtterance>> {
    load_utterances(entries)?
        .iter()
        .map(TrainingUtterance::from_utterance)
        .collect()
}

fn epoch_order(seed: u64, epoch: u64, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    epoch_batches(n, batch_size, &mut rng)
}

fn append_json_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(value)?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct ValidationRecord {
    step: u64,
    val_mel: f64,
}

#[derive(Debug, Serialize)]
struct DivergenceDump<'a> {
    step: u64,
    utterance_ids: &'a [String],
    reason: &'a str,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub last_report: Option<StepReport>,
}

/// Trains until `max_steps`, writing `metrics.jsonl`, `validation.jsonl`
/// and checkpoints under the run directory. Paths in `config` must already
/// be resolved.
pub fn fit(config: &TrainConfig, resume: Option<&Path>, device: &Device) -> Result<FitOutcome> {
    let out = &config.output.dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config, p, device)?,
        None => {
            let data = prepare_data(config)?;
            Trainer::new(config, &data.vocabulary, device)?
        }
    };
    let data = prepare_with_vocabulary(config, trainer.models.vocabulary.clone())?;
    let train = load_training_utterances(&data.splits.train)?;
    let val = load_training_utterances(&data.splits.val)?;
    if resume.is_none() {
        // A fresh run starts fresh logs.
        for f in [METRICS_FILE, VALIDATION_FILE] {
            let p = out.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let ckpt_root = out.join(CHECKPOINT_DIR);
    let t = config.train.clone();
    let mut last_saved: Option<PathBuf> = None;
    while trainer.step < t.max_steps {
        let order = epoch_order(config.seed, trainer.epoch, train.len(), t.batch_size);
        while trainer.epoch_position < order.len() && trainer.step < t.max_steps {
            let batch: Vec<&TrainingUtterance> = order[trainer.epoch_position].iter().map(|&i| &train[i]).collect();
            let report = match trainer.train_step(&batch) {
                Ok(r) => r,
                Err(Error::Diverged {
                    step,
                    utterance_ids,
                    reason,
                }) => {
                    let dump = DivergenceDump {
                        step,
                        utterance_ids: &utterance_ids,
                        reason: &reason,
                    };
                    let path = out.join("divergence.json");
                    fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))?;
                    return Err(Error::Diverged {
                        step,
                        utterance_ids,
                        reason,
                    });
                }
                Err(e) => return Err(e),
            };
            trainer.epoch_position += 1;
            append_json_line(&out.join(METRICS_FILE), &report)?;
            log::info!(
                "step {} mel {:.4} g {:.4} d {:.4} shift {:.3}",
                report.step,
                report.losses.mel,
                report.losses.generator,
                report.losses.discriminator,
                report.reward_shift_fraction
            );
            if !val.is_empty() && trainer.step % t.validate_every == 0 {
                let v = trainer.validation_loss(&val)?;
                append_json_line(
                    &out.join(VALIDATION_FILE),
                    &ValidationRecord {
                        step: trainer.step,
                        val_mel: v,
                    },
                )?;
            }
            if trainer.step % t.checkpoint_every == 0 {
                last_saved = Some(trainer.save_checkpoint(&ckpt_root)?);
            }
        }
        if trainer.epoch_position >= order.len() {
            trainer.epoch += 1;
            trainer.epoch_position = 0;
            let lr = trainer.lr() * t.lr_decay;
            trainer.set_lr(lr);
        }
    }
    let final_dir = ckpt_root.join(checkpoint::step_dir_name(trainer.step));
    let checkpoint = match last_saved {
        Some(p) if p == final_dir => p,
        _ => trainer.save_checkpoint(&ckpt_root)?,
    };
    Ok(FitOutcome {
        checkpoint,
        steps: trainer.step,
        last_report: trainer.last_report.clone(),
    })
}

/// Models plus the settings inference needs, restored from a checkpoint.
pub struct Synthesizer {
    pub models: Models,
    pub sigma2: f64,
    pub config: TrainConfig,
    pub step: u64,
}

impl Synthesizer {
    pub fn from_checkpoint(path: &Path, device: &Device) -> Result<Self> {
        let LoadedCheckpoint {
            manifest,
            vocabulary,
            tensors,
            ..
        } = read_checkpoint(path, device)?;
        let models = Models::new(&manifest.model, &vocabulary, manifest.config.seed, device)?;
        models.store.assign(&tensors, "")?;
        Ok(Self {
            models,
            sigma2: manifest.config.train.sigma2,
            config: manifest.config,
            step: manifest.step,
        })
    }

    pub fn synthesize(&self, text: &str) -> Result<Synthesis> {
        self.models.synthesize(text, self.sigma2)
    }
}
