//! Reward-driven duration aligner.
//!
//! The duration predictor (the agent) proposes one non-negative duration per
//! token. Each training step the trainer synthesizes the same segment twice:
//! once from the predicted durations (KEEP) and once from a copy shifted by
//! `±alpha` in alternating signs (SHIFT). Whichever mel loss is lower decides
//! a one-hot reward per token, and the reinforced duration loss pulls the
//! prediction toward the shifted value exactly where SHIFT won.
//!
//! Durations become frames through Gaussian upsampling: scaled lengths give
//! token centers `c_i = cumsum(l)_i - l_i / 2`, and frame `t` (1-based) takes a
//! softmax over `-(t - c_i)^2 / sigma2` across all tokens.

use std::ops::Range;

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::nn::{dropout, softplus, Conv1d, ConvSpec, Init, LayerNorm, Linear, Scope};

pub const DEFAULT_SIGMA2: f64 = 10.0;
pub const DEFAULT_GAMMA: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// One keep/shift decision for the whole segment.
    SegmentWise,
    /// One decision per token from downsampled per-frame losses.
    #[default]
    PhonemeWise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftOutcome {
    pub durations: Vec<f64>,
    /// Number of entries clamped at zero.
    pub clamped: usize,
}

/// `d[j] + alpha` for even `j`, `d[j] - alpha` for odd `j`.
///
/// For odd lengths the last token is left unshifted so the signed shifts
/// cancel. Negative results are clamped to zero and the removed mass is not
/// redistributed, so the total is only preserved when nothing was clamped.
pub fn apply_shift(d_pred: &[f64], alpha: f64) -> ShiftOutcome {
    let n = d_pred.len();
    let mut clamped = 0;
    let durations = d_pred
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            let delta = if n % 2 == 1 && j == n - 1 {
                0.0
            } else if j % 2 == 0 {
                alpha
            } else {
                -alpha
            };
            let v = d + delta;
            if v < 0.0 {
                clamped += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    if clamped > 0 {
        log::debug!("shift clamped {clamped} of {n} durations at zero");
    }
    ShiftOutcome { durations, clamped }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledDurations {
    pub lengths: Vec<f64>,
    pub centers: Vec<f64>,
}

/// Rescales durations to sum to `m_length` and derives token centers.
pub fn scale_durations(d: &[f64], m_length: usize) -> Result<ScaledDurations> {
    let total: f64 = d.iter().sum();
    if d.is_empty() || total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateDurations);
    }
    let lengths: Vec<f64> = d.iter().map(|v| v * m_length as f64 / total).collect();
    Ok(ScaledDurations {
        centers: centers_from_lengths(&lengths),
        lengths,
    })
}

pub fn centers_from_lengths(lengths: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    lengths
        .iter()
        .map(|l| {
            acc += l;
            acc - l / 2.0
        })
        .collect()
}

/// Per-utterance duration bookkeeping for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationState {
    pub d_pred: Vec<f64>,
    pub d_shift: Vec<f64>,
    pub alpha: f64,
    pub mode: RewardMode,
    pub l_scaled: Vec<f64>,
    pub centers: Vec<f64>,
}

impl DurationState {
    pub fn new(d_pred: Vec<f64>, alpha: f64, mode: RewardMode, m_length: usize) -> Result<Self> {
        let shifted = apply_shift(&d_pred, alpha);
        let scaled = scale_durations(&d_pred, m_length)?;
        Ok(Self {
            d_pred,
            d_shift: shifted.durations,
            alpha,
            mode,
            l_scaled: scaled.lengths,
            centers: scaled.centers,
        })
    }
}

/// Row-stochastic token-to-frame weights, `weights[[t, i]]` for frame `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentGrid {
    pub weights: Array2<f64>,
    pub sigma2: f64,
}

impl AlignmentGrid {
    pub fn from_tensor(weights: &Tensor, sigma2: f64) -> Result<Self> {
        let (t, n) = weights.dims2()?;
        let flat: Vec<f64> = weights.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let weights = Array2::from_shape_vec((t, n), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { weights, sigma2 })
    }

    pub fn num_frames(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_tokens(&self) -> usize {
        self.weights.ncols()
    }

    /// Most-weighted token per frame (first index on ties).
    pub fn argmax_per_frame(&self) -> Vec<usize> {
        self.weights
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Share of consecutive frame pairs whose argmax token does not decrease.
    pub fn monotonic_fraction(&self) -> f64 {
        let am = self.argmax_per_frame();
        if am.len() < 2 {
            return 1.0;
        }
        let ok = am.windows(2).filter(|w| w[1] >= w[0]).count();
        ok as f64 / (am.len() - 1) as f64
    }
}

/// Differentiable scaling: `l = d * m_length / sum(d)`, `c = cumsum(l) - l / 2`.
pub fn scale_durations_tensor(d: &Tensor, m_length: usize) -> Result<(Tensor, Tensor)> {
    let total = d.sum_all()?;
    let total_v = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if total_v <= 0.0 || !total_v.is_finite() {
        return Err(Error::DegenerateDurations);
    }
    let lengths = d.broadcast_div(&total)?.affine(m_length as f64, 0.0)?;
    let centers = (lengths.cumsum(0)? - lengths.affine(0.5, 0.0)?)?;
    Ok((lengths, centers))
}

/// `[T, N]` weights for frames `t = 1..=T`.
pub fn alignment_weights(centers: &Tensor, sigma2: f64, num_frames: usize) -> Result<Tensor> {
    let n = centers.dim(0)?;
    let t: Vec<f64> = (1..=num_frames).map(|v| v as f64).collect();
    let t = Tensor::from_vec(t, (num_frames, 1), centers.device())?.to_dtype(centers.dtype())?;
    let diff = t.broadcast_sub(&centers.reshape((1, n))?)?;
    let logits = diff.sqr()?.affine(-1.0 / sigma2, 0.0)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug, Clone)]
pub struct Upsampled {
    /// `[T, hidden]`.
    pub frames: Tensor,
    /// `[T, N]`.
    pub weights: Tensor,
}

/// Frames from explicit scaled lengths and centers.
pub fn gaussian_upsample(
    hidden: &Tensor,
    centers: &Tensor,
    sigma2: f64,
    num_frames: usize,
) -> Result<Upsampled> {
    if num_frames == 0 {
        return Err(Error::EmptyInput("frame count"));
    }
    let n = hidden.dim(0)?;
    if n == 0 || centers.dim(0)? != n {
        return Err(Error::Shape(format!(
            "upsample: {n} hidden rows vs {} centers",
            centers.dim(0)?
        )));
    }
    let weights = alignment_weights(centers, sigma2, num_frames)?;
    let frames = weights.matmul(hidden)?;
    Ok(Upsampled { frames, weights })
}

/// Scales `durations` to `m_length` frames and upsamples `hidden: [N, H]`.
pub fn upsample_to_length(
    hidden: &Tensor,
    durations: &Tensor,
    m_length: usize,
    sigma2: f64,
) -> Result<Upsampled> {
    let (_, centers) = scale_durations_tensor(durations, m_length)?;
    gaussian_upsample(hidden, &centers, sigma2, m_length)
}

/// Convenience wrapper over plain vectors; runs the tensor path in f64.
pub fn alignment_grid(centers: &[f64], sigma2: f64, num_frames: usize) -> Result<AlignmentGrid> {
    let c = Tensor::from_vec(centers.to_vec(), centers.len(), &Device::Cpu)?;
    AlignmentGrid::from_tensor(&alignment_weights(&c, sigma2, num_frames)?, sigma2)
}

/// A window of `gamma` consecutive frames starting at `offset` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub gamma: usize,
    pub offset: usize,
}

impl SegmentSpec {
    /// Frames of the segment that exist in a sequence of `total_frames`.
    pub fn valid_frames(&self, total_frames: usize) -> usize {
        total_frames.saturating_sub(self.offset).min(self.gamma)
    }
}

/// Uniform offset on `[0, T - gamma]`; sequences shorter than `gamma` start
/// at 0 and the caller pads frames and audio.
pub fn sample_segment<R: Rng>(total_frames: usize, gamma: usize, rng: &mut R) -> SegmentSpec {
    let offset = if total_frames > gamma {
        rng.random_range(0..=total_frames - gamma)
    } else {
        0
    };
    SegmentSpec { gamma, offset }
}

/// Tokens whose centers fall inside the segment, i.e. in
/// `[offset + 0.5, offset + gamma + 0.5)` in 1-based frame units. If none
/// does, the token nearest the segment middle.
pub fn tokens_in_segment(centers: &[f64], segment: &SegmentSpec, total_frames: usize) -> Range<usize> {
    let lo = segment.offset as f64 + 0.5;
    let hi = (segment.offset + segment.valid_frames(total_frames)) as f64 + 0.5;
    let start = centers.iter().position(|&c| c >= lo);
    let end = centers.iter().rposition(|&c| c < hi);
    match (start, end) {
        (Some(s), Some(e)) if s <= e => s..e + 1,
        _ => {
            let mid = (lo + hi) / 2.0;
            let nearest = centers
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - mid).abs().total_cmp(&(b.1 - mid).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            nearest..nearest + 1
        }
    }
}

/// One-hot keep/shift rewards per token, stored as 0/1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardVector {
    pub keep: Vec<u8>,
    pub shift: Vec<u8>,
}

impl RewardVector {
    pub fn all_keep(n: usize) -> Self {
        Self {
            keep: vec![1; n],
            shift: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn shift_count(&self) -> usize {
        self.shift.iter().map(|&s| s as usize).sum()
    }

    /// Writes `part` into positions `range`.
    pub fn splice(&mut self, range: Range<usize>, part: &RewardVector) {
        self.keep[range.clone()].copy_from_slice(&part.keep);
        self.shift[range].copy_from_slice(&part.shift);
    }

    pub fn shift_mask(&self) -> Vec<f64> {
        self.shift.iter().map(|&s| s as f64).collect()
    }
}

/// Mel losses of the KEEP and SHIFT syntheses of one segment.
#[derive(Debug, Clone, Copy)]
pub enum SegmentLosses<'a> {
    /// Segment-wise: one scalar each.
    Scalar { keep: f64, shift: f64 },
    /// Phoneme-wise: per-frame losses over the segment.
    PerFrame { keep: &'a [f64], shift: &'a [f64] },
}

impl SegmentLosses<'_> {
    pub fn mode(&self) -> RewardMode {
        match self {
            SegmentLosses::Scalar { .. } => RewardMode::SegmentWise,
            SegmentLosses::PerFrame { .. } => RewardMode::PhonemeWise,
        }
    }
}

/// Adaptive average pooling from `x.len()` bins to `n`: bin `i` averages
/// `x[floor(i L / n) .. ceil((i + 1) L / n)]`.
pub fn adaptive_avg_pool(x: &[f64], n: usize) -> Vec<f64> {
    let len = x.len();
    (0..n)
        .map(|i| {
            let start = i * len / n;
            let end = ((i + 1) * len).div_ceil(n);
            let slice = &x[start..end.max(start + 1).min(len)];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// KEEP wins where its loss is lower or equal, SHIFT wins where it is strictly lower.
pub fn compute_reward(losses: SegmentLosses<'_>, n: usize) -> Result<RewardVector> {
    if n == 0 {
        return Err(Error::EmptyInput("reward length"));
    }
    let decide = |k: f64, s: f64| -> Result<bool> {
        if !k.is_finite() || !s.is_finite() {
            return Err(Error::NonFiniteLoss(format!("keep={k} shift={s}")));
        }
        Ok(k > s)
    };
    let shift: Vec<bool> = match losses {
        SegmentLosses::Scalar { keep, shift } => vec![decide(keep, shift)?; n],
        SegmentLosses::PerFrame { keep, shift } => {
            if keep.len() != shift.len() || keep.is_empty() {
                return Err(Error::Shape(format!(
                    "per-frame losses: keep {} vs shift {}",
                    keep.len(),
                    shift.len()
                )));
            }
            let k = adaptive_avg_pool(keep, n);
            let s = adaptive_avg_pool(shift, n);
            k.iter()
                .zip(&s)
                .map(|(&a, &b)| decide(a, b))
                .collect::<Result<_>>()?
        }
    };
    Ok(RewardVector {
        keep: shift.iter().map(|&s| u8::from(!s)).collect(),
        shift: shift.iter().map(|&s| u8::from(s)).collect(),
    })
}

/// `sum_j |d_pred[j] - (d_pred[j] * r_keep[j] + d_shift[j] * r_shift[j])|`.
pub fn reinforced_duration_loss(d_pred: &[f64], d_shift: &[f64], reward: &RewardVector) -> Result<f64> {
    if d_pred.len() != d_shift.len() || d_pred.len() != reward.len() {
        return Err(Error::Shape(format!(
            "reinforced loss: d_pred {}, d_shift {}, reward {}",
            d_pred.len(),
            d_shift.len(),
            reward.len()
        )));
    }
    Ok(d_pred
        .iter()
        .zip(d_shift)
        .enumerate()
        .map(|(j, (&d, &s))| (d - (d * reward.keep[j] as f64 + s * reward.shift[j] as f64)).abs())
        .sum())
}

/// Tensor form of the reinforced loss. Written as `sum(r_shift * |d - d_shift|)`
/// (identical for one-hot rewards) so KEEP positions get exactly zero gradient;
/// the shifted target is detached.
pub fn reinforced_duration_loss_tensor(d_pred: &Tensor, d_shift: &Tensor, shift_mask: &Tensor) -> Result<Tensor> {
    let diff = (d_pred - d_shift.detach())?.abs()?;
    Ok(diff.mul(shift_mask)?.sum_all()?)
}

/// `(m_length - sum(d))^2` on unscaled predictions.
pub fn total_duration_loss(d_pred: &[f64], m_length: usize) -> f64 {
    let s: f64 = d_pred.iter().sum();
    (m_length as f64 - s).powi(2)
}

pub fn total_duration_loss_tensor(d_pred: &Tensor, m_length: usize) -> Result<Tensor> {
    Ok(d_pred.sum_all()?.affine(-1.0, m_length as f64)?.sqr()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub filter_size: usize,
    pub kernel_size: usize,
    pub dropout: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            filter_size: 256,
            kernel_size: 3,
            dropout: 0.1,
        }
    }
}

/// The agent: two conv layers (each with ReLU, layer norm and dropout), then
/// a linear projection to one softplus-activated duration per token.
#[derive(Clone)]
pub struct DurationPredictor {
    pub config: PredictorConfig,
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    proj: Linear,
}

impl DurationPredictor {
    pub fn new(scope: &Scope, in_dim: usize, config: &PredictorConfig) -> Result<Self> {
        if config.kernel_size % 2 == 0 || !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(
                "predictor: kernel_size must be odd and dropout in [0, 1)".into(),
            ));
        }
        let f = config.filter_size;
        let spec = |c_in: usize| {
            let bound = 1.0 / ((c_in * config.kernel_size) as f64).sqrt();
            ConvSpec::same(config.kernel_size, 1).init(Init::Uniform(bound))
        };
        Ok(Self {
            config: config.clone(),
            conv1: Conv1d::new(&scope.pp("conv1"), in_dim, f, spec(in_dim))?,
            norm1: LayerNorm::new(&scope.pp("norm1"), f)?,
            conv2: Conv1d::new(&scope.pp("conv2"), f, f, spec(f))?,
            norm2: LayerNorm::new(&scope.pp("norm2"), f)?,
            proj: Linear::new(&scope.pp("proj"), f, 1)?,
        })
    }

    /// `[B, N]` durations in frames, zero at padding. Dropout is active only
    /// when an RNG is supplied.
    pub fn forward<R: Rng>(&self, state: &EncoderState, mut rng: Option<&mut R>) -> Result<Tensor> {
        let mask_c = state.mask.unsqueeze(1)?;
        let x = state.hidden.transpose(1, 2)?;
        let x = self.conv1.forward(&x)?.relu()?.broadcast_mul(&mask_c)?;
        let x = self.norm1.forward(&x.transpose(1, 2)?)?;
        let x = dropout(&x, self.config.dropout, rng.as_deref_mut())?;
        let x = x.transpose(1, 2)?.broadcast_mul(&mask_c)?;
        let x = self.conv2.forward(&x)?.relu()?.broadcast_mul(&mask_c)?;
        let x = self.norm2.forward(&x.transpose(1, 2)?)?;
        let x = dropout(&x, self.config.dropout, rng.as_deref_mut())?;
        let d = softplus(&self.proj.forward(&x)?.squeeze(D::Minus1)?)?;
        Ok(d.mul(&state.mask)?)
    }
}
