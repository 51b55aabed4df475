//! Spectral reconstruction losses: plain mel L1 and soft dynamic time
//! warping with a warp penalty.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, D};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MelL1 {
    /// Sum of absolute differences divided by `T * n_mels`.
    pub total: f64,
    /// Mean absolute difference per frame.
    pub per_frame: Vec<f64>,
}

pub fn mel_l1(gt: ArrayView2<'_, f32>, pred: ArrayView2<'_, f32>) -> Result<MelL1> {
    if gt.dim() != pred.dim() {
        return Err(Error::Shape(format!(
            "mel_l1: ground truth {:?} vs prediction {:?}",
            gt.dim(),
            pred.dim()
        )));
    }
    let (t, m) = gt.dim();
    if t == 0 || m == 0 {
        return Err(Error::EmptyInput("mel frames"));
    }
    let per_frame: Vec<f64> = gt
        .outer_iter()
        .zip(pred.outer_iter())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / m as f64)
        .collect();
    let total = per_frame.iter().sum::<f64>() / t as f64;
    Ok(MelL1 { total, per_frame })
}

/// Differentiable mel L1 on `[..., T, n_mels]`: `(scalar, per-frame [..., T])`.
pub fn mel_l1_tensor(gt: &Tensor, pred: &Tensor) -> Result<(Tensor, Tensor)> {
    if gt.dims() != pred.dims() {
        return Err(Error::Shape(format!(
            "mel_l1: ground truth {:?} vs prediction {:?}",
            gt.dims(),
            pred.dims()
        )));
    }
    let diff = (gt - pred)?.abs()?;
    let per_frame = diff.mean(D::Minus1)?;
    Ok((diff.mean_all()?, per_frame))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftDtwConfig {
    /// Penalty added to each step that advances only one sequence.
    pub omega: f64,
    /// Soft-min temperature.
    pub tau: f64,
    /// Sakoe-Chiba radius in prediction frames; `None` runs the full DP.
    pub band_width: Option<usize>,
}

impl Default for SoftDtwConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            tau: 0.01,
            band_width: None,
        }
    }
}

impl SoftDtwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) || !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!(
                "soft-DTW needs tau > 0 and omega >= 0 (tau {}, omega {})",
                self.tau, self.omega
            )));
        }
        if self.band_width == Some(0) {
            return Err(Error::Config("soft-DTW band_width must be at least 1".into()));
        }
        Ok(())
    }

    fn in_band(&self, i: usize, j: usize, n: usize, m: usize) -> bool {
        match self.band_width {
            None => true,
            Some(r) => {
                // Distance from the straight line joining (1, 1) and (n, m).
                let diag = if n > 1 {
                    1.0 + (i as f64 - 1.0) * (m as f64 - 1.0) / (n as f64 - 1.0)
                } else {
                    1.0
                };
                (j as f64 - diag).abs() <= r as f64
            }
        }
    }
}

/// Pairwise L1 distances between frames: `cost[i][j] = |gt[i] - pred[j]|_1`.
pub fn l1_cost_matrix(gt: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if gt.ncols() != pred.ncols() {
        return Err(Error::Shape(format!(
            "cost matrix: {} vs {} feature bins",
            gt.ncols(),
            pred.ncols()
        )));
    }
    if gt.nrows() == 0 || pred.nrows() == 0 {
        return Err(Error::EmptyInput("frame sequence"));
    }
    Ok(Array2::from_shape_fn((gt.nrows(), pred.nrows()), |(i, j)| {
        gt.row(i).iter().zip(pred.row(j)).map(|(a, b)| (a - b).abs()).sum()
    }))
}

fn softmin(a: f64, b: f64, c: f64, tau: f64) -> f64 {
    let lo = a.min(b).min(c);
    if lo == f64::INFINITY {
        return f64::INFINITY;
    }
    let s = (-(a - lo) / tau).exp() + (-(b - lo) / tau).exp() + (-(c - lo) / tau).exp();
    lo - tau * s.ln()
}

/// Accumulated soft costs with a one-cell border: `r[0][0] = 0`, other
/// border cells `+inf`.
fn soft_dtw_table(cost: &Array2<f64>, cfg: &SoftDtwConfig) -> Array2<f64> {
    let (n, m) = cost.dim();
    let mut r = Array2::from_elem((n + 1, m + 1), f64::INFINITY);
    r[[0, 0]] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            if !cfg.in_band(i, j, n, m) {
                continue;
            }
            let diag = r[[i - 1, j - 1]];
            let up = r[[i - 1, j]] + cfg.omega;
            let left = r[[i, j - 1]] + cfg.omega;
            r[[i, j]] = cost[[i - 1, j - 1]] + softmin(diag, up, left, cfg.tau);
        }
    }
    r
}

/// Soft-DTW value of a precomputed cost matrix.
pub fn soft_dtw_cost(cost: &Array2<f64>, cfg: &SoftDtwConfig) -> Result<f64> {
    cfg.validate()?;
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput("cost matrix"));
    }
    let v = soft_dtw_table(cost, cfg)[[n, m]];
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "soft-DTW over {n}x{m} frames is {v}; widen the band"
        )));
    }
    Ok(v)
}

/// Gradient of the soft-DTW value with respect to every cost cell: the
/// expected alignment under the soft-min path distribution.
pub fn soft_dtw_alignment(cost: &Array2<f64>, cfg: &SoftDtwConfig) -> Array2<f64> {
    let (n, m) = cost.dim();
    let r = soft_dtw_table(cost, cfg);
    let mut e = Array2::<f64>::zeros((n + 2, m + 2));
    e[[n, m]] = 1.0;
    // Probability that cell (i, j) was reached from predecessor value `prev`.
    let weight = |succ: (usize, usize), prev: f64| -> f64 {
        let (si, sj) = succ;
        let rs = r[[si, sj]];
        if !rs.is_finite() || !prev.is_finite() {
            return 0.0;
        }
        ((rs - cost[[si - 1, sj - 1]] - prev) / cfg.tau).exp()
    };
    for i in (1..=n).rev() {
        for j in (1..=m).rev() {
            if (i, j) == (n, m) || !r[[i, j]].is_finite() {
                continue;
            }
            let rij = r[[i, j]];
            let mut acc = 0.0;
            if i < n {
                acc += e[[i + 1, j]] * weight((i + 1, j), rij + cfg.omega);
            }
            if j < m {
                acc += e[[i, j + 1]] * weight((i, j + 1), rij + cfg.omega);
            }
            if i < n && j < m {
                acc += e[[i + 1, j + 1]] * weight((i + 1, j + 1), rij);
            }
            e[[i, j]] = acc;
        }
    }
    e.slice(ndarray::s![1..=n, 1..=m]).to_owned()
}

/// Soft-DTW over a `[N, M]` cost tensor, differentiable through the cost.
#[derive(Debug, Clone)]
struct SoftDtwOp(SoftDtwConfig);

fn cost_from_storage(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Array2<f64>> {
    let (n, m) = layout.shape().dims2()?;
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("soft-DTW expects a contiguous cost matrix".into()))?;
    let data: Vec<f64> = match storage {
        CpuStorage::F64(v) => v[start..end].to_vec(),
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        _ => return Err(candle_core::Error::Msg("soft-DTW supports f32 and f64".into())),
    };
    Array2::from_shape_vec((n, m), data).map_err(|e| candle_core::Error::Msg(e.to_string()))
}

impl CustomOp1 for SoftDtwOp {
    fn name(&self) -> &'static str {
        "soft-dtw"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let cost = cost_from_storage(storage, layout)?;
        let v = soft_dtw_cost(&cost, &self.0).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(vec![v as f32]),
            _ => CpuStorage::F64(vec![v]),
        };
        Ok((out, Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, m) = arg.dims2()?;
        let rows: Vec<Vec<f64>> = arg.to_dtype(candle_core::DType::F64)?.to_vec2()?;
        let cost = Array2::from_shape_fn((n, m), |(i, j)| rows[i][j]);
        let e = soft_dtw_alignment(&cost, &self.0);
        let e = Tensor::from_vec(e.into_raw_vec_and_offset().0, (n, m), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(e.broadcast_mul(grad_res)?))
    }
}

/// Differentiable soft-DTW between `gt: [T1, n_mels]` and `pred: [T2, n_mels]`.
pub fn soft_dtw_tensor(gt: &Tensor, pred: &Tensor, cfg: &SoftDtwConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, bins) = gt.dims2()?;
    let (m, bins_p) = pred.dims2()?;
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput("frame sequence"));
    }
    if bins != bins_p {
        return Err(Error::Shape(format!("soft-DTW: {bins} vs {bins_p} mel bins")));
    }
    let cost = gt
        .unsqueeze(1)?
        .broadcast_sub(&pred.unsqueeze(0)?)?
        .abs()?
        .sum(D::Minus1)?
        .contiguous()?;
    Ok(cost.apply_op1(SoftDtwOp(cfg.clone()))?)
}

/// Soft-DTW between two frame sequences.
pub fn soft_dtw(gt: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>, cfg: &SoftDtwConfig) -> Result<f64> {
    soft_dtw_cost(&l1_cost_matrix(gt, pred)?, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtwPath {
    pub cost: f64,
    /// Aligned `(gt, pred)` index pairs from `(0, 0)` to `(N-1, M-1)`.
    pub pairs: Vec<(usize, usize)>,
}

/// Minimum-cost monotonic alignment with the same step set and penalty as
/// the soft version.
pub fn dtw(cost: &Array2<f64>, omega: f64) -> Result<DtwPath> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput("cost matrix"));
    }
    let mut r = Array2::from_elem((n + 1, m + 1), f64::INFINITY);
    r[[0, 0]] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = r[[i - 1, j - 1]]
                .min(r[[i - 1, j]] + omega)
                .min(r[[i, j - 1]] + omega);
            r[[i, j]] = cost[[i - 1, j - 1]] + best;
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n, m);
    while (i, j) != (1, 1) {
        let diag = r[[i - 1, j - 1]];
        let up = r[[i - 1, j]] + omega;
        let left = r[[i, j - 1]] + omega;
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i - 1, j - 1));
    }
    pairs.reverse();
    Ok(DtwPath { cost: r[[n, m]], pairs })
}
