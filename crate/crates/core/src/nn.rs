//! Minimal layer toolkit on top of `candle-core`.
//!
//! Parameters are drawn from a seeded ChaCha stream so that two runs with the
//! same seed start from bit-identical weights. Convolutions are lowered to
//! gather + matmul, which keeps every op on a path with a fast backward pass
//! (including dilated, strided and transposed variants).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{backprop::GradStore, CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
}

struct Entry {
    var: Var,
    trainable: bool,
}

struct StoreInner {
    vars: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

/// Shared, named parameter collection. Cloning yields another handle to the
/// same parameters.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, StoreInner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        let mut inner = self.lock();
        if inner.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
            }
            Init::Uniform(bound) => {
                let dist =
                    Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut inner.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.vars.insert(
            name,
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    fn insert(&self, name: String, t: &Tensor, trainable: bool) -> Result<Var> {
        let mut inner = self.lock();
        if inner.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        inner.vars.insert(
            name,
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .vars
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn tensors(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.lock()
            .vars
            .iter()
            .map(|(k, e)| (format!("{prefix}{k}"), e.var.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors[prefix + name]`.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        let inner = self.lock();
        for (name, entry) in &inner.vars {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.dims() != entry.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {key}: stored {:?}, model {:?}",
                    t.dims(),
                    entry.var.dims()
                )));
            }
            entry
                .var
                .set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(""), path.as_ref())?;
        Ok(())
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors = candle_core::safetensors::load(path.as_ref(), &self.device)?;
        self.assign(&tensors, "")
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.full(name), shape, init, true)
    }

    pub fn param_from(&self, name: &str, t: &Tensor) -> Result<Var> {
        self.store.insert(self.full(name), t, true)
    }

    /// Saved with the model but never touched by the optimizer.
    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(self.full(name), shape, init, false)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let neg_abs = x.abs()?.neg()?;
    Ok((x.relu()? + (neg_abs.exp()? + 1.0)?.log()?)?)
}

/// Inverted dropout with a caller-owned RNG; identity when `rng` is `None`.
pub fn dropout<R: Rng>(x: &Tensor, p: f64, rng: Option<&mut R>) -> Result<Tensor> {
    let Some(rng) = rng else {
        return Ok(x.clone());
    };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Gathers strided, dilated taps and contracts them with one matmul.
///
/// `x: [B, C_in, L]`, `w: [C_out, C_in / groups, K]`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_unfold(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
    groups: usize,
) -> Result<Tensor> {
    let (b, c_in, len) = x.dims3()?;
    let (c_out, c_per_group, k) = w.dims3()?;
    if c_in != c_per_group * groups || c_out % groups != 0 {
        return Err(Error::Shape(format!(
            "conv1d: input channels {c_in}, weight {:?}, groups {groups}",
            w.dims()
        )));
    }
    let padded = len + pad_left + pad_right;
    let span = dilation * (k - 1) + 1;
    if padded < span {
        return Err(Error::Shape(format!(
            "conv1d: padded length {padded} shorter than kernel span {span}"
        )));
    }
    let l_out = (padded - span) / stride + 1;
    let needed = (k - 1) * dilation + l_out * stride;
    let extra = needed.saturating_sub(padded);
    let x = if pad_left + pad_right + extra > 0 {
        x.pad_with_zeros(2, pad_left, pad_right + extra)?
    } else {
        x.clone()
    };
    // [B, C_in, K, L_out]: channel-major, tap-minor, matching w's flattening.
    let taps = Unfold {
        k,
        dilation,
        stride,
        l_out,
    };
    let cols = x.contiguous()?.apply_op1(taps)?.reshape((b, c_in, k, l_out))?;
    if groups == 1 {
        let cols = cols.reshape((b, c_in * k, l_out))?;
        let w = w.reshape((c_out, c_in * k))?;
        Ok(w.broadcast_matmul(&cols)?)
    } else {
        let cols = cols.reshape((b, groups, c_per_group * k, l_out))?;
        let w = w.reshape((1, groups, c_out / groups, c_per_group * k))?;
        Ok(w.broadcast_matmul(&cols)?.reshape((b, c_out, l_out))?)
    }
}

/// im2col over the last axis: `[B, C, L] -> [B, C, K * L_out]`.
#[derive(Clone, Copy)]
struct Unfold {
    k: usize,
    dilation: usize,
    stride: usize,
    l_out: usize,
}

/// The adjoint of [`Unfold`]: scatter-adds columns back onto `[B, C, len]`.
struct Fold {
    taps: Unfold,
    len: usize,
}

fn cpu_slice<'a, T: candle_core::WithDType>(
    storage: &'a CpuStorage,
    layout: &Layout,
) -> candle_core::Result<&'a [T]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("unfold expects contiguous input".into()))?;
    Ok(&T::cpu_storage_as_slice(storage)?[start..end])
}

impl Unfold {
    fn gather<T: Copy + Default>(&self, x: &[T], rows: usize, len: usize) -> Vec<T> {
        let (k, l_out) = (self.k, self.l_out);
        let mut out = vec![T::default(); rows * k * l_out];
        for (row, dst) in x.chunks_exact(len).zip(out.chunks_exact_mut(k * l_out)) {
            for (tap, dst) in dst.chunks_exact_mut(l_out).enumerate() {
                let src = &row[tap * self.dilation..];
                if self.stride == 1 {
                    dst.copy_from_slice(&src[..l_out]);
                } else {
                    for (o, d) in dst.iter_mut().enumerate() {
                        *d = src[o * self.stride];
                    }
                }
            }
        }
        out
    }
}

impl Fold {
    fn scatter<T: Copy + Default + std::ops::AddAssign>(&self, g: &[T], rows: usize) -> Vec<T> {
        let (k, l_out) = (self.taps.k, self.taps.l_out);
        let mut out = vec![T::default(); rows * self.len];
        for (src, row) in g.chunks_exact(k * l_out).zip(out.chunks_exact_mut(self.len)) {
            for (tap, src) in src.chunks_exact(l_out).enumerate() {
                let dst = &mut row[tap * self.taps.dilation..];
                for (o, &v) in src.iter().enumerate() {
                    dst[o * self.taps.stride] += v;
                }
            }
        }
        out
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold1d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, len) = layout.shape().dims3()?;
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(self.gather(cpu_slice::<f32>(storage, layout)?, b * c, len)),
            CpuStorage::F64(_) => CpuStorage::F64(self.gather(cpu_slice::<f64>(storage, layout)?, b * c, len)),
            _ => return Err(candle_core::Error::Msg("unfold supports f32 and f64".into())),
        };
        Ok((out, Shape::from((b, c, self.k * self.l_out))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let len = arg.dim(2)?;
        let fold = Fold { taps: *self, len };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&fold)?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold1d"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, _) = layout.shape().dims3()?;
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(self.scatter(cpu_slice::<f32>(storage, layout)?, b * c)),
            CpuStorage::F64(_) => CpuStorage::F64(self.scatter(cpu_slice::<f64>(storage, layout)?, b * c)),
            _ => return Err(candle_core::Error::Msg("fold supports f32 and f64".into())),
        };
        Ok((out, Shape::from((b, c, self.len))))
    }
}

/// Reflect-padding on the last axis of `[B, C, L]` via an index gather.
pub fn reflect_pad_last(x: &Tensor, left: usize, right: usize) -> Result<Tensor> {
    if left == 0 && right == 0 {
        return Ok(x.clone());
    }
    let len = x.dim(D::Minus1)?;
    if left >= len || right >= len {
        return Err(Error::Shape(format!(
            "reflect pad ({left}, {right}) needs input longer than {len}"
        )));
    }
    let n = len as isize;
    let idx: Vec<u32> = (-(left as isize)..n + right as isize)
        .map(|i| {
            let i = if i < 0 { -i } else { i };
            let i = if i >= n { 2 * (n - 1) - i } else { i };
            i as u32
        })
        .collect();
    let idx = Tensor::from_vec(idx, len + left + right, x.device())?;
    Ok(x.index_select(&idx, x.rank() - 1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    None,
    Weight,
    Spectral,
}

#[derive(Clone)]
enum Kernel {
    Plain(Var),
    WeightNorm { v: Var, g: Var },
    Spectral { w: Var, u: Var },
}

#[derive(Clone)]
pub struct Conv1d {
    kernel: Kernel,
    bias: Option<Var>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: (usize, usize),
    pub groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
    pub norm: Norm,
    pub init: Init,
}

impl ConvSpec {
    /// Stride-1 convolution that preserves length (odd kernels).
    pub fn same(kernel_size: usize, dilation: usize) -> Self {
        let p = dilation * (kernel_size - 1) / 2;
        Self {
            kernel_size,
            stride: 1,
            dilation,
            padding: (p, p),
            groups: 1,
            bias: true,
            norm: Norm::None,
            init: Init::Normal(0.01),
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn norm(mut self, n: Norm) -> Self {
        self.norm = n;
        self
    }

    pub fn init(mut self, i: Init) -> Self {
        self.init = i;
        self
    }
}

pub fn same_padding(kernel_size: usize, dilation: usize) -> usize {
    dilation * (kernel_size - 1) / 2
}

fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let n = v.sqr()?.sum_all()?.sqrt()?.affine(1.0, 1e-12)?;
    Ok(v.broadcast_div(&n)?)
}

impl Conv1d {
    pub fn new(scope: &Scope, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let shape = [c_out, c_in / spec.groups, spec.kernel_size];
        let kernel = match spec.norm {
            Norm::None => Kernel::Plain(scope.param("weight", &shape, spec.init)?),
            Norm::Weight => {
                let v = scope.param("weight_v", &shape, spec.init)?;
                let g0 = v.sqr()?.sum_keepdim(2)?.sum_keepdim(1)?.sqrt()?;
                let g = scope.param_from("weight_g", &g0)?;
                Kernel::WeightNorm { v, g }
            }
            Norm::Spectral => {
                let w = scope.param("weight", &shape, spec.init)?;
                let u = scope.buffer("weight_u", &[c_out], Init::Normal(1.0))?;
                // Warm the estimate up so early forward passes agree.
                let mat = w.as_tensor().reshape((c_out, ()))?;
                let mut u0 = l2_normalize(u.as_tensor())?.unsqueeze(0)?;
                for _ in 0..15 {
                    let v = l2_normalize(&u0.matmul(&mat)?)?;
                    u0 = l2_normalize(&v.matmul(&mat.t()?)?)?;
                }
                u.set(&u0.squeeze(0)?)?;
                Kernel::Spectral { w, u }
            }
        };
        let bias = if spec.bias {
            Some(scope.param("bias", &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            kernel,
            bias,
            in_channels: c_in,
            out_channels: c_out,
            kernel_size: spec.kernel_size,
            stride: spec.stride,
            dilation: spec.dilation,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    /// Effective kernel; one power iteration refreshes the spectral estimate.
    pub fn weight(&self) -> Result<Tensor> {
        match &self.kernel {
            Kernel::Plain(w) => Ok(w.as_tensor().clone()),
            Kernel::WeightNorm { v, g } => {
                let norm = v.sqr()?.sum_keepdim(2)?.sum_keepdim(1)?.sqrt()?.affine(1.0, 1e-12)?;
                Ok(v.broadcast_div(&norm)?.broadcast_mul(g)?)
            }
            Kernel::Spectral { w, u } => {
                let c_out = w.dim(0)?;
                let mat = w.as_tensor().reshape((c_out, ()))?;
                let mat_d = mat.detach();
                let u0 = u.as_tensor().unsqueeze(0)?;
                let v = l2_normalize(&u0.matmul(&mat_d)?)?;
                let u1 = l2_normalize(&v.matmul(&mat_d.t()?)?)?;
                u.set(&u1.squeeze(0)?)?;
                let sigma = u1.matmul(&mat)?.matmul(&v.t()?)?.reshape(())?;
                Ok(w.as_tensor().broadcast_div(&sigma)?)
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight()?;
        let y = conv1d_unfold(
            x,
            &w,
            self.stride,
            self.dilation,
            self.padding.0,
            self.padding.1,
            self.groups,
        )?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1))?)?),
            None => Ok(y),
        }
    }
}

/// Transposed 1-D convolution in sub-pixel form: a stride-1 convolution with
/// `stride * C_out` channels and `ceil(K / stride)` taps, interleaved and
/// cropped so that `L_out = (L - 1) * stride - 2 * padding + K`.
#[derive(Clone)]
pub struct ConvTranspose1d {
    conv: Conv1d,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    pub fn new(
        scope: &Scope,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        norm: Norm,
        init: Init,
    ) -> Result<Self> {
        let taps = kernel_size.div_ceil(stride);
        let spec = ConvSpec {
            kernel_size: taps,
            stride: 1,
            dilation: 1,
            padding: (taps - 1, taps - 1),
            groups: 1,
            bias: false,
            norm,
            init,
        };
        let conv = Conv1d::new(scope, c_in, c_out * stride, spec)?;
        Ok(Self {
            conv,
            out_channels: c_out,
            kernel_size,
            stride,
            padding,
        })
    }

    pub fn output_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.kernel_size - 2 * self.padding
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, len) = x.dims3()?;
        let y = self.conv.forward(x)?;
        let q = y.dim(2)?;
        let y = y
            .reshape((b, self.stride, self.out_channels, q))?
            .permute((0, 2, 3, 1))?
            .reshape((b, self.out_channels, q * self.stride))?;
        Ok(y.narrow(2, self.padding, self.output_len(len))?)
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(scope: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: scope.param("weight", &[d_out, d_in], Init::Uniform(bound))?,
            bias: scope.param("bias", &[d_out], Init::Zeros)?,
        })
    }

    /// `x: [..., d_in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.as_tensor().t()?)?;
        Ok(y.broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Clone)]
pub struct Embedding {
    table: Var,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(scope: &Scope, vocab_size: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: scope.param("weight", &[vocab_size, dim], Init::Normal(1.0))?,
            vocab_size,
            dim,
        })
    }

    /// `ids: [B, N]` (u32) to `[B, N, dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, n) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        Ok(self
            .table
            .as_tensor()
            .index_select(&flat, 0)?
            .reshape((b, n, self.dim))?)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", &[dim], Init::Ones)?,
            beta: scope.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay; moment buffers are checkpointable.
pub struct AdamW {
    pub config: AdamWConfig,
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let first = params
            .iter()
            .map(|(_, v)| v.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let second = first.clone();
        Ok(Self {
            config,
            params,
            first,
            second,
            step: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn apply(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients still reference the forward graph; keep none of it.
            let g = &g.detach();
            let m = ((&self.first[i] * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((&self.second[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
            let decayed = (var.as_tensor() * (1.0 - c.lr * c.weight_decay))?;
            var.set(&(decayed - (update * c.lr)?)?)?;
            self.first[i] = m.detach();
            self.second[i] = v.detach();
        }
        Ok(())
    }

    pub fn state_tensors(&self, prefix: &str) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("{prefix}m.{name}"), self.first[i].clone());
            out.insert(format!("{prefix}v.{name}"), self.second[i].clone());
        }
        let device = self.first.first().map(|t| t.device().clone()).unwrap_or(Device::Cpu);
        out.insert(
            format!("{prefix}step"),
            Tensor::new(&[self.step as f64], &device)?,
        );
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        let get = |key: String| {
            tensors
                .get(&key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))
        };
        for (i, (name, var)) in self.params.iter().enumerate() {
            self.first[i] = get(format!("{prefix}m.{name}"))?.to_dtype(var.dtype())?;
            self.second[i] = get(format!("{prefix}v.{name}"))?.to_dtype(var.dtype())?;
        }
        let step: Vec<f64> = get(format!("{prefix}step"))?.to_vec1()?;
        self.step = step[0] as u64;
        Ok(())
    }
}
