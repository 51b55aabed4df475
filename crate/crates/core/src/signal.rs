//! Audio I/O and spectral feature extraction.
//!
//! Two mel routes share one filterbank and one framing convention: a plain
//! FFT path used for features and evaluation, and a tensor path
//! ([`MelExtractor`]) that stays differentiable so mel losses can be
//! back-propagated into the generator.
//!
//! Framing: the signal is reflect-padded by `(n_fft - hop) / 2` on both sides
//! and framed without centering, so a signal of `k * hop` samples yields
//! exactly `k` frames and frame `t` covers samples around `t * hop + hop / 2`.

use std::f64::consts::PI;
use std::path::Path;

use audioadapter_buffers::direct::SequentialSliceOfVecs;
use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rubato::{Fft, FixedSync, Resampler};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 22050;

/// Mel magnitudes are clamped to this value before the natural log.
pub const LOG_FLOOR: f32 = 1e-5;

/// Added under the square root of the power spectrum; keeps the gradient of
/// the magnitude finite at exact zeros.
pub const MAG_EPS: f32 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    pub n_fft: usize,
    pub win_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            win_size: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            sample_rate: SAMPLE_RATE,
        }
    }
}

impl SpectralConfig {
    pub fn n_freq(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn pad(&self) -> usize {
        (self.n_fft - self.hop) / 2
    }

    /// Frame count for a signal of `num_samples`.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        (num_samples + 2 * self.pad() - self.n_fft) / self.hop + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_size > self.n_fft || self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::Config(format!(
                "spectral: need 0 < hop <= n_fft and win_size <= n_fft, got {self:?}"
            )));
        }
        if (self.n_fft - self.hop) % 2 != 0 {
            return Err(Error::Config(
                "spectral: n_fft - hop must be even for symmetric padding".into(),
            ));
        }
        if self.fmax <= self.fmin || self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "spectral: need fmin < fmax <= sample_rate/2, got {}..{}",
                self.fmin, self.fmax
            )));
        }
        Ok(())
    }
}

/// Log-mel spectrogram, rows are frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f32>,
    pub hop: usize,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn load_audio(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let unreadable = |reason: String| Error::UnreadableAudio {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| unreadable(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    let samples: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| unreadable(e.to_string()))?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| unreadable(e.to_string()))?
        }
    };
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(unreadable("non-finite sample".into()));
    }
    let wav = Waveform::new(samples, spec.sample_rate);
    if wav.sample_rate == SAMPLE_RATE {
        Ok(wav)
    } else {
        resample(&wav, SAMPLE_RATE)
    }
}

/// Writes 16-bit PCM; samples outside [-1, 1] are clipped.
pub fn save_wav(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnreadableAudio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &wav.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

pub fn resample(wav: &Waveform, target_rate: u32) -> Result<Waveform> {
    if wav.sample_rate == target_rate {
        return Ok(wav.clone());
    }
    if wav.is_empty() {
        return Ok(Waveform::new(Vec::new(), target_rate));
    }
    let mut resampler = Fft::<f64>::new(
        wav.sample_rate as usize,
        target_rate as usize,
        1024,
        1,
        FixedSync::Input,
    )
    .map_err(|e| Error::Resample(e.to_string()))?;
    let data = vec![wav.samples.iter().map(|&s| s as f64).collect::<Vec<_>>()];
    let input = SequentialSliceOfVecs::new(&data, 1, wav.len())
        .map_err(|e| Error::Resample(e.to_string()))?;
    let out = resampler
        .process_all(&input, wav.len(), None)
        .map_err(|e| Error::Resample(e.to_string()))?;
    let samples = out.take_data().into_iter().map(|s| s as f32).collect();
    Ok(Waveform::new(samples, target_rate))
}

fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        mel * F_SP
    }
}

/// Center frequencies (Hz) of the mel filters, lowest first.
pub fn mel_center_frequencies(cfg: &SpectralConfig) -> Vec<f64> {
    let edges = mel_edges(cfg);
    edges[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &SpectralConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Slaney-scale, area-normalized triangular filters, `[n_mels, n_freq]`.
pub fn mel_filterbank(cfg: &SpectralConfig) -> Array2<f32> {
    let n_freq = cfg.n_freq();
    let edges = mel_edges(cfg);
    let fft_freqs: Vec<f64> = (0..n_freq)
        .map(|k| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)
        .collect();
    let mut fb = Array2::<f32>::zeros((cfg.n_mels, n_freq));
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (hi - lo);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let lower = (f - lo) / (mid - lo);
            let upper = (hi - f) / (hi - mid);
            let w = lower.min(upper).max(0.0);
            fb[[m, k]] = (w * enorm) as f32;
        }
    }
    fb
}

/// Periodic Hann window of `win_size`, zero-padded (centered) to `n_fft`.
pub fn analysis_window(cfg: &SpectralConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.n_fft];
    let offset = (cfg.n_fft - cfg.win_size) / 2;
    for i in 0..cfg.win_size {
        w[offset + i] = 0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.win_size as f64).cos();
    }
    w
}

/// Index into the unpadded signal for padded position `k`.
fn reflect_index(k: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = k;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn frame_indices(cfg: &SpectralConfig, len: usize) -> Vec<usize> {
    let t = cfg.num_frames(len);
    let pad = cfg.pad() as isize;
    let mut idx = Vec::with_capacity(t * cfg.n_fft);
    for frame in 0..t {
        for n in 0..cfg.n_fft {
            idx.push(reflect_index((frame * cfg.hop + n) as isize - pad, len));
        }
    }
    idx
}

fn check_length(cfg: &SpectralConfig, len: usize) -> Result<()> {
    // Reflection needs more samples than the pad width.
    if len < cfg.win_size || len <= cfg.pad() {
        return Err(Error::TooShort {
            len,
            min: cfg.win_size.max(cfg.pad() + 1),
        });
    }
    Ok(())
}

/// Log-mel spectrogram on the plain FFT path.
pub fn mel_spectrogram(wav: &Waveform, cfg: &SpectralConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    check_length(cfg, wav.len())?;
    let t = cfg.num_frames(wav.len());
    let n_freq = cfg.n_freq();
    let window = analysis_window(cfg);
    let fb = mel_filterbank(cfg);
    let idx = frame_indices(cfg, wav.len());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);

    let mut out = Array2::<f32>::zeros((t, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut mag = vec![0f32; n_freq];
    for frame in 0..t {
        let row = &idx[frame * cfg.n_fft..(frame + 1) * cfg.n_fft];
        for (n, (&i, b)) in row.iter().zip(buf.iter_mut()).enumerate() {
            *b = Complex::new(wav.samples[i] as f64 * window[n], 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf[..n_freq]) {
            *m = ((c.norm_sqr() as f32) + MAG_EPS).sqrt();
        }
        for m in 0..cfg.n_mels {
            let e: f32 = fb.row(m).iter().zip(&mag).map(|(w, v)| w * v).sum();
            out[[frame, m]] = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram {
        frames: out,
        hop: cfg.hop,
    })
}

/// Differentiable log-mel extraction over batches of waveforms.
///
/// Framing is a gather, the DFT is a matmul against windowed cosine/sine
/// bases, so gradients flow back to the samples.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    cfg: SpectralConfig,
    cos_basis: Tensor,
    sin_basis: Tensor,
    mel_basis_t: Tensor,
}

impl MelExtractor {
    pub fn new(cfg: &SpectralConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.n_fft;
        let n_freq = cfg.n_freq();
        let window = analysis_window(cfg);
        let mut cos = vec![0f64; n_fft * n_freq];
        let mut sin = vec![0f64; n_fft * n_freq];
        for n in 0..n_fft {
            for k in 0..n_freq {
                // n * k can be large; reduce before the trig call.
                let phase = 2.0 * PI * ((n * k) % n_fft) as f64 / n_fft as f64;
                cos[n * n_freq + k] = window[n] * phase.cos();
                sin[n * n_freq + k] = window[n] * phase.sin();
            }
        }
        let fb = mel_filterbank(cfg);
        let fb_t: Vec<f64> = fb.t().iter().map(|&v| v as f64).collect();
        Ok(Self {
            cfg: cfg.clone(),
            cos_basis: Tensor::from_vec(cos, (n_fft, n_freq), device)?.to_dtype(dtype)?,
            sin_basis: Tensor::from_vec(sin, (n_fft, n_freq), device)?.to_dtype(dtype)?,
            mel_basis_t: Tensor::from_vec(fb_t, (n_freq, cfg.n_mels), device)?.to_dtype(dtype)?,
        })
    }

    pub fn config(&self) -> &SpectralConfig {
        &self.cfg
    }

    /// `samples: [B, L]` to log-mel `[B, T, n_mels]`.
    pub fn forward(&self, samples: &Tensor) -> Result<Tensor> {
        let (b, len) = samples.dims2()?;
        check_length(&self.cfg, len)?;
        let t = self.cfg.num_frames(len);
        let idx: Vec<u32> = frame_indices(&self.cfg, len)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        let idx = Tensor::from_vec(idx, t * self.cfg.n_fft, samples.device())?;
        let frames = samples
            .index_select(&idx, 1)?
            .reshape((b * t, self.cfg.n_fft))?;
        let re = frames.matmul(&self.cos_basis)?;
        let im = frames.matmul(&self.sin_basis)?;
        let mag = (re.sqr()? + im.sqr()?)?
            .affine(1.0, MAG_EPS as f64)?
            .sqrt()?;
        let mel = mag.matmul(&self.mel_basis_t)?;
        let floor = mel.ones_like()?.affine(LOG_FLOOR as f64, 0.0)?;
        Ok(mel.maximum(&floor)?.log()?.reshape((b, t, self.cfg.n_mels))?)
    }
}
