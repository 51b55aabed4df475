//! Objective metrics: duration error, MCD over 13 mel-cepstral coefficients,
//! f0 RMSE from a normalized-autocorrelation pitch tracker, and alignment
//! heatmaps.

use std::collections::BTreeMap;
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::aligner::AlignmentGrid;
use crate::data::{CorpusEntry, DurationTargets};
use crate::error::{Error, Result};
use crate::objectives::dtw;
use crate::signal::{load_audio, mel_spectrogram, resample, SpectralConfig, Waveform, SAMPLE_RATE};
use crate::trainer::Synthesizer;

/// Cepstral coefficients compared by MCD, `c0` excluded.
pub const MCD_ORDER: usize = 13;

/// `10 / ln 10`, converting natural-log cepstral distance to decibels.
const DB_PER_NEPER: f64 = 4.342_944_819_032_518;

/// Mean absolute difference in frames between predicted and target durations.
pub fn duration_error(pred: &[f64], target: &DurationTargets) -> Result<f64> {
    if pred.len() != target.durations.len() {
        return Err(Error::LengthMismatch {
            utterance_id: target.utterance_id.clone(),
            expected: target.durations.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("duration vector"));
    }
    let sum: f64 = pred
        .iter()
        .zip(&target.durations)
        .map(|(p, &t)| (p - t as f64).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Corpus value: the mean of per-utterance errors.
pub fn corpus_duration_error(per_utterance: &[f64]) -> Result<f64> {
    mean(per_utterance).ok_or(Error::EmptyInput("per-utterance duration errors"))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Orthonormal DCT-II rows `1..=order` over `n` inputs.
fn dct_matrix(n: usize, order: usize) -> Array2<f64> {
    let scale = (2.0 / n as f64).sqrt();
    Array2::from_shape_fn((order, n), |(k, i)| {
        let k = k + 1;
        scale * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).cos()
    })
}

fn check_audible(wav: &Waveform) -> Result<()> {
    if wav.is_empty() {
        return Err(Error::EmptyInput("waveform"));
    }
    if wav.samples.iter().all(|s| s.abs() < 1e-6) {
        return Err(Error::SilentSignal);
    }
    Ok(())
}

fn at_model_rate(wav: &Waveform, cfg: &SpectralConfig) -> Result<Waveform> {
    resample(wav, cfg.sample_rate)
}

/// Mel-cepstra `c1..c13` per frame: DCT-II of the training log-mel.
pub fn mel_cepstra(wav: &Waveform, cfg: &SpectralConfig) -> Result<Array2<f64>> {
    check_audible(wav)?;
    let wav = at_model_rate(wav, cfg)?;
    let mel = mel_spectrogram(&wav, cfg)?;
    let logmel = mel.frames.mapv(f64::from);
    let dct = dct_matrix(logmel.ncols(), MCD_ORDER);
    Ok(logmel.dot(&dct.t()))
}

fn euclidean_cost(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!("{} vs {} coefficients", a.ncols(), b.ncols())));
    }
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        let d = &a.row(i) - &b.row(j);
        d.dot(&d).sqrt()
    }))
}

/// MCD between two cepstral sequences after hard DTW on their distance.
pub fn mcd_from_cepstra(reference: ArrayView2<'_, f64>, synthesized: ArrayView2<'_, f64>) -> Result<f64> {
    let cost = euclidean_cost(reference, synthesized)?;
    let path = dtw(&cost, 0.0)?;
    let total: f64 = path.pairs.iter().map(|&(i, j)| cost[[i, j]]).sum();
    Ok(DB_PER_NEPER * 2f64.sqrt() * total / path.pairs.len() as f64)
}

/// MCD₁₃ in dB with the default spectral pipeline.
pub fn mcd13(reference: &Waveform, synthesized: &Waveform) -> Result<f64> {
    mcd13_with(reference, synthesized, &SpectralConfig::default())
}

pub fn mcd13_with(reference: &Waveform, synthesized: &Waveform, cfg: &SpectralConfig) -> Result<f64> {
    let a = mel_cepstra(reference, cfg)?;
    let b = mel_cepstra(synthesized, cfg)?;
    mcd_from_cepstra(a.view(), b.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchConfig {
    pub fmin: f64,
    pub fmax: f64,
    /// Seconds.
    pub window: f64,
    /// Seconds.
    pub hop: f64,
    /// Minimum normalized autocorrelation peak for a voiced frame.
    pub voicing_threshold: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            fmin: 50.0,
            fmax: 500.0,
            window: 0.025,
            hop: 0.010,
            voicing_threshold: 0.3,
        }
    }
}

impl PitchConfig {
    fn samples(&self, sr: u32) -> (usize, usize, usize, usize) {
        let sr = sr as f64;
        let win = (self.window * sr).round() as usize;
        let hop = ((self.hop * sr).round() as usize).max(1);
        let min_lag = (sr / self.fmax).floor().max(1.0) as usize;
        let max_lag = (sr / self.fmin).ceil() as usize;
        (win, hop, min_lag, max_lag)
    }
}

/// Frame-level f0 in Hz, `None` for unvoiced frames. Frame `i` reads
/// samples from `i * hop` on; only frames with room for the longest lag are
/// analysed.
pub fn track_f0(wav: &Waveform, cfg: &PitchConfig) -> Vec<Option<f64>> {
    let (win, hop, min_lag, max_lag) = cfg.samples(wav.sample_rate);
    let x: Vec<f64> = wav.samples.iter().map(|&v| v as f64).collect();
    let need = win + max_lag + 1;
    if x.len() < need {
        return Vec::new();
    }
    let n_frames = (x.len() - need) / hop + 1;
    let mut out = Vec::with_capacity(n_frames);
    let mut r = vec![0.0; max_lag + 2];
    for f in 0..n_frames {
        let seg = &x[f * hop..f * hop + need];
        let e0: f64 = seg[..win].iter().map(|v| v * v).sum();
        if e0 < 1e-10 {
            out.push(None);
            continue;
        }
        for (lag, slot) in r.iter_mut().enumerate().skip(min_lag - 1) {
            let (mut xy, mut yy) = (0.0, 0.0);
            for n in 0..win {
                let b = seg[n + lag];
                xy += seg[n] * b;
                yy += b * b;
            }
            *slot = if yy > 1e-12 { xy / (e0 * yy).sqrt() } else { 0.0 };
        }
        let best = (min_lag..=max_lag).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap_or(min_lag);
        if r[best] < cfg.voicing_threshold {
            out.push(None);
            continue;
        }
        // Multiples of the period score almost as well; take the shortest
        // lag that is a local peak close to the best one.
        let lag = (min_lag..=max_lag)
            .find(|&l| r[l] >= 0.9 * r[best] && r[l] >= r[l - 1] && r[l] >= r[l + 1])
            .unwrap_or(best);
        let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
        let denom = a - 2.0 * b + c;
        let offset = if denom.abs() > 1e-12 {
            (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        out.push(Some(wav.sample_rate as f64 / (lag as f64 + offset)));
    }
    out
}

/// RMSE of f0 over DTW-paired frames voiced in both signals. Frames are
/// paired on mel-cepstra computed at the pitch hop.
pub fn rmse_f0(reference: &Waveform, synthesized: &Waveform) -> Result<f64> {
    rmse_f0_with(reference, synthesized, &PitchConfig::default())
}

pub fn rmse_f0_with(reference: &Waveform, synthesized: &Waveform, cfg: &PitchConfig) -> Result<f64> {
    for w in [reference, synthesized] {
        if w.is_empty() {
            return Err(Error::EmptyInput("waveform"));
        }
    }
    let reference = resample(reference, SAMPLE_RATE)?;
    let synthesized = resample(synthesized, SAMPLE_RATE)?;
    let fa = track_f0(&reference, cfg);
    let fb = track_f0(&synthesized, cfg);
    let pairs = pair_frames(&reference, &synthesized, cfg, fa.len(), fb.len())?;
    let sq: Vec<f64> = pairs
        .into_iter()
        .filter_map(|(i, j)| match (fa[i], fb[j]) {
            (Some(a), Some(b)) => Some((a - b).powi(2)),
            _ => None,
        })
        .collect();
    mean(&sq).map(f64::sqrt).ok_or(Error::NoCoVoicedFrames)
}

fn pair_frames(
    a: &Waveform,
    b: &Waveform,
    cfg: &PitchConfig,
    na: usize,
    nb: usize,
) -> Result<Vec<(usize, usize)>> {
    let (win, hop, _, max_lag) = cfg.samples(SAMPLE_RATE);
    let mut spectral = SpectralConfig {
        hop,
        ..SpectralConfig::default()
    };
    if (spectral.n_fft - hop) % 2 != 0 {
        spectral.hop += 1;
    }
    // Cepstral frame `k` is centred on sample `k * hop`; pitch frame `i` on
    // `i * hop + (win + max_lag) / 2`.
    let lead = (win + max_lag) / 2;
    let cep = |w: &Waveform, n: usize| -> Result<Option<Array2<f64>>> {
        match mel_cepstra(w, &spectral) {
            Ok(c) => {
                let last = c.nrows() - 1;
                let rows: Vec<usize> = (0..n)
                    .map(|i| (((i * hop + lead) as f64 / spectral.hop as f64).round() as usize).min(last))
                    .collect();
                Ok(Some(c.select(ndarray::Axis(0), &rows)))
            }
            Err(Error::SilentSignal) => Ok(None),
            Err(e) => Err(e),
        }
    };
    if na == 0 || nb == 0 {
        return Ok(Vec::new());
    }
    match (cep(a, na)?, cep(b, nb)?) {
        (Some(ca), Some(cb)) => Ok(dtw(&euclidean_cost(ca.view(), cb.view())?, 0.0)?.pairs),
        // A silent side has no voiced frames; any pairing gives the same answer.
        _ => Ok((0..na.min(nb)).map(|i| (i, i)).collect()),
    }
}

/// Grayscale heatmap with frames along x and tokens along y (token 0 at the
/// bottom). Each frame column is scaled by its maximum weight.
pub fn render_alignment(grid: &AlignmentGrid) -> Result<GrayImage> {
    let (t, n) = (grid.num_frames(), grid.num_tokens());
    if t == 0 || n == 0 {
        return Err(Error::EmptyInput("alignment grid"));
    }
    let mut img = GrayImage::new(t as u32, n as u32);
    for (frame, row) in grid.weights.rows().into_iter().enumerate() {
        let peak = row.iter().cloned().fold(0.0f64, f64::max);
        for (token, &w) in row.iter().enumerate() {
            let v = if peak > 0.0 { w / peak } else { 0.0 };
            let px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(frame as u32, (n - 1 - token) as u32, Luma([px]));
        }
    }
    Ok(img)
}

pub fn plot_alignment(grid: &AlignmentGrid, out_path: impl AsRef<Path>) -> Result<()> {
    let out_path = out_path.as_ref();
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    render_alignment(grid)?.save(out_path)?;
    Ok(())
}

/// Token index of the brightest pixel in each frame column.
pub fn image_argmax(img: &GrayImage) -> Vec<usize> {
    let n = img.height();
    (0..img.width())
        .map(|x| {
            let mut best = 0u32;
            for token in 0..n {
                let v = img.get_pixel(x, n - 1 - token).0[0];
                if v > img.get_pixel(x, n - 1 - best).0[0] {
                    best = token;
                }
            }
            best as usize
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub utterance_id: String,
    pub duration_error: Option<f64>,
    pub mcd13: Option<f64>,
    pub rmse_f0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub utterances: usize,
    pub duration_error: Option<f64>,
    pub mcd13: Option<f64>,
    pub rmse_f0: Option<f64>,
    /// Utterances whose f0 RMSE was undefined (no co-voiced frames).
    pub rmse_f0_skipped: usize,
}

/// Aggregates are means over the utterances where a metric is defined.
pub fn aggregate(rows: &[UtteranceMetrics]) -> AggregateMetrics {
    let col = |f: fn(&UtteranceMetrics) -> Option<f64>| rows.iter().filter_map(f).collect::<Vec<_>>();
    let f0 = col(|r| r.rmse_f0);
    AggregateMetrics {
        utterances: rows.len(),
        duration_error: mean(&col(|r| r.duration_error)),
        mcd13: mean(&col(|r| r.mcd13)),
        rmse_f0_skipped: rows.len() - f0.len(),
        rmse_f0: mean(&f0),
    }
}

/// Synthesizes every entry from its text and scores it against the
/// recording. Duration error needs a target for the utterance.
pub fn evaluate_entries(
    synth: &Synthesizer,
    entries: &[CorpusEntry],
    targets: &BTreeMap<String, DurationTargets>,
) -> Result<Vec<UtteranceMetrics>> {
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let out = synth.models.synthesize_sequence(&entry.phonemes, synth.sigma2)?;
        let reference = load_audio(&entry.audio_path)?;
        let duration_error = match targets.get(&entry.utterance_id) {
            Some(t) => Some(duration_error(&out.raw_durations, t)?),
            None => {
                log::warn!("no duration target for {}", entry.utterance_id);
                None
            }
        };
        let mcd = match mcd13(&reference, &out.waveform) {
            Ok(v) => Some(v),
            Err(Error::SilentSignal) => None,
            Err(e) => return Err(e),
        };
        let f0 = match rmse_f0(&reference, &out.waveform) {
            Ok(v) => Some(v),
            Err(Error::NoCoVoicedFrames) => None,
            Err(e) => return Err(e),
        };
        rows.push(UtteranceMetrics {
            utterance_id: entry.utterance_id.clone(),
            duration_error,
            mcd13: mcd,
            rmse_f0: f0,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, secs: f64, amp: f32) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32)
            .collect();
        Waveform::new(samples, SAMPLE_RATE)
    }

    fn chirp(secs: f64) -> Waveform {
        let n = (secs * SAMPLE_RATE as f64) as usize;
        let mut phase = 0.0f64;
        let samples = (0..n)
            .map(|i| {
                let f = 120.0 + 200.0 * i as f64 / n as f64;
                phase += 2.0 * std::f64::consts::PI * f / SAMPLE_RATE as f64;
                (0.4 * phase.sin() + 0.1 * (3.0 * phase).sin()) as f32
            })
            .collect();
        Waveform::new(samples, SAMPLE_RATE)
    }

    fn targets(d: &[u32]) -> DurationTargets {
        DurationTargets {
            utterance_id: "u".into(),
            durations: d.to_vec(),
        }
    }

    #[test]
    fn duration_error_is_mean_absolute_frames() {
        assert_eq!(duration_error(&[1.0, 2.0, 3.0], &targets(&[1, 2, 3])).unwrap(), 0.0);
        let e = duration_error(&[1.5, 4.0, 0.0], &targets(&[1, 2, 3])).unwrap();
        assert!((e - (0.5 + 2.0 + 3.0) / 3.0).abs() < 1e-12);
        assert!(matches!(
            duration_error(&[1.0], &targets(&[1, 2])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn corpus_duration_error_is_the_mean_of_utterances() {
        let per = [
            duration_error(&[1.0, 1.0], &targets(&[2, 2])).unwrap(),
            duration_error(&[3.0], &targets(&[0])).unwrap(),
        ];
        assert_eq!(corpus_duration_error(&per).unwrap(), 2.0);
        assert!(corpus_duration_error(&[]).is_err());
    }

    #[test]
    fn dct_rows_are_orthonormal_and_blind_to_constants() {
        let d = dct_matrix(80, MCD_ORDER);
        let g = d.dot(&d.t());
        for i in 0..MCD_ORDER {
            for j in 0..MCD_ORDER {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-10);
            }
            assert!(d.row(i).sum().abs() < 1e-10);
        }
    }

    #[test]
    fn mcd_of_a_signal_with_itself_is_zero() {
        let w = chirp(0.5);
        assert_eq!(mcd13(&w, &w).unwrap(), 0.0);
    }

    #[test]
    fn mcd_of_a_single_coefficient_offset_has_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Array2::from_shape_fn((30, MCD_ORDER), |_| rng.random_range(-5.0..5.0));
        for (dim, eps) in [(0usize, 0.01), (6, 0.05), (12, 0.002)] {
            let mut b = a.clone();
            b.column_mut(dim).mapv_inplace(|v| v + eps);
            let got = mcd_from_cepstra(a.view(), b.view()).unwrap();
            let want = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt() * eps;
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn mcd_ignores_global_gain() {
        // Broadband, so no mel band sits at the log floor.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = chirp(0.5);
        for s in &mut w.samples {
            *s += rng.random_range(-0.05f32..0.05);
        }
        let quiet = Waveform::new(w.samples.iter().map(|s| s * 0.5).collect(), w.sample_rate);
        let v = mcd13(&w, &quiet).unwrap();
        assert!(v < 0.05, "{v}");
        let other = sine(300.0, 0.5, 0.4);
        assert!(mcd13(&w, &other).unwrap() > 1.0);
    }

    #[test]
    fn mcd_rejects_silence() {
        let silent = Waveform::new(vec![0.0; 4096], SAMPLE_RATE);
        assert!(matches!(mcd13(&silent, &chirp(0.2)), Err(Error::SilentSignal)));
    }

    #[test]
    fn tracker_recovers_sine_pitch() {
        for f in [80.0, 150.0, 200.0, 333.0, 480.0] {
            let track = track_f0(&sine(f, 0.3, 0.5), &PitchConfig::default());
            let voiced: Vec<f64> = track.iter().flatten().copied().collect();
            assert!(voiced.len() * 10 >= track.len() * 9, "{f}: {} of {}", voiced.len(), track.len());
            for v in voiced {
                assert!((v - f).abs() < 1.0, "{f}: {v}");
            }
        }
    }

    #[test]
    fn tracker_calls_noise_and_silence_unvoiced() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Waveform::new((0..11025).map(|_| rng.random_range(-0.5f32..0.5)).collect(), SAMPLE_RATE);
        let track = track_f0(&noise, &PitchConfig::default());
        let voiced = track.iter().filter(|v| v.is_some()).count();
        assert!(voiced * 5 < track.len(), "{voiced} of {}", track.len());
        let silent = Waveform::new(vec![0.0; 4410], SAMPLE_RATE);
        assert!(track_f0(&silent, &PitchConfig::default()).iter().all(Option::is_none));
    }

    #[test]
    fn rmse_f0_zero_on_itself_and_ten_hertz_between_sines() {
        let w = chirp(0.5);
        assert_eq!(rmse_f0(&w, &w).unwrap(), 0.0);
        let r = rmse_f0(&sine(200.0, 0.5, 0.5), &sine(210.0, 0.5, 0.5)).unwrap();
        assert!((r - 10.0).abs() <= 2.0, "{r}");
    }

    #[test]
    fn rmse_f0_needs_co_voiced_frames() {
        let silent = Waveform::new(vec![0.0; 11025], SAMPLE_RATE);
        assert!(matches!(
            rmse_f0(&sine(200.0, 0.5, 0.5), &silent),
            Err(Error::NoCoVoicedFrames)
        ));
    }

    fn grid(weights: Array2<f64>) -> AlignmentGrid {
        AlignmentGrid { weights, sigma2: 10.0 }
    }

    #[test]
    fn single_token_grid_is_one_solid_band() {
        let img = render_alignment(&grid(Array2::ones((12, 1)))).unwrap();
        assert_eq!(img.dimensions(), (12, 1));
        assert!(img.pixels().all(|p| p.0[0] == 255));
    }

    #[test]
    fn staircase_renders_a_rising_ridge() {
        let mut w = Array2::zeros((9, 3));
        for t in 0..9 {
            w[[t, t / 3]] = 0.8;
            w[[t, (t / 3 + 1) % 3]] = 0.2;
        }
        let img = render_alignment(&grid(w)).unwrap();
        let am = image_argmax(&img);
        assert_eq!(am, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        assert!(am.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn png_round_trip_keeps_the_argmax() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = Array2::from_shape_fn((20, 6), |_| rng.random_range(0.0..1.0));
        for mut row in w.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let g = grid(w);
        let path = dir.path().join("nested/align.png");
        plot_alignment(&g, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(image_argmax(&img), g.argmax_per_frame());
    }

    #[test]
    fn aggregate_skips_undefined_values() {
        let row = |d, m, f| UtteranceMetrics {
            utterance_id: "x".into(),
            duration_error: d,
            mcd13: m,
            rmse_f0: f,
        };
        let a = aggregate(&[row(Some(1.0), Some(4.0), None), row(Some(3.0), Some(6.0), Some(2.0))]);
        assert_eq!(a.utterances, 2);
        assert_eq!(a.duration_error, Some(2.0));
        assert_eq!(a.mcd13, Some(5.0));
        assert_eq!(a.rmse_f0, Some(2.0));
        assert_eq!(a.rmse_f0_skipped, 1);
    }

    proptest::proptest! {
        #[test]
        fn pixel_argmax_matches_weight_argmax(
            t in 1usize..24,
            n in 1usize..8,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Distinct weights per frame so the argmax is unambiguous after quantization.
            let mut w = Array2::zeros((t, n));
            for mut row in w.rows_mut() {
                let peak = rng.random_range(0..n);
                for (i, v) in row.iter_mut().enumerate() {
                    *v = if i == peak { 1.0 } else { rng.random_range(0.0..0.99) };
                }
            }
            let g = grid(w);
            let img = render_alignment(&g).unwrap();
            proptest::prop_assert_eq!(image_argmax(&img), g.argmax_per_frame());
        }
    }
}
