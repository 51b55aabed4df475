//! Python module `reinforce_tts`: training, synthesis and the evaluation
//! metrics over WAV files and plain lists.

use std::path::PathBuf;

use candle_core::Device;
use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use reinforce_tts::config::TrainConfig;
use reinforce_tts::data::DurationTargets;
use reinforce_tts::demo::{smoke_config, write_tone_corpus, SMOKE_TEXTS};
use reinforce_tts::evaluation;
use reinforce_tts::signal::{load_audio, save_wav};
use reinforce_tts::trainer;
use reinforce_tts::Error;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } | Error::MissingAudio { .. } => PyFileNotFoundError::new_err(msg),
        Error::Diverged { .. } | Error::NonFiniteLoss(_) | Error::Candle(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

/// Trains from a TOML or JSON config and returns the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (config, workdir = ".".into(), resume = None, seed = None))]
fn train(config: PathBuf, workdir: PathBuf, resume: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    let wd = std::path::absolute(&workdir)?;
    let path = if config.is_absolute() { config } else { wd.join(config) };
    let mut cfg = TrainConfig::load(&path).map_err(to_py)?.rooted(&wd);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let resume = resume.map(|r| wd.join(r));
    let out = trainer::fit(&cfg, resume.as_deref(), &Device::Cpu).map_err(to_py)?;
    Ok(out.checkpoint.display().to_string())
}

/// Writes the synthetic tone corpus and a small-preset config under `out`;
/// returns the config path.
#[pyfunction]
#[pyo3(signature = (out, steps = 600, seed = 1234))]
fn make_demo(out: PathBuf, steps: u64, seed: u64) -> PyResult<String> {
    let out = std::path::absolute(&out)?;
    let corpus = write_tone_corpus(&out.join("corpus"), &SMOKE_TEXTS, 3).map_err(to_py)?;
    let cfg = smoke_config(&corpus, &out.join("run"), steps, seed);
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml().map_err(to_py)?)?;
    Ok(path.display().to_string())
}

/// Inference from a checkpoint directory, checkpoint root or run directory.
#[pyclass(unsendable)]
struct Synthesizer {
    inner: trainer::Synthesizer,
}

#[pymethods]
impl Synthesizer {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        let inner = trainer::Synthesizer::from_checkpoint(&checkpoint, &Device::Cpu).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        reinforce_tts::signal::SAMPLE_RATE
    }

    /// Returns `(samples, frames_per_token)`.
    fn synthesize(&self, text: &str) -> PyResult<(Vec<f32>, Vec<u32>)> {
        let s = self.inner.synthesize(text).map_err(to_py)?;
        Ok((s.waveform.samples, s.frames))
    }

    fn synthesize_to_wav(&self, text: &str, path: PathBuf) -> PyResult<usize> {
        let s = self.inner.synthesize(text).map_err(to_py)?;
        save_wav(&path, &s.waveform).map_err(to_py)?;
        Ok(s.waveform.len())
    }

    fn plot_alignment(&self, text: &str, path: PathBuf) -> PyResult<f64> {
        let s = self.inner.synthesize(text).map_err(to_py)?;
        evaluation::plot_alignment(&s.alignment, &path).map_err(to_py)?;
        Ok(s.alignment.monotonic_fraction())
    }
}

/// MCD over 13 mel-cepstral coefficients between two WAV files, in dB.
#[pyfunction]
fn mcd13(reference: PathBuf, synthesized: PathBuf) -> PyResult<f64> {
    let a = load_audio(&reference).map_err(to_py)?;
    let b = load_audio(&synthesized).map_err(to_py)?;
    evaluation::mcd13(&a, &b).map_err(to_py)
}

/// f0 RMSE in Hz between two WAV files over co-voiced frames.
#[pyfunction]
fn rmse_f0(reference: PathBuf, synthesized: PathBuf) -> PyResult<f64> {
    let a = load_audio(&reference).map_err(to_py)?;
    let b = load_audio(&synthesized).map_err(to_py)?;
    evaluation::rmse_f0(&a, &b).map_err(to_py)
}

#[pyfunction]
fn duration_error(pred: Vec<f64>, target: Vec<u32>) -> PyResult<f64> {
    let t = DurationTargets {
        utterance_id: String::new(),
        durations: target,
    };
    evaluation::duration_error(&pred, &t).map_err(to_py)
}

#[pymodule(name = "reinforce_tts")]
fn reinforce_tts_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(make_demo, m)?)?;
    m.add_function(wrap_pyfunction!(mcd13, m)?)?;
    m.add_function(wrap_pyfunction!(rmse_f0, m)?)?;
    m.add_function(wrap_pyfunction!(duration_error, m)?)?;
    m.add_class::<Synthesizer>()?;
    m.add("SAMPLE_RATE", reinforce_tts::signal::SAMPLE_RATE)?;
    Ok(())
}
