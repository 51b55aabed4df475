//! Checkpoint directories: `model.safetensors` (parameters and optimizer
//! moments), `manifest.json` and `vocab.json`. Directories are written under
//! a temporary name and renamed into place.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelSpec, TrainConfig};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::trainer::StepReport;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LATEST_FILE: &str = "LATEST";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    /// Batches of the current epoch already consumed.
    pub epoch_position: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub model: ModelSpec,
    pub vocabulary: String,
    pub metrics: Option<StepReport>,
    pub rng: ChaCha8Rng,
}

pub struct LoadedCheckpoint {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub vocabulary: Vocabulary,
    pub tensors: HashMap<String, Tensor>,
}

pub fn step_dir_name(step: u64) -> String {
    format!("step_{step:08}")
}

/// Writes `<root>/step_XXXXXXXX` and points `<root>/LATEST` at it.
pub fn write_checkpoint(
    root: &Path,
    manifest: &Manifest,
    tensors: &HashMap<String, Tensor>,
    vocabulary: &Vocabulary,
) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let name = step_dir_name(manifest.step);
    let tmp = root.join(format!(".tmp-{name}"));
    let target = root.join(&name);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    candle_core::safetensors::save(tensors, tmp.join(WEIGHTS_FILE))?;
    vocabulary.save(tmp.join(VOCAB_FILE))?;
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(tmp.join(MANIFEST_FILE), json).map_err(|e| Error::io(tmp.join(MANIFEST_FILE), e))?;
    if target.exists() {
        fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
    }
    fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    let latest_tmp = root.join(format!(".{LATEST_FILE}.tmp"));
    fs::write(&latest_tmp, &name).map_err(|e| Error::io(&latest_tmp, e))?;
    fs::rename(&latest_tmp, root.join(LATEST_FILE)).map_err(|e| Error::io(root.join(LATEST_FILE), e))?;
    Ok(target)
}

/// Accepts a checkpoint directory, a checkpoint root with a `LATEST`
/// pointer, or a run directory containing `checkpoints/`.
pub fn resolve_dir(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    for root in [path.to_path_buf(), path.join("checkpoints")] {
        let latest = root.join(LATEST_FILE);
        if latest.is_file() {
            let name = fs::read_to_string(&latest).map_err(|e| Error::io(&latest, e))?;
            let dir = root.join(name.trim());
            if dir.join(MANIFEST_FILE).is_file() {
                return Ok(dir);
            }
        }
    }
    Err(Error::Checkpoint(format!(
        "no checkpoint found at {} (expected {MANIFEST_FILE} or a {LATEST_FILE} pointer)",
        path.display()
    )))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn read_checkpoint(path: &Path, device: &Device) -> Result<LoadedCheckpoint> {
    let dir = resolve_dir(path)?;
    let manifest = read_manifest(&dir)?;
    let vocabulary = Vocabulary::load(dir.join(&manifest.vocabulary))?;
    let tensors = candle_core::safetensors::load(dir.join(WEIGHTS_FILE), device)?;
    Ok(LoadedCheckpoint {
        dir,
        manifest,
        vocabulary,
        tensors,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn new_manifest(
    step: u64,
    epoch: u64,
    epoch_position: usize,
    learning_rate: f64,
    config: &TrainConfig,
    model: &ModelSpec,
    metrics: Option<StepReport>,
    rng: &ChaCha8Rng,
) -> Result<Manifest> {
    Ok(Manifest {
        format_version: FORMAT_VERSION,
        step,
        epoch,
        epoch_position,
        learning_rate,
        alpha: config.train.alpha,
        config_hash: config.hash()?,
        config: config.clone(),
        model: model.clone(),
        vocabulary: VOCAB_FILE.to_string(),
        metrics,
        rng: rng.clone(),
    })
}
