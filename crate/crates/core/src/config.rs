//! Experiment configuration: every hyperparameter of a run lives in one TOML
//! (or JSON) file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aligner::{PredictorConfig, RewardMode, DEFAULT_GAMMA, DEFAULT_SIGMA2};
use crate::data::TokenizerMode;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::SoftDtwConfig;
use crate::signal::SpectralConfig;
use crate::vocoder::{DecoderConfig, DiscriminatorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    pub output: OutputConfig,
}

fn default_seed() -> u64 {
    1234
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// LJSpeech-style `id|raw|normalized` file.
    pub metadata: PathBuf,
    pub wav_dir: PathBuf,
    #[serde(default)]
    pub tokenizer: TokenizerMode,
    #[serde(default = "default_split")]
    pub val_size: usize,
    #[serde(default = "default_split")]
    pub test_size: usize,
}

fn default_split() -> usize {
    300
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    V1,
    #[default]
    V2,
    Tiny,
}

/// A preset plus optional per-part overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    pub encoder_blocks: Option<usize>,
    pub encoder_kernel_sizes: Option<Vec<usize>>,
    pub encoder_dilations: Option<Vec<Vec<usize>>>,
    pub predictor: Option<PredictorConfig>,
    pub decoder: Option<DecoderConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub spectral: Option<SpectralConfig>,
}

/// Fully resolved architecture, stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
    pub spectral: SpectralConfig,
}

impl ModelConfig {
    pub fn resolve(&self, vocab_size: usize) -> Result<ModelSpec> {
        let mut encoder = EncoderConfig::new(vocab_size);
        let (decoder, discriminator, predictor) = match self.preset {
            Preset::V1 => (DecoderConfig::v1(), DiscriminatorConfig::hifigan(), PredictorConfig::default()),
            Preset::V2 => (DecoderConfig::v2(), DiscriminatorConfig::hifigan(), PredictorConfig::default()),
            Preset::Tiny => {
                encoder.num_blocks = 1;
                encoder.kernel_sizes = vec![3, 5];
                encoder.dilations = vec![vec![1, 3], vec![1, 3]];
                let predictor = PredictorConfig {
                    filter_size: 64,
                    ..PredictorConfig::default()
                };
                (DecoderConfig::tiny(), DiscriminatorConfig::tiny(), predictor)
            }
        };
        if let Some(n) = self.encoder_blocks {
            encoder.num_blocks = n;
        }
        if let Some(k) = &self.encoder_kernel_sizes {
            encoder.kernel_sizes = k.clone();
        }
        if let Some(d) = &self.encoder_dilations {
            encoder.dilations = d.clone();
        }
        let spec = ModelSpec {
            encoder,
            predictor: self.predictor.clone().unwrap_or(predictor),
            decoder: self.decoder.clone().unwrap_or(decoder),
            discriminator: self.discriminator.clone().unwrap_or(discriminator),
            spectral: self.spectral.clone().unwrap_or_default(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.discriminator.validate()?;
        self.spectral.validate()?;
        let up: usize = self.decoder.upsample_rates.iter().product();
        if self.spectral.hop != up {
            return Err(Error::Config(format!(
                "spectral.hop {} must equal the decoder upsampling factor {up}",
                self.spectral.hop
            )));
        }
        Ok(())
    }
}

/// Whether rewards compare the sampled segment or the whole utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardScope {
    #[default]
    Segment,
    Utterance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionLoss {
    #[default]
    MelL1,
    SoftDtw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub max_steps: u64,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub alpha: f64,
    pub reward_mode: RewardMode,
    pub reward_scope: RewardScope,
    pub sigma2: f64,
    pub gamma: usize,
    pub lambda_adv: f64,
    pub lambda_mel: f64,
    pub lambda_dur_total: f64,
    pub lambda_re: f64,
    pub feature_matching: bool,
    pub lambda_fm: f64,
    pub reconstruction: ReconstructionLoss,
    pub soft_dtw: SoftDtwConfig,
    /// Runs the SHIFT synthesis; when off every token is rewarded KEEP.
    pub shift_pass: bool,
    pub checkpoint_every: u64,
    pub validate_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_steps: 5000,
            learning_rate: 2e-4,
            betas: (0.8, 0.99),
            weight_decay: 0.01,
            lr_decay: 0.999,
            alpha: 2.0,
            reward_mode: RewardMode::PhonemeWise,
            reward_scope: RewardScope::Segment,
            sigma2: DEFAULT_SIGMA2,
            gamma: DEFAULT_GAMMA,
            lambda_adv: 1.0,
            lambda_mel: 45.0,
            lambda_dur_total: 0.1,
            lambda_re: 1.0,
            feature_matching: false,
            lambda_fm: 2.0,
            reconstruction: ReconstructionLoss::MelL1,
            soft_dtw: SoftDtwConfig::default(),
            shift_pass: true,
            checkpoint_every: 1000,
            validate_every: 500,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("sigma2", self.sigma2),
            ("lr_decay", self.lr_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("alpha", self.alpha),
            ("weight_decay", self.weight_decay),
            ("lambda_adv", self.lambda_adv),
            ("lambda_mel", self.lambda_mel),
            ("lambda_dur_total", self.lambda_dur_total),
            ("lambda_re", self.lambda_re),
            ("lambda_fm", self.lambda_fm),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be >= 0, got {v}")));
            }
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("train.betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("train.batch_size and train.max_steps must be >= 1".into()));
        }
        // The mel extractor reflect-pads by (n_fft - hop) / 2 = 384 samples.
        if self.gamma < 2 {
            return Err(Error::Config(format!("train.gamma must be >= 2, got {}", self.gamma)));
        }
        if self.checkpoint_every == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "train.checkpoint_every and train.validate_every must be >= 1".into(),
            ));
        }
        self.soft_dtw.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory holding checkpoints and logs.
    pub dir: PathBuf,
}

impl TrainConfig {
    /// Parses TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            Self::from_toml(&text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    /// Rewrites relative data and output paths against `root`.
    pub fn rooted(&self, root: &Path) -> Self {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        let mut cfg = self.clone();
        cfg.data.metadata = join(&self.data.metadata);
        cfg.data.wav_dir = join(&self.data.wav_dir);
        cfg.output.dir = join(&self.output.dir);
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
metadata = "meta.csv"
wav_dir = "wavs"

[output]
dir = "run"
"#;

    #[test]
    fn defaults_follow_the_recipe() {
        let cfg = TrainConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.train.learning_rate, 2e-4);
        assert_eq!(cfg.train.betas, (0.8, 0.99));
        assert_eq!(cfg.train.weight_decay, 0.01);
        assert_eq!(cfg.train.lr_decay, 0.999);
        assert_eq!(cfg.train.sigma2, 10.0);
        assert_eq!(cfg.train.gamma, 128);
        assert_eq!(
            (cfg.train.lambda_adv, cfg.train.lambda_mel, cfg.train.lambda_dur_total, cfg.train.lambda_re),
            (1.0, 45.0, 0.1, 1.0)
        );
        assert!(!cfg.train.feature_matching);
        let spec = cfg.model.resolve(40).unwrap();
        assert_eq!(spec.encoder.hidden_dim, 256);
        assert_eq!(spec.decoder.upsample_rates, vec![8, 8, 2, 2]);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = format!("{MINIMAL}\n[train]\nlearning_rat = 0.1\n");
        let err = TrainConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let text = format!("{MINIMAL}\n[train]\nalpha = -1.0\n");
        assert!(TrainConfig::from_toml(&text).is_err());
        let text = format!("{MINIMAL}\n[train]\ngamma = 1\n");
        assert!(TrainConfig::from_toml(&text).is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = TrainConfig::from_toml(MINIMAL).unwrap();
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(cfg.hash().unwrap(), other.hash().unwrap());
    }

    #[test]
    fn hop_must_match_upsampling() {
        let mut m = ModelConfig {
            preset: Preset::Tiny,
            ..Default::default()
        };
        m.spectral = Some(SpectralConfig {
            hop: 128,
            ..SpectralConfig::default()
        });
        assert!(m.resolve(10).is_err());
    }
}
