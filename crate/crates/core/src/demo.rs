//! Synthetic tone corpus with known durations, for smoke tests and demos.
//!
//! Every character is rendered as a sine at a pitch fixed per symbol (spaces
//! are silence) lasting a whole number of 256-sample frames, so the exact
//! per-token frame counts are written alongside as a duration file.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, ModelConfig, OutputConfig, Preset, TrainConfig, TrainSettings};
use crate::data::{normalize_text, TokenizerMode};
use crate::error::{Error, Result};
use crate::signal::{save_wav, Waveform, SAMPLE_RATE};
use crate::vocoder::UPSAMPLE_FACTOR;

/// Four short sentences over a five-letter alphabet. With one validation and
/// one test utterance the training split is two utterances.
pub const SMOKE_TEXTS: [&str; 4] = ["abc dab", "cab bad", "dcba", "bead"];

pub struct ToneCorpus {
    pub metadata: PathBuf,
    pub wav_dir: PathBuf,
    pub durations: PathBuf,
}

fn pitch(c: char) -> Option<f64> {
    let idx = match c {
        'a'..='z' => c as u32 - 'a' as u32,
        '0'..='9' => 26 + c as u32 - '0' as u32,
        '\'' => 36,
        _ => return None,
    };
    // A semitone ladder from 110 Hz.
    Some(110.0 * 2f64.powf(idx as f64 / 12.0))
}

/// Renders `text` with per-character frame counts drawn from
/// `min_frames..=max_frames`. Returns the waveform and the frame counts.
pub fn render_tones<R: Rng>(text: &str, min_frames: u32, max_frames: u32, rng: &mut R) -> (Waveform, Vec<u32>) {
    let mut samples = Vec::new();
    let mut frames = Vec::new();
    let mut phase = 0.0f64;
    for c in normalize_text(text).chars() {
        let n = rng.random_range(min_frames..=max_frames);
        frames.push(n);
        let len = n as usize * UPSAMPLE_FACTOR;
        match pitch(c) {
            Some(f) => {
                let step = 2.0 * PI * f / SAMPLE_RATE as f64;
                for _ in 0..len {
                    samples.push((0.5 * phase.sin()) as f32);
                    phase += step;
                }
            }
            None => samples.extend(std::iter::repeat_n(0.0, len)),
        }
    }
    (Waveform::new(samples, SAMPLE_RATE), frames)
}

/// Writes `metadata.csv`, `wavs/<id>.wav` and `durations.tsv` under `dir`.
pub fn write_tone_corpus(dir: &Path, texts: &[&str], seed: u64) -> Result<ToneCorpus> {
    let wav_dir = dir.join("wavs");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut meta = String::new();
    let mut durs = String::new();
    for (i, text) in texts.iter().enumerate() {
        let id = format!("tone_{i:04}");
        let (wav, frames) = render_tones(text, 3, 7, &mut rng);
        save_wav(wav_dir.join(format!("{id}.wav")), &wav)?;
        meta.push_str(&format!("{id}|{text}|{text}\n"));
        let list: Vec<String> = frames.iter().map(u32::to_string).collect();
        durs.push_str(&format!("{id}\t{}\n", list.join(" ")));
    }
    let metadata = dir.join("metadata.csv");
    fs::write(&metadata, meta).map_err(|e| Error::io(&metadata, e))?;
    let durations = dir.join("durations.tsv");
    fs::write(&durations, durs).map_err(|e| Error::io(&durations, e))?;
    Ok(ToneCorpus {
        metadata,
        wav_dir,
        durations,
    })
}

/// A small-preset run over `corpus` that overfits its two training
/// utterances in a few hundred steps on one CPU core.
pub fn smoke_config(corpus: &ToneCorpus, run_dir: &Path, max_steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        data: DataConfig {
            metadata: corpus.metadata.clone(),
            wav_dir: corpus.wav_dir.clone(),
            tokenizer: TokenizerMode::Characters,
            val_size: 1,
            test_size: 1,
        },
        model: ModelConfig {
            preset: Preset::Tiny,
            ..ModelConfig::default()
        },
        train: TrainSettings {
            batch_size: 2,
            max_steps,
            learning_rate: 2e-3,
            gamma: 16,
            checkpoint_every: max_steps.max(1),
            validate_every: max_steps.max(1),
            ..TrainSettings::default()
        },
        output: OutputConfig {
            dir: run_dir.to_path_buf(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_corpus, load_duration_targets, Vocabulary};
    use crate::signal::load_audio;

    #[test]
    fn corpus_round_trips_through_the_loaders() {
        let dir = tempfile::tempdir().unwrap();
        let c = write_tone_corpus(dir.path(), &["abc", "ba ca"], 1).unwrap();
        let entries = load_corpus(&c.metadata, &c.wav_dir, &Vocabulary::characters()).unwrap();
        let targets = load_duration_targets(&c.durations).unwrap();
        for e in &entries {
            let t = &targets[&e.utterance_id];
            assert_eq!(t.durations.len(), e.phonemes.len());
            let audio = load_audio(&e.audio_path).unwrap();
            let total: u32 = t.durations.iter().sum();
            assert_eq!(audio.len(), total as usize * UPSAMPLE_FACTOR);
        }
    }
}
