//! Corpus ingestion, tokenization, splits and batching.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{load_audio, Waveform};

/// Reserved padding id; never produced by a tokenizer.
pub const PAD_ID: u32 = 0;
pub const PAD_SYMBOL: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub utterance_id: String,
    pub ids: Vec<u32>,
}

impl PhonemeSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_id(mut self, utterance_id: impl Into<String>) -> Self {
        self.utterance_id = utterance_id.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// One token per character of the normalized text.
    #[default]
    Characters,
    /// Input is already phonemized: whitespace-separated symbols.
    Phonemes,
}

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Result<PhonemeSequence>;
}

/// Lowercases, turns whitespace and hyphens into single spaces and drops
/// every other character outside `[a-z0-9']`.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || c == '-' {
            pending_space = true;
        } else if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

const CHARACTER_SYMBOLS: &str = " 'abcdefghijklmnopqrstuvwxyz0123456789";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub mode: TokenizerMode,
    /// `symbols[id]`; index 0 is always [`PAD_SYMBOL`].
    pub symbols: Vec<String>,
}

impl Vocabulary {
    /// Fixed character vocabulary: pad, space, apostrophe, `a-z`, `0-9`.
    pub fn characters() -> Self {
        let symbols = std::iter::once(PAD_SYMBOL.to_string())
            .chain(CHARACTER_SYMBOLS.chars().map(String::from))
            .collect();
        Self {
            mode: TokenizerMode::Characters,
            symbols,
        }
    }

    /// Sorted symbol inventory of pre-phonemized texts.
    pub fn from_phoneme_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|s| *s != PAD_SYMBOL)
            .collect();
        let symbols = std::iter::once(PAD_SYMBOL.to_string())
            .chain(set.into_iter().map(String::from))
            .collect();
        Self {
            mode: TokenizerMode::Phonemes,
            symbols,
        }
    }

    pub fn for_mode<'a>(mode: TokenizerMode, texts: impl IntoIterator<Item = &'a str>) -> Self {
        match mode {
            TokenizerMode::Characters => Self::characters(),
            TokenizerMode::Phonemes => Self::from_phoneme_texts(texts),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id_of(&self, symbol: &str) -> Option<u32> {
        if symbol == PAD_SYMBOL {
            return None;
        }
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .map(|i| i as u32)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Self = serde_json::from_str(&text)?;
        if vocab.symbols.first().map(String::as_str) != Some(PAD_SYMBOL) {
            return Err(Error::Config(format!(
                "{}: vocabulary must start with {PAD_SYMBOL}",
                path.display()
            )));
        }
        Ok(vocab)
    }
}

impl Tokenizer for Vocabulary {
    fn tokenize(&self, text: &str) -> Result<PhonemeSequence> {
        let symbols: Vec<String> = match self.mode {
            TokenizerMode::Characters => normalize_text(text).chars().map(String::from).collect(),
            TokenizerMode::Phonemes => text.split_whitespace().map(String::from).collect(),
        };
        if symbols.is_empty() {
            return Err(Error::EmptyText(text.to_string()));
        }
        let ids = symbols
            .into_iter()
            .map(|s| self.id_of(&s).ok_or(Error::UnknownSymbol { symbol: s }))
            .collect::<Result<Vec<_>>>()?;
        Ok(PhonemeSequence {
            utterance_id: String::new(),
            ids,
        })
    }
}

/// One line of LJSpeech-style metadata: `id|raw_text|normalized_text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataRecord {
    pub utterance_id: String,
    pub raw_text: String,
    pub text: String,
    pub line: usize,
}

pub fn read_metadata(path: impl AsRef<Path>) -> Result<Vec<MetadataRecord>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        if fields.len() != 3 {
            return Err(malformed(format!(
                "expected 3 '|'-separated fields, found {}",
                fields.len()
            )));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(malformed("empty utterance id".into()));
        }
        records.push(MetadataRecord {
            utterance_id: id.to_string(),
            raw_text: fields[1].to_string(),
            text: fields[2].to_string(),
            line: line_no,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub utterance_id: String,
    pub text: String,
    pub phonemes: PhonemeSequence,
    pub audio_path: PathBuf,
}

/// Tokenizes already-parsed records, checking that each `<wav_dir>/<id>.wav` exists.
pub fn build_entries(
    records: &[MetadataRecord],
    metadata_path: &Path,
    wav_dir: &Path,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<CorpusEntry>> {
    records
        .iter()
        .map(|r| {
            let audio_path = wav_dir.join(format!("{}.wav", r.utterance_id));
            if !audio_path.is_file() {
                return Err(Error::MissingAudio {
                    utterance_id: r.utterance_id.clone(),
                    path: audio_path,
                });
            }
            let phonemes = tokenizer
                .tokenize(&r.text)
                .map_err(|e| Error::Malformed {
                    path: metadata_path.to_path_buf(),
                    line: r.line,
                    reason: e.to_string(),
                })?
                .with_id(&r.utterance_id);
            Ok(CorpusEntry {
                utterance_id: r.utterance_id.clone(),
                text: r.text.clone(),
                phonemes,
                audio_path,
            })
        })
        .collect()
}

/// Entries in file order.
pub fn load_corpus(
    metadata_path: impl AsRef<Path>,
    wav_dir: impl AsRef<Path>,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<CorpusEntry>> {
    let metadata_path = metadata_path.as_ref();
    let records = read_metadata(metadata_path)?;
    build_entries(&records, metadata_path, wav_dir.as_ref(), tokenizer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then test, val and train are cut in that order.
pub fn make_splits<T: Clone>(
    items: &[T],
    val_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<Splits<T>> {
    if val_size + test_size >= items.len() {
        return Err(Error::SplitTooSmall {
            available: items.len(),
            val: val_size,
            test: test_size,
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        test: pick(&order[..test_size]),
        val: pick(&order[test_size..test_size + val_size]),
        train: pick(&order[test_size + val_size..]),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurationTargets {
    pub utterance_id: String,
    pub durations: Vec<u32>,
}

/// Reads `id<TAB>d1 d2 ... dN` lines.
pub fn load_duration_targets(path: impl AsRef<Path>) -> Result<BTreeMap<String, DurationTargets>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| malformed("expected `id<TAB>durations`".into()))?;
        let durations = rest
            .split_whitespace()
            .map(|tok| {
                let v: i64 = tok
                    .parse()
                    .map_err(|_| malformed(format!("not an integer duration: {tok:?}")))?;
                if v < 0 {
                    return Err(malformed(format!("negative duration {v}")));
                }
                u32::try_from(v).map_err(|_| malformed(format!("duration {v} too large")))
            })
            .collect::<Result<Vec<_>>>()?;
        if durations.is_empty() {
            return Err(malformed("no durations".into()));
        }
        let id = id.trim().to_string();
        out.insert(
            id.clone(),
            DurationTargets {
                utterance_id: id,
                durations,
            },
        );
    }
    Ok(out)
}

/// Checks every target against its corpus entry's token count.
pub fn check_duration_targets(
    targets: &BTreeMap<String, DurationTargets>,
    entries: &[CorpusEntry],
) -> Vec<Error> {
    entries
        .iter()
        .filter_map(|e| {
            let t = targets.get(&e.utterance_id)?;
            (t.durations.len() != e.phonemes.len()).then(|| Error::LengthMismatch {
                utterance_id: e.utterance_id.clone(),
                expected: e.phonemes.len(),
                actual: t.durations.len(),
            })
        })
        .collect()
}

/// A corpus entry together with its decoded audio.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub entry: CorpusEntry,
    pub audio: Waveform,
}

pub fn load_utterances(entries: &[CorpusEntry]) -> Result<Vec<Utterance>> {
    entries
        .iter()
        .map(|e| {
            Ok(Utterance {
                entry: e.clone(),
                audio: load_audio(&e.audio_path)?,
            })
        })
        .collect()
}

/// Padded token batch, `tokens` is row-major `[batch, max_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub utterance_ids: Vec<String>,
    pub tokens: Vec<u32>,
    pub lengths: Vec<usize>,
    pub max_len: usize,
}

impl Batch {
    pub fn from_sequences(seqs: &[&PhonemeSequence]) -> Self {
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut tokens = vec![PAD_ID; seqs.len() * max_len];
        for (b, s) in seqs.iter().enumerate() {
            tokens[b * max_len..b * max_len + s.len()].copy_from_slice(&s.ids);
        }
        Self {
            utterance_ids: seqs.iter().map(|s| s.utterance_id.clone()).collect(),
            tokens,
            lengths: seqs.iter().map(|s| s.len()).collect(),
            max_len,
        }
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// Row-major `[batch, max_len]` mask, 1 for real tokens.
    pub fn mask(&self) -> Vec<f32> {
        let mut m = vec![0.0; self.size() * self.max_len];
        for (b, &len) in self.lengths.iter().enumerate() {
            m[b * self.max_len..b * self.max_len + len].fill(1.0);
        }
        m
    }
}

/// One epoch of batch index lists under a seeded shuffle; the last batch may be short.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}
