//! Synthetic key/value frame streams.
//!
//! Frame symbols are laid out as `[keys | values | fillers]`. Cell 0 of a frame
//! shows a key, cell 1 its value, and every other cell a random filler. The
//! question "what is kI ?" asks for the value shown next to key I.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::SymbolicFrame;
use crate::tokenizer::{TokenSequence, Vocabulary, EOS, PAD};

pub const NONE: &str = "none";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    SingleFrame,
    KvRetrieval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Frames are `grid × grid` cells.
    pub grid: usize,
    pub n_keys: usize,
    pub n_values: usize,
    pub n_fillers: usize,
    /// Frames per kv_retrieval stream.
    pub frames: usize,
    /// Encoder feature width.
    pub d_feature: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            n_keys: 16,
            n_values: 16,
            n_fillers: 32,
            frames: 8,
            d_feature: 32,
        }
    }
}

impl TaskConfig {
    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn alphabet_size(&self) -> usize {
        self.n_keys + self.n_values + self.n_fillers
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid * self.grid < 2 {
            return Err(Error::Config("a frame needs at least two cells".into()));
        }
        if self.n_keys == 0 || self.n_values == 0 {
            return Err(Error::Config("need at least one key and one value".into()));
        }
        if self.n_fillers == 0 && self.patches() > 2 {
            return Err(Error::Config("frames with more than two cells need filler symbols".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("streams need at least one frame".into()));
        }
        if self.frames > self.n_keys {
            return Err(Error::Config(format!(
                "{} frames need distinct keys but only {} exist",
                self.frames, self.n_keys
            )));
        }
        if self.d_feature == 0 {
            return Err(Error::Config("d_feature must be positive".into()));
        }
        Ok(())
    }

    /// `<pad> <eos> none what is ? k0.. v0..`
    pub fn vocabulary(&self) -> Vocabulary {
        let mut words: Vec<String> = [PAD, EOS, NONE, "what", "is", "?"].map(String::from).to_vec();
        words.extend((0..self.n_keys).map(|i| format!("k{i}")));
        words.extend((0..self.n_values).map(|i| format!("v{i}")));
        Vocabulary::new(words).expect("generated vocabulary is well formed")
    }

    pub fn key_symbol(&self, key: usize) -> usize {
        key
    }

    pub fn value_symbol(&self, value: usize) -> usize {
        self.n_keys + value
    }

    fn filler_symbol(&self, rng: &mut impl Rng) -> usize {
        self.n_keys + self.n_values + rng.random_range(0..self.n_fillers)
    }

    pub fn question(&self, vocab: &Vocabulary, key: usize) -> Result<TokenSequence> {
        vocab.encode(&format!("what is k{key} ?"))
    }

    fn value_token(&self, vocab: &Vocabulary, value: usize) -> usize {
        vocab.id(&format!("v{value}")).expect("value word in vocabulary")
    }

    fn frame(&self, key: usize, value: usize, index: usize, rng: &mut impl Rng) -> SymbolicFrame {
        let mut cells = vec![self.key_symbol(key), self.value_symbol(value)];
        cells.extend((2..self.patches()).map(|_| self.filler_symbol(rng)));
        SymbolicFrame::new(self.grid, cells, index).expect("cell count matches grid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub seed: u64,
    pub index: u64,
    pub task: TaskTag,
    pub frames: Vec<SymbolicFrame>,
    pub question: TokenSequence,
    /// Without the trailing `<eos>`.
    pub gold_answer: TokenSequence,
}

/// Independent stream per `(seed, index)`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `T` frames with distinct keys; the question names one of them.
pub fn gen_kv_stream(cfg: &TaskConfig, frames: usize, seed: u64, index: u64) -> Result<QASample> {
    cfg.validate()?;
    if frames == 0 || frames > cfg.n_keys {
        return Err(Error::Config(format!(
            "{frames} frames need distinct keys but only {} exist",
            cfg.n_keys
        )));
    }
    let vocab = cfg.vocabulary();
    let mut rng = sample_rng(seed, index);
    let mut keys: Vec<usize> = (0..cfg.n_keys).collect();
    keys.shuffle(&mut rng);
    keys.truncate(frames);
    let values: Vec<usize> = (0..frames).map(|_| rng.random_range(0..cfg.n_values)).collect();
    let stream: Vec<SymbolicFrame> = (0..frames)
        .map(|t| cfg.frame(keys[t], values[t], t, &mut rng))
        .collect();
    let target = rng.random_range(0..frames);
    Ok(QASample {
        seed,
        index,
        task: TaskTag::KvRetrieval,
        frames: stream,
        question: cfg.question(&vocab, keys[target])?,
        gold_answer: TokenSequence::new(vec![cfg.value_token(&vocab, values[target])]),
    })
}

/// One frame; half the time the question asks about a different key and the
/// answer is `none`.
pub fn gen_single_frame(cfg: &TaskConfig, seed: u64, index: u64) -> Result<QASample> {
    cfg.validate()?;
    let vocab = cfg.vocabulary();
    let mut rng = sample_rng(seed, index);
    let key = rng.random_range(0..cfg.n_keys);
    let value = rng.random_range(0..cfg.n_values);
    let frame = cfg.frame(key, value, 0, &mut rng);
    let (asked, gold) = if cfg.n_keys > 1 && rng.random_bool(0.5) {
        let other = (key + rng.random_range(1..cfg.n_keys)) % cfg.n_keys;
        (other, vocab.id(NONE).expect("none in vocabulary"))
    } else {
        (key, cfg.value_token(&vocab, value))
    };
    Ok(QASample {
        seed,
        index,
        task: TaskTag::SingleFrame,
        frames: vec![frame],
        question: cfg.question(&vocab, asked)?,
        gold_answer: TokenSequence::new(vec![gold]),
    })
}

pub fn gen_split(cfg: &TaskConfig, task: TaskTag, n: usize, seed: u64) -> Result<Vec<QASample>> {
    (0..n as u64)
        .map(|i| match task {
            TaskTag::SingleFrame => gen_single_frame(cfg, seed, i),
            TaskTag::KvRetrieval => gen_kv_stream(cfg, cfg.frames, seed, i),
        })
        .collect()
}

/// Mixed data for base pretraining: single frames (with `none` answers) and
/// short key/value streams of 2 to `max_frames` frames.
pub fn gen_pretraining_split(cfg: &TaskConfig, n: usize, max_frames: usize, seed: u64) -> Result<Vec<QASample>> {
    let kinds = max_frames.clamp(1, cfg.n_keys);
    (0..n as u64)
        .map(|i| match i % kinds as u64 {
            0 => gen_single_frame(cfg, seed, i),
            k => gen_kv_stream(cfg, k as usize + 1, seed, i),
        })
        .collect()
}

pub fn write_jsonl(path: &Path, samples: &[QASample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::format("dataset record", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QASample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: QASample = serde_json::from_str(&line)
            .map_err(|e| Error::format("dataset record", format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    Ok(out)
}
