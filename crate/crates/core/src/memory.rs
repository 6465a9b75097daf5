//! Fixed-capacity context memory with similarity-based temporal merging.
//!
//! Entries are appended in frame order. When an append brings the length to
//! `L + 1`, the cosine similarity of every adjacent pair is computed over the
//! flattened `C × D_e` entries, the most similar pair (lowest index on ties)
//! is replaced by its elementwise mean, and the length returns to `L`. Exactly
//! one merge happens per overflowing insert.

use serde::{Deserialize, Serialize};

use crate::compressor::ContextEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};
use crate::tokenizer::QuestionHash;

/// Below this flattened norm an entry is treated as having no direction.
pub const ZERO_NORM: f64 = 1e-12;

/// Cosine of two entries flattened to vectors; 0 if either is (near) zero.
pub fn entry_similarity(a: &ContextEmbedding, b: &ContextEmbedding) -> Result<f64> {
    cosine(&a.tokens, &b.tokens)
}

pub(crate) fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "entry_similarity",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Ok(0.0);
    }
    Ok(dot(a.data(), b.data()) / (na * nb))
}

/// One temporal merge: entries `index` and `index + 1` (0-based) were averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    /// 1-based count of inserts when the merge happened.
    pub step: usize,
    pub index: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextMemory {
    capacity: usize,
    entries: Vec<ContextEmbedding>,
    merge_log: Vec<MergeRecord>,
    inserts: usize,
}

impl ContextMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity + 1),
            merge_log: Vec::new(),
            inserts: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[ContextEmbedding] {
        &self.entries
    }

    pub fn merge_log(&self) -> &[MergeRecord] {
        &self.merge_log
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn inserts(&self) -> usize {
        self.inserts
    }

    pub fn question_hash(&self) -> Option<QuestionHash> {
        self.entries.first().map(|e| e.question_hash)
    }

    /// Rows per entry (`C`), if any entry exists.
    pub fn context_tokens(&self) -> Option<usize> {
        self.entries.first().map(|e| e.tokens.shape()[0])
    }

    /// Decoder-visible tokens: `len · C`.
    pub fn token_count(&self) -> usize {
        self.entries.iter().map(|e| e.tokens.shape()[0]).sum()
    }

    /// Immutable copy; a valid decoder input at any point of a stream.
    pub fn snapshot(&self) -> ContextMemory {
        self.clone()
    }

    pub fn insert(&mut self, entry: ContextEmbedding) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.question_hash != entry.question_hash {
                return Err(Error::Consistency(format!(
                    "entry for question {} inserted into memory for question {}",
                    entry.question_hash, first.question_hash
                )));
            }
            if first.tokens.shape() != entry.tokens.shape() {
                return Err(Error::Dimension {
                    op: "memory insert",
                    left: first.tokens.shape().to_vec(),
                    right: entry.tokens.shape().to_vec(),
                });
            }
        }
        self.entries.push(entry);
        self.inserts += 1;
        if self.entries.len() > self.capacity {
            self.merge_most_similar()?;
        }
        Ok(())
    }

    fn merge_most_similar(&mut self) -> Result<()> {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..self.entries.len() - 1 {
            let s = entry_similarity(&self.entries[i], &self.entries[i + 1])?;
            if s > best.1 {
                best = (i, s);
            }
        }
        let (k, s) = best;
        let later = self.entries.remove(k + 1);
        let merged = &mut self.entries[k];
        for (a, b) in merged.tokens.data_mut().iter_mut().zip(later.tokens.data()) {
            *a = (*a + b) / 2.0;
        }
        self.merge_log.push(MergeRecord {
            step: self.inserts,
            index: k,
            similarity: s,
        });
        Ok(())
    }

    /// Entries stacked in temporal order, `(len · C) × D_e`.
    pub fn as_decoder_input(&self) -> Result<Tensor> {
        if self.entries.is_empty() {
            return Err(Error::Contract("memory is empty".into()));
        }
        let parts: Vec<&Tensor> = self.entries.iter().map(|e| &e.tokens).collect();
        Tensor::concat_rows(&parts)
    }

    /// Rebuilds a memory from its parts (used when loading dumps).
    pub fn from_parts(
        capacity: usize,
        entries: Vec<ContextEmbedding>,
        merge_log: Vec<MergeRecord>,
        inserts: usize,
    ) -> Result<Self> {
        let mut m = Self::new(capacity)?;
        if entries.len() > capacity {
            return Err(Error::Consistency(format!(
                "{} entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        m.entries = entries;
        m.merge_log = merge_log;
        m.inserts = inserts;
        Ok(m)
    }
}
