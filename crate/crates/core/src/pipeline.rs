//! Streaming inference: encode, project, compress, remember, answer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::baselines::{avgpool_compress, truncate_compress};
use crate::compressor::{compress, ContextEmbedding, ContextTokenLookup};
use crate::error::{Error, Result};
use crate::frame::{FrameEmbedding, FrameEncoder, Projector, SymbolicFrame};
use crate::memory::ContextMemory;
use crate::params::ParamSet;
use crate::qa::{answer, build_decoder_input_ordered, Answer, PromptOrder, DEFAULT_MAX_NEW};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, Vocabulary};
use crate::transformer::TransformerModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Iqvic,
    Avgpool,
    Truncate,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Iqvic, Method::Avgpool, Method::Truncate];

    pub fn name(self) -> &'static str {
        match self {
            Method::Iqvic => "iqvic",
            Method::Avgpool => "avgpool",
            Method::Truncate => "truncate",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected iqvic, avgpool or truncate)")))
    }
}

/// What turns one projected frame into a memory entry.
#[derive(Clone, Debug, PartialEq)]
pub enum FrameCompressor {
    Iqvic {
        model: TransformerModel,
        lookup: ContextTokenLookup,
    },
    Avgpool {
        context_tokens: usize,
    },
    Truncate {
        context_tokens: usize,
    },
}

impl FrameCompressor {
    pub fn method(&self) -> Method {
        match self {
            FrameCompressor::Iqvic { .. } => Method::Iqvic,
            FrameCompressor::Avgpool { .. } => Method::Avgpool,
            FrameCompressor::Truncate { .. } => Method::Truncate,
        }
    }

    pub fn context_tokens(&self) -> usize {
        match self {
            FrameCompressor::Iqvic { lookup, .. } => lookup.context_tokens(),
            FrameCompressor::Avgpool { context_tokens } | FrameCompressor::Truncate { context_tokens } => {
                *context_tokens
            }
        }
    }

    pub fn compress(&self, question: &TokenSequence, frame: &FrameEmbedding) -> Result<ContextEmbedding> {
        match self {
            FrameCompressor::Iqvic { model, lookup } => compress(model, question, frame, lookup),
            FrameCompressor::Avgpool { context_tokens } => avgpool_compress(frame, *context_tokens, question.digest()),
            FrameCompressor::Truncate { context_tokens } => {
                truncate_compress(frame, *context_tokens, question.digest())
            }
        }
    }
}

/// Every component needed to answer a question about a frame stream.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub vocab: Vocabulary,
    pub encoder: FrameEncoder,
    pub projector: Projector,
    pub compressor: FrameCompressor,
    pub decoder: TransformerModel,
    pub capacity: usize,
    pub order: PromptOrder,
    pub max_new: usize,
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub answer: Answer,
    pub memory: ContextMemory,
}

impl Pipeline {
    pub fn new(
        vocab: Vocabulary,
        encoder: FrameEncoder,
        projector: Projector,
        compressor: FrameCompressor,
        decoder: TransformerModel,
        capacity: usize,
    ) -> Self {
        Self {
            vocab,
            encoder,
            projector,
            compressor,
            decoder,
            capacity,
            order: PromptOrder::QuestionFirst,
            max_new: DEFAULT_MAX_NEW,
        }
    }

    pub fn embed_frame(&self, frame: &SymbolicFrame) -> Result<FrameEmbedding> {
        self.projector.project(&self.encoder.encode(frame)?)
    }

    /// Memory for `question` after the whole stream.
    pub fn build_memory(&self, frames: &[SymbolicFrame], question: &TokenSequence) -> Result<ContextMemory> {
        if frames.is_empty() {
            return Err(Error::Contract("frame stream is empty".into()));
        }
        let mut session = self.session(question)?;
        for f in frames {
            session.push(f)?;
        }
        Ok(session.memory)
    }

    pub fn answer_memory(&self, question: &TokenSequence, memory: &ContextMemory) -> Result<Answer> {
        let input = build_decoder_input_ordered(&self.decoder, question, memory, self.order)?;
        answer(&self.decoder, &input, self.max_new, &self.vocab)
    }

    /// Batch mode: compress every frame, then answer once.
    pub fn run_stream(&self, frames: &[SymbolicFrame], question: &TokenSequence) -> Result<StreamOutput> {
        let memory = self.build_memory(frames, question)?;
        let answer = self.answer_memory(question, &memory)?;
        Ok(StreamOutput { answer, memory })
    }

    /// Incremental mode: frames are pushed one at a time and an answer can be
    /// requested from a snapshot after any of them.
    pub fn session(&self, question: &TokenSequence) -> Result<StreamSession<'_>> {
        question.check_vocab(self.vocab.len())?;
        Ok(StreamSession {
            pipeline: self,
            question: question.clone(),
            memory: ContextMemory::new(self.capacity)?,
        })
    }

    /// `K + min(T, L)·C`.
    pub fn prefix_budget(&self, question_len: usize, frames: usize) -> usize {
        question_len + frames.min(self.capacity) * self.compressor.context_tokens()
    }
}

/// Compressor-side and decoder-side parameters under one namespace:
/// `projector.*`, `compressor.*`, `lookup.*`, `decoder.*`.
impl ParamSet for Pipeline {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.projector.visit_params(&mut |n, t| f(&format!("projector.{n}"), t));
        if let FrameCompressor::Iqvic { model, lookup } = &self.compressor {
            model.visit_params(&mut |n, t| f(&format!("compressor.{n}"), t));
            lookup.visit_params(&mut |n, t| f(&format!("lookup.{n}"), t));
        }
        self.decoder.visit_params(&mut |n, t| f(&format!("decoder.{n}"), t));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.projector.visit_params_mut(&mut |n, t| f(&format!("projector.{n}"), t));
        if let FrameCompressor::Iqvic { model, lookup } = &mut self.compressor {
            model.visit_params_mut(&mut |n, t| f(&format!("compressor.{n}"), t));
            lookup.visit_params_mut(&mut |n, t| f(&format!("lookup.{n}"), t));
        }
        self.decoder.visit_params_mut(&mut |n, t| f(&format!("decoder.{n}"), t));
    }
}

pub struct StreamSession<'a> {
    pipeline: &'a Pipeline,
    question: TokenSequence,
    memory: ContextMemory,
}

impl StreamSession<'_> {
    pub fn push(&mut self, frame: &SymbolicFrame) -> Result<()> {
        let e_v = self.pipeline.embed_frame(frame)?;
        let entry = self.pipeline.compressor.compress(&self.question, &e_v)?;
        self.memory.insert(entry)
    }

    pub fn memory(&self) -> &ContextMemory {
        &self.memory
    }

    pub fn frames_seen(&self) -> usize {
        self.memory.inserts()
    }

    /// Answer from a snapshot of the memory as it stands.
    pub fn answer_now(&self) -> Result<Answer> {
        let snapshot = self.memory.snapshot();
        self.pipeline.answer_memory(&self.question, &snapshot)
    }
}
