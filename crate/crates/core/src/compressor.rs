//! Question-conditioned frame compression.
//!
//! The compressor input is `[question ‖ frame tokens ‖ context slots]`. Under
//! the causal mask the context slots come last, so each of them attends to
//! the whole question and the whole frame. Their last-layer hidden states are
//! the frame's `C × D_e` context embedding; the question and frame outputs
//! are computed and dropped.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionMask, Graph, Var};
use crate::error::{Error, Result};
use crate::frame::FrameEmbedding;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::tokenizer::{QuestionHash, TokenSequence};
use crate::transformer::{BoundTransformer, Dropout, TransformerModel};

/// Learnable context-slot embeddings, one distinct row per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTokenLookup {
    pub table: Tensor,
}

impl ContextTokenLookup {
    pub fn new(context_tokens: usize, d_model: usize, seed: u64) -> Result<Self> {
        if context_tokens == 0 {
            return Err(Error::Config("context token count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            table: Tensor::randn(&[context_tokens, d_model], 0.02, &mut rng),
        })
    }

    pub fn context_tokens(&self) -> usize {
        self.table.shape()[0]
    }
}

impl ParamSet for ContextTokenLookup {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("table", &self.table);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("table", &mut self.table);
    }
}

/// One frame's compressed, question-stamped memory entry.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextEmbedding {
    /// `C × D_e`
    pub tokens: Tensor,
    pub source_index: usize,
    pub question_hash: QuestionHash,
}

/// Row-wise `[e_q ‖ e_v ‖ e_c0]`.
pub fn assemble_input(e_q: &Tensor, e_v: &Tensor, e_c0: &Tensor) -> Result<Tensor> {
    if e_q.dims2()?.0 == 0 {
        return Err(Error::Contract("question must be non-empty".into()));
    }
    Tensor::concat_rows(&[e_q, e_v, e_c0])
}

/// `100 · C / P`.
pub fn compression_ratio(context_tokens: usize, patches: usize) -> Result<f64> {
    if patches == 0 {
        return Err(Error::Contract("patch count must be positive".into()));
    }
    Ok(100.0 * context_tokens as f64 / patches as f64)
}

/// Percentages as tabulated: whole numbers from 10% up, one decimal below.
pub fn format_ratio(percent: f64) -> String {
    if percent >= 10.0 {
        format!("{percent:.0}%")
    } else {
        format!("{percent:.1}%")
    }
}

/// Graph-level compression; returns the `C` context rows.
pub fn compress_in_graph(
    g: &mut Graph<'_>,
    compressor: &BoundTransformer,
    question: &[usize],
    frame_tokens: Var,
    lookup: Var,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let e_q = compressor.embed_tokens(g, question)?;
    let (k, p, c) = (
        question.len(),
        g.value(frame_tokens).dims2()?.0,
        g.value(lookup).dims2()?.0,
    );
    compressor.config().check_positions(k + p + c)?;
    let input = g.concat_rows(&[e_q, frame_tokens, lookup])?;
    let hidden = compressor.forward_embeddings(g, input, AttentionMask::Causal, dropout)?;
    g.slice_rows(hidden, k + p, k + p + c)
}

/// Inference-time compression of one projected frame.
pub fn compress(
    compressor: &TransformerModel,
    question: &TokenSequence,
    frame: &FrameEmbedding,
    lookup: &ContextTokenLookup,
) -> Result<ContextEmbedding> {
    let (p, d) = frame.tokens.dims2()?;
    let c = lookup.context_tokens();
    if d != compressor.d_model() || lookup.table.last_dim() != d {
        return Err(Error::Dimension {
            op: "compress",
            left: frame.tokens.shape().to_vec(),
            right: lookup.table.shape().to_vec(),
        });
    }
    if c > p {
        warn!("{c} context tokens exceed {p} patch tokens; nothing is compressed");
    }
    let mut g = Graph::new();
    let b = compressor.bind(&mut g, false);
    let v = g.param(&frame.tokens, false);
    let l = g.param(&lookup.table, false);
    let out = compress_in_graph(&mut g, &b, &question.ids, v, l, None)?;
    Ok(ContextEmbedding {
        tokens: g.value(out).clone(),
        source_index: frame.source_index,
        question_hash: question.digest(),
    })
}
