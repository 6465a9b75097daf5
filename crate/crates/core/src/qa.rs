//! Answer generation from a question and a context memory.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::memory::ContextMemory;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, Vocabulary, EOS};
use crate::transformer::{embed_tokens, greedy_decode, BoundTransformer, TransformerModel};

pub const DEFAULT_MAX_NEW: usize = 16;

/// Row order of the decoder prefix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrder {
    /// `[e_q ‖ e_m]`
    #[default]
    QuestionFirst,
    /// `[e_m ‖ e_q]`; under the causal mask this lets question rows see the memory.
    MemoryFirst,
}

impl std::str::FromStr for PromptOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "question_first" => Ok(Self::QuestionFirst),
            "memory_first" => Ok(Self::MemoryFirst),
            _ => Err(Error::Config(format!("unknown prompt order {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderInput {
    /// `(K + len·C) × D_e`
    pub prefix: Tensor,
    pub question: TokenSequence,
    pub memory_snapshot: ContextMemory,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub tokens: TokenSequence,
    pub text: String,
}

fn check_memory(question: &TokenSequence, memory: &ContextMemory) -> Result<()> {
    match memory.question_hash() {
        None => Err(Error::Contract("memory is empty".into())),
        Some(h) if h != question.digest() => Err(Error::Consistency(format!(
            "memory built for question {h}, asked {}",
            question.digest()
        ))),
        Some(_) => Ok(()),
    }
}

pub fn build_decoder_input(
    decoder: &TransformerModel,
    question: &TokenSequence,
    memory: &ContextMemory,
) -> Result<DecoderInput> {
    build_decoder_input_ordered(decoder, question, memory, PromptOrder::QuestionFirst)
}

pub fn build_decoder_input_ordered(
    decoder: &TransformerModel,
    question: &TokenSequence,
    memory: &ContextMemory,
    order: PromptOrder,
) -> Result<DecoderInput> {
    check_memory(question, memory)?;
    let e_q = embed_tokens(decoder, &question.ids)?;
    let e_m = memory.as_decoder_input()?;
    let prefix = match order {
        PromptOrder::QuestionFirst => Tensor::concat_rows(&[&e_q, &e_m])?,
        PromptOrder::MemoryFirst => Tensor::concat_rows(&[&e_m, &e_q])?,
    };
    Ok(DecoderInput {
        prefix,
        question: question.clone(),
        memory_snapshot: memory.snapshot(),
    })
}

/// Same layout as [`build_decoder_input_ordered`], on a graph.
pub fn prefix_in_graph(
    g: &mut Graph<'_>,
    decoder: &BoundTransformer,
    question: &[usize],
    memory_rows: Var,
    order: PromptOrder,
) -> Result<Var> {
    let e_q = decoder.embed_tokens(g, question)?;
    match order {
        PromptOrder::QuestionFirst => g.concat_rows(&[e_q, memory_rows]),
        PromptOrder::MemoryFirst => g.concat_rows(&[memory_rows, e_q]),
    }
}

/// Greedy answer; `<eos>` ends generation and is not part of the answer.
pub fn answer(decoder: &TransformerModel, input: &DecoderInput, max_new: usize, vocab: &Vocabulary) -> Result<Answer> {
    let stop = vocab
        .id(EOS)
        .ok_or_else(|| Error::Vocabulary(vec![EOS.to_string()]))?;
    let tokens = TokenSequence::new(greedy_decode(decoder, &input.prefix, max_new, stop)?);
    let text = vocab.decode(&tokens);
    Ok(Answer { tokens, text })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::ContextEmbedding;
    use crate::transformer::TransformerConfig;

    fn decoder(max_positions: usize) -> TransformerModel {
        let cfg = TransformerConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            vocab_size: 6,
            max_positions,
            lora_rank: 0,
            ..TransformerConfig::default()
        };
        TransformerModel::new(cfg, 3).unwrap()
    }

    fn vocab() -> Vocabulary {
        Vocabulary::new(["<pad>", "<eos>", "a", "b", "c", "d"].map(String::from).to_vec()).unwrap()
    }

    fn memory(q: &TokenSequence, entries: usize, c: usize) -> ContextMemory {
        let mut m = ContextMemory::new(10).unwrap();
        for t in 0..entries {
            m.insert(ContextEmbedding {
                tokens: Tensor::full(&[c, 8], 0.1 * (t + 1) as f64),
                source_index: t,
                question_hash: q.digest(),
            })
            .unwrap();
        }
        m
    }

    #[test]
    fn prefix_rows() {
        let d = decoder(1024);
        let q = TokenSequence::new(vec![2; 8]);
        let input = build_decoder_input(&d, &q, &memory(&q, 1, 4)).unwrap();
        assert_eq!(input.prefix.shape(), &[12, 8]);
        let input = build_decoder_input(&d, &q, &memory(&q, 10, 64)).unwrap();
        assert_eq!(input.prefix.shape(), &[648, 8]);
        assert_eq!(input.prefix.slice_rows(8, 648).unwrap(), input.memory_snapshot.as_decoder_input().unwrap());
    }

    #[test]
    fn memory_first_order() {
        let d = decoder(64);
        let q = TokenSequence::new(vec![2, 3]);
        let m = memory(&q, 2, 3);
        let input = build_decoder_input_ordered(&d, &q, &m, PromptOrder::MemoryFirst).unwrap();
        assert_eq!(input.prefix.slice_rows(0, 6).unwrap(), m.as_decoder_input().unwrap());
        assert_eq!(input.prefix.slice_rows(6, 8).unwrap(), embed_tokens(&d, &q.ids).unwrap());
    }

    #[test]
    fn guards() {
        let d = decoder(64);
        let q = TokenSequence::new(vec![2, 3]);
        let other = TokenSequence::new(vec![2, 4]);
        assert!(matches!(
            build_decoder_input(&d, &other, &memory(&q, 1, 2)),
            Err(Error::Consistency(_))
        ));
        assert!(matches!(
            build_decoder_input(&d, &q, &ContextMemory::new(2).unwrap()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn budget_zero_and_capacity() {
        let d = decoder(10);
        let q = TokenSequence::new(vec![2, 3]);
        let input = build_decoder_input(&d, &q, &memory(&q, 2, 3)).unwrap();
        let a = answer(&d, &input, 0, &vocab()).unwrap();
        assert!(a.tokens.is_empty());
        assert_eq!(a.text, "");
        assert!(matches!(answer(&d, &input, 5, &vocab()), Err(Error::Capacity { needed: 13, max: 10 })));
        let first = answer(&d, &input, 2, &vocab()).unwrap();
        assert_eq!(first, answer(&d, &input, 2, &vocab()).unwrap());
        assert!(first.tokens.len() <= 2);
    }
}
