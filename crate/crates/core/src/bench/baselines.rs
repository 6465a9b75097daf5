//! Question-agnostic compressors that fill the same `C × D_e` memory slot.

use crate::compressor::ContextEmbedding;
use crate::error::{Error, Result};
use crate::frame::FrameEmbedding;
use crate::tensor::Tensor;
use crate::tokenizer::QuestionHash;

fn check_budget(op: &str, c: usize, p: usize) -> Result<()> {
    if c == 0 || c > p {
        return Err(Error::Contract(format!("{op}: need 1 <= C <= P, got C={c}, P={p}")));
    }
    Ok(())
}

/// Mean over consecutive windows of `ceil(P / C)` tokens. When `C` does not
/// divide `P` the last window is shorter; if the windows run out early the
/// remaining slots repeat the final window mean.
pub fn avgpool_tokens(e_v: &Tensor, c: usize) -> Result<Tensor> {
    let (p, d) = e_v.dims2()?;
    check_budget("avgpool", c, p)?;
    let w = p.div_ceil(c);
    let mut out = Vec::with_capacity(c * d);
    let mut last: Vec<f64> = Vec::new();
    for slot in 0..c {
        let (lo, hi) = (slot * w, ((slot + 1) * w).min(p));
        if lo < hi {
            last = vec![0.0; d];
            for r in lo..hi {
                for (acc, v) in last.iter_mut().zip(e_v.row(r)) {
                    *acc += v;
                }
            }
            let n = (hi - lo) as f64;
            last.iter_mut().for_each(|v| *v /= n);
        }
        out.extend_from_slice(&last);
    }
    Tensor::new(vec![c, d], out)
}

/// First `C` tokens.
pub fn truncate_tokens(e_v: &Tensor, c: usize) -> Result<Tensor> {
    let (p, _) = e_v.dims2()?;
    check_budget("truncate", c, p)?;
    e_v.slice_rows(0, c)
}

pub fn avgpool_compress(frame: &FrameEmbedding, c: usize, question_hash: QuestionHash) -> Result<ContextEmbedding> {
    Ok(ContextEmbedding {
        tokens: avgpool_tokens(&frame.tokens, c)?,
        source_index: frame.source_index,
        question_hash,
    })
}

pub fn truncate_compress(frame: &FrameEmbedding, c: usize, question_hash: QuestionHash) -> Result<ContextEmbedding> {
    Ok(ContextEmbedding {
        tokens: truncate_tokens(&frame.tokens, c)?,
        source_index: frame.source_index,
        question_hash,
    })
}
