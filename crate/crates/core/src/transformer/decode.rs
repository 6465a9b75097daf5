use crate::autodiff::{AttentionMask, Graph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::TransformerModel;

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of an embedding prefix. Generated tokens are fed back
/// through the token table; stops at `stop_id` (not emitted) or after `max_new`.
pub fn greedy_decode(model: &TransformerModel, prefix: &Tensor, max_new: usize, stop_id: usize) -> Result<Vec<usize>> {
    let (n, d) = prefix.dims2()?;
    if d != model.d_model() {
        return Err(Error::Dimension {
            op: "greedy_decode",
            left: prefix.shape().to_vec(),
            right: vec![n, model.d_model()],
        });
    }
    if n == 0 {
        return Err(Error::Contract("decoder prefix is empty".into()));
    }
    model.config.check_positions(n + max_new)?;
    let mut out = Vec::new();
    while out.len() < max_new {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let p = g.leaf(prefix.clone(), false);
        let input = if out.is_empty() {
            p
        } else {
            let e = b.embed_tokens(&mut g, &out)?;
            g.concat_rows(&[p, e])?
        };
        let rows = n + out.len();
        let h = b.forward_embeddings(&mut g, input, AttentionMask::Causal, None)?;
        let last = g.slice_rows(h, rows - 1, rows)?;
        let logits = b.logits(&mut g, last)?;
        let next = argmax(g.value(logits).data());
        if next == stop_id {
            break;
        }
        out.push(next);
    }
    Ok(out)
}
