use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::Dropout;

/// `x·W + scale·(drop(x)·A)·B`, or plain `x·W` without an adapter.
pub(crate) fn lora_project(
    g: &mut Graph<'_>,
    x: Var,
    w: Var,
    adapter: Option<(Var, Var)>,
    scale: f64,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let Some((a, b)) = adapter else {
        return Ok(base);
    };
    let input = match dropout {
        Some(d) => d.apply(g, x)?,
        None => x,
    };
    let down = g.matmul(input, a)?;
    let up = g.matmul(down, b)?;
    let delta = g.scale(up, scale)?;
    g.add(base, delta)
}

/// `x·W + (alpha / r)·(x·A)·B` on plain tensors.
pub fn apply_lora(w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64, r: usize, x: &Tensor) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::Contract("adapter rank must be positive".into()));
    }
    if a.dims2()?.1 != r || b.dims2()?.0 != r {
        return Err(Error::Dimension {
            op: "apply_lora",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let (vx, vw, va, vb) = (g.param(x, false), g.param(w, false), g.param(a, false), g.param(b, false));
    let out = lora_project(&mut g, vx, vw, Some((va, vb)), alpha / r as f64, None)?;
    Ok(g.value(out).clone())
}
