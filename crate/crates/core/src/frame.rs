//! Synthetic frames and the stand-in for the frozen visual encoder plus the
//! two-layer projector.
//!
//! A frame is a `G × G` grid of symbol ids. The encoder is a fixed random
//! symbol table plus a fixed random position table (`P = G²` rows); it is
//! never trained. The projector maps each `D_f` feature to the model width.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolicFrame {
    pub grid: usize,
    /// Row-major, `grid²` symbol ids.
    pub cells: Vec<usize>,
    pub frame_index: usize,
}

impl SymbolicFrame {
    pub fn new(grid: usize, cells: Vec<usize>, frame_index: usize) -> Result<Self> {
        if cells.len() != grid * grid {
            return Err(Error::Dimension {
                op: "frame",
                left: vec![grid, grid],
                right: vec![cells.len()],
            });
        }
        Ok(Self {
            grid,
            cells,
            frame_index,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.cells.len()
    }
}

/// Encoder output for one frame, `P × D_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeature {
    pub tokens: Tensor,
    pub source_index: usize,
}

/// Projected visual tokens for one frame, `P × D_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbedding {
    pub tokens: Tensor,
    pub source_index: usize,
}

/// `token p = enc_table[cells[p]] + pos_table[p]`.
pub fn encode_frame(frame: &SymbolicFrame, enc_table: &Tensor, pos_table: &Tensor) -> Result<RawFeature> {
    let (alphabet, d_f) = enc_table.dims2()?;
    let (positions, d_pos) = pos_table.dims2()?;
    if d_pos != d_f {
        return Err(Error::Dimension {
            op: "encode_frame",
            left: enc_table.shape().to_vec(),
            right: pos_table.shape().to_vec(),
        });
    }
    let p = frame.patch_count();
    if p > positions {
        return Err(Error::Index {
            what: "patch position",
            index: p - 1,
            bound: positions,
        });
    }
    let mut data = Vec::with_capacity(p * d_f);
    for (i, &sym) in frame.cells.iter().enumerate() {
        if sym >= alphabet {
            return Err(Error::Index {
                what: "frame symbol",
                index: sym,
                bound: alphabet,
            });
        }
        data.extend(enc_table.row(sym).iter().zip(pos_table.row(i)).map(|(a, b)| a + b));
    }
    Ok(RawFeature {
        tokens: Tensor::new(vec![p, d_f], data)?,
        source_index: frame.frame_index,
    })
}

/// Frozen featurizer: fixed random symbol and position tables.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEncoder {
    pub enc_table: Tensor,
    pub pos_table: Tensor,
}

impl FrameEncoder {
    pub fn new(alphabet_size: usize, patches: usize, d_feature: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            enc_table: Tensor::randn(&[alphabet_size, d_feature], 1.0, &mut rng),
            pos_table: Tensor::randn(&[patches, d_feature], 1.0, &mut rng),
        }
    }

    pub fn d_feature(&self) -> usize {
        self.enc_table.last_dim()
    }

    pub fn encode(&self, frame: &SymbolicFrame) -> Result<RawFeature> {
        encode_frame(frame, &self.enc_table, &self.pos_table)
    }
}

/// Per-token `linear → GELU → linear`, `D_f → D_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Projector {
    pub fn new(d_feature: usize, d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w1: Tensor::randn(&[d_feature, d_model], 1.0 / (d_feature as f64).sqrt(), &mut rng),
            b1: Tensor::zeros(&[d_model]),
            w2: Tensor::randn(&[d_model, d_model], 1.0 / (d_model as f64).sqrt(), &mut rng),
            b2: Tensor::zeros(&[d_model]),
        }
    }

    pub fn d_feature(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, trainable: bool) -> BoundProjector {
        BoundProjector {
            w1: g.param(&self.w1, trainable),
            b1: g.param(&self.b1, trainable),
            w2: g.param(&self.w2, trainable),
            b2: g.param(&self.b2, trainable),
        }
    }

    pub fn project(&self, feature: &RawFeature) -> Result<FrameEmbedding> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.param(&feature.tokens, false);
        let y = b.forward(&mut g, x)?;
        Ok(FrameEmbedding {
            tokens: g.value(y).clone(),
            source_index: feature.source_index,
        })
    }
}

impl ParamSet for Projector {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

pub struct BoundProjector {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BoundProjector {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let d_in = g.value(self.w1).shape()[0];
        if g.value(x).last_dim() != d_in {
            return Err(Error::Dimension {
                op: "project",
                left: g.value(x).shape().to_vec(),
                right: g.value(self.w1).shape().to_vec(),
            });
        }
        let h = g.matmul(x, self.w1)?;
        let h = g.add_row(h, self.b1)?;
        let h = g.gelu(h)?;
        let y = g.matmul(h, self.w2)?;
        g.add_row(y, self.b2)
    }

    pub fn collect_grads(&self, g: &Graph<'_>, grads: &Gradients) -> GradMap {
        [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]
            .into_iter()
            .filter(|(_, v)| g.requires_grad(*v))
            .map(|(n, v)| (n.to_string(), grads.wrt(g, v)))
            .collect()
    }
}
