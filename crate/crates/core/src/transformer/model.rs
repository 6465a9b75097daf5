use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{TransformerConfig, LAYER_NORM_EPS};
use super::lora::lora_project;
use crate::autodiff::{AttentionMask, Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};
use crate::tensor::Tensor;

/// Low-rank delta `(alpha / r) · A · B` on one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    /// `d_model × r`
    pub a: Tensor,
    /// `r × d_model`
    pub b: Tensor,
}

impl LoraPair {
    /// `A ~ N(0, 0.02²)`, `B = 0`, so the adapted projection starts equal to the base.
    pub fn init(d_model: usize, rank: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: Tensor::randn(&[d_model, rank], 0.02, rng),
            b: Tensor::zeros(&[rank, d_model]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm_gain: Tensor,
    pub mlp_norm_bias: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub lora_q: Option<LoraPair>,
    pub lora_v: Option<LoraPair>,
}

/// Pre-norm causal transformer. Serves both as the frame compressor and as
/// the answer decoder; the two roles are separate instances.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: TransformerConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<Layer>,
    pub final_norm_gain: Tensor,
    pub final_norm_bias: Tensor,
    pub lm_head: Tensor,
    /// When set, only adapter parameters take gradients.
    pub frozen_base: bool,
}

impl TransformerModel {
    /// Random base weights; adapters are attached when `lora_rank > 0`.
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let proj_std = 1.0 / (d as f64).sqrt();
        let resid_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                attn_norm_gain: Tensor::full(&[d], 1.0),
                attn_norm_bias: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], proj_std, &mut rng),
                wk: Tensor::randn(&[d, d], proj_std, &mut rng),
                wv: Tensor::randn(&[d, d], proj_std, &mut rng),
                wo: Tensor::randn(&[d, d], resid_std, &mut rng),
                mlp_norm_gain: Tensor::full(&[d], 1.0),
                mlp_norm_bias: Tensor::zeros(&[d]),
                w_in: Tensor::randn(&[d, config.d_ff], proj_std, &mut rng),
                b_in: Tensor::zeros(&[config.d_ff]),
                w_out: Tensor::randn(&[config.d_ff, d], 1.0 / (config.d_ff as f64).sqrt() / 2.0, &mut rng),
                b_out: Tensor::zeros(&[d]),
                lora_q: None,
                lora_v: None,
            })
            .collect();
        let mut model = Self {
            token_embedding: Tensor::randn(&[config.vocab_size, d], 0.02, &mut rng),
            position_embedding: Tensor::randn(&[config.max_positions, d], 0.02, &mut rng),
            layers,
            final_norm_gain: Tensor::full(&[d], 1.0),
            final_norm_bias: Tensor::zeros(&[d]),
            lm_head: Tensor::randn(&[d, config.vocab_size], proj_std, &mut rng),
            frozen_base: false,
            config,
        };
        if model.config.lora_rank > 0 {
            model.attach_lora(seed ^ 0x10_4a)?;
        }
        Ok(model)
    }

    /// (Re)initializes adapters on every layer's query and value projections.
    pub fn attach_lora(&mut self, seed: u64) -> Result<()> {
        let r = self.config.lora_rank;
        if r == 0 {
            return Err(Error::Config("lora_rank is 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model;
        for layer in &mut self.layers {
            layer.lora_q = Some(LoraPair::init(d, r, &mut rng));
            layer.lora_v = Some(LoraPair::init(d, r, &mut rng));
        }
        Ok(())
    }

    /// Copy of this model with fresh adapters of `rank` and a frozen base;
    /// the starting point of both adaptation steps.
    pub fn adapted(&self, rank: usize, alpha: f64, dropout: f64, seed: u64) -> Result<Self> {
        let mut m = self.clone();
        m.config.lora_rank = rank;
        m.config.lora_alpha = alpha;
        m.config.lora_dropout = dropout;
        m.config.validate()?;
        m.attach_lora(seed)?;
        m.frozen_base = true;
        Ok(m)
    }

    pub fn without_lora(&self) -> Self {
        let mut m = self.clone();
        for layer in &mut m.layers {
            layer.lora_q = None;
            layer.lora_v = None;
        }
        m.config.lora_rank = 0;
        m
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Puts every parameter on `graph`. Base weights require gradients only
    /// when `trainable` and not `frozen_base`; adapters whenever `trainable`.
    pub fn bind<'p>(&'p self, graph: &mut Graph<'p>, trainable: bool) -> BoundTransformer {
        let base_rg = trainable && !self.frozen_base;
        let mut named = Vec::new();
        let mut bind = |g: &mut Graph<'p>, name: String, t: &'p Tensor, rg: bool| {
            let v = g.param(t, rg);
            if rg {
                named.push((name, v));
            }
            v
        };
        let token_embedding = bind(graph, "token_embedding".into(), &self.token_embedding, base_rg);
        let position_embedding = bind(graph, "position_embedding".into(), &self.position_embedding, base_rg);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            let mut lora = |g: &mut Graph<'p>, tag: &str, pair: &'p Option<LoraPair>| {
                pair.as_ref().map(|pair| {
                    (
                        bind(g, p(&format!("{tag}.a")), &pair.a, trainable),
                        bind(g, p(&format!("{tag}.b")), &pair.b, trainable),
                    )
                })
            };
            let lora_q = lora(graph, "lora_q", &l.lora_q);
            let lora_v = lora(graph, "lora_v", &l.lora_v);
            layers.push(BoundLayer {
                attn_norm_gain: bind(graph, p("attn_norm.gain"), &l.attn_norm_gain, base_rg),
                attn_norm_bias: bind(graph, p("attn_norm.bias"), &l.attn_norm_bias, base_rg),
                wq: bind(graph, p("wq"), &l.wq, base_rg),
                wk: bind(graph, p("wk"), &l.wk, base_rg),
                wv: bind(graph, p("wv"), &l.wv, base_rg),
                wo: bind(graph, p("wo"), &l.wo, base_rg),
                mlp_norm_gain: bind(graph, p("mlp_norm.gain"), &l.mlp_norm_gain, base_rg),
                mlp_norm_bias: bind(graph, p("mlp_norm.bias"), &l.mlp_norm_bias, base_rg),
                w_in: bind(graph, p("mlp.w_in"), &l.w_in, base_rg),
                b_in: bind(graph, p("mlp.b_in"), &l.b_in, base_rg),
                w_out: bind(graph, p("mlp.w_out"), &l.w_out, base_rg),
                b_out: bind(graph, p("mlp.b_out"), &l.b_out, base_rg),
                lora_q,
                lora_v,
            });
        }
        let final_norm_gain = bind(graph, "final_norm.gain".into(), &self.final_norm_gain, base_rg);
        let final_norm_bias = bind(graph, "final_norm.bias".into(), &self.final_norm_bias, base_rg);
        let lm_head = bind(graph, "lm_head".into(), &self.lm_head, base_rg);
        BoundTransformer {
            config: self.config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain,
            final_norm_bias,
            lm_head,
            named,
        }
    }
}

impl ParamSet for TransformerModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            f(&p("attn_norm.gain"), &l.attn_norm_gain);
            f(&p("attn_norm.bias"), &l.attn_norm_bias);
            f(&p("wq"), &l.wq);
            f(&p("wk"), &l.wk);
            f(&p("wv"), &l.wv);
            f(&p("wo"), &l.wo);
            f(&p("mlp_norm.gain"), &l.mlp_norm_gain);
            f(&p("mlp_norm.bias"), &l.mlp_norm_bias);
            f(&p("mlp.w_in"), &l.w_in);
            f(&p("mlp.b_in"), &l.b_in);
            f(&p("mlp.w_out"), &l.w_out);
            f(&p("mlp.b_out"), &l.b_out);
            if let Some(pair) = &l.lora_q {
                f(&p("lora_q.a"), &pair.a);
                f(&p("lora_q.b"), &pair.b);
            }
            if let Some(pair) = &l.lora_v {
                f(&p("lora_v.a"), &pair.a);
                f(&p("lora_v.b"), &pair.b);
            }
        }
        f("final_norm.gain", &self.final_norm_gain);
        f("final_norm.bias", &self.final_norm_bias);
        f("lm_head", &self.lm_head);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            f(&p("attn_norm.gain"), &mut l.attn_norm_gain);
            f(&p("attn_norm.bias"), &mut l.attn_norm_bias);
            f(&p("wq"), &mut l.wq);
            f(&p("wk"), &mut l.wk);
            f(&p("wv"), &mut l.wv);
            f(&p("wo"), &mut l.wo);
            f(&p("mlp_norm.gain"), &mut l.mlp_norm_gain);
            f(&p("mlp_norm.bias"), &mut l.mlp_norm_bias);
            f(&p("mlp.w_in"), &mut l.w_in);
            f(&p("mlp.b_in"), &mut l.b_in);
            f(&p("mlp.w_out"), &mut l.w_out);
            f(&p("mlp.b_out"), &mut l.b_out);
            if let Some(pair) = &mut l.lora_q {
                f(&p("lora_q.a"), &mut pair.a);
                f(&p("lora_q.b"), &mut pair.b);
            }
            if let Some(pair) = &mut l.lora_v {
                f(&p("lora_v.a"), &mut pair.a);
                f(&p("lora_v.b"), &mut pair.b);
            }
        }
        f("final_norm.gain", &mut self.final_norm_gain);
        f("final_norm.bias", &mut self.final_norm_bias);
        f("lm_head", &mut self.lm_head);
    }
}

pub fn is_adapter_param(name: &str) -> bool {
    name.contains(".lora_")
}

pub struct BoundLayer {
    attn_norm_gain: Var,
    attn_norm_bias: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    mlp_norm_gain: Var,
    mlp_norm_bias: Var,
    w_in: Var,
    b_in: Var,
    w_out: Var,
    b_out: Var,
    lora_q: Option<(Var, Var)>,
    lora_v: Option<(Var, Var)>,
}

/// A model's parameters as graph leaves.
pub struct BoundTransformer {
    config: TransformerConfig,
    token_embedding: Var,
    position_embedding: Var,
    layers: Vec<BoundLayer>,
    final_norm_gain: Var,
    final_norm_bias: Var,
    lm_head: Var,
    named: Vec<(String, Var)>,
}

/// Adapter dropout for one training forward pass.
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn mask(&mut self, shape: &[usize]) -> Tensor {
        let keep = 1.0 - self.p;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("mask shape")
    }
}

impl BoundTransformer {
    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Token lookup, no positions added.
    pub fn embed_tokens(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Contract("token sequence must be non-empty".into()));
        }
        g.gather(self.token_embedding, ids)
    }

    /// Adds positions `0..n` and runs every layer; returns the last layer's
    /// hidden states (before the final norm), one row per input row.
    pub fn forward_embeddings(
        &self,
        g: &mut Graph<'_>,
        embeds: Var,
        mask: AttentionMask,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let (n, d) = g.value(embeds).dims2()?;
        if d != self.config.d_model {
            return Err(Error::Dimension {
                op: "forward_embeddings",
                left: vec![n, d],
                right: vec![n, self.config.d_model],
            });
        }
        self.config.check_positions(n)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather(self.position_embedding, &positions)?;
        let mut h = g.add(embeds, pos)?;
        let scale = self.config.lora_scale();
        for layer in &self.layers {
            let a = g.layer_norm(h, layer.attn_norm_gain, layer.attn_norm_bias, LAYER_NORM_EPS)?;
            let q = lora_project(g, a, layer.wq, layer.lora_q, scale, dropout.as_deref_mut())?;
            let k = g.matmul(a, layer.wk)?;
            let v = lora_project(g, a, layer.wv, layer.lora_v, scale, dropout.as_deref_mut())?;
            let att = g.attention(q, k, v, self.config.n_heads, mask)?;
            let o = g.matmul(att, layer.wo)?;
            h = g.add(h, o)?;
            let m = g.layer_norm(h, layer.mlp_norm_gain, layer.mlp_norm_bias, LAYER_NORM_EPS)?;
            let up = g.matmul(m, layer.w_in)?;
            let up = g.add_row(up, layer.b_in)?;
            let act = g.gelu(up)?;
            let down = g.matmul(act, layer.w_out)?;
            let down = g.add_row(down, layer.b_out)?;
            h = g.add(h, down)?;
        }
        Ok(h)
    }

    /// Vocabulary logits for hidden rows.
    pub fn logits(&self, g: &mut Graph<'_>, hidden: Var) -> Result<Var> {
        let normed = g.layer_norm(hidden, self.final_norm_gain, self.final_norm_bias, LAYER_NORM_EPS)?;
        g.matmul(normed, self.lm_head)
    }

    /// Gradients of every parameter that was bound as trainable.
    pub fn collect_grads(&self, g: &Graph<'_>, grads: &Gradients) -> GradMap {
        self.named
            .iter()
            .map(|(name, v)| (name.clone(), grads.wrt(g, *v)))
            .collect()
    }

    /// Wrap a `dropout` only when the model config asks for one.
    pub fn wants_dropout(&self) -> bool {
        self.config.lora_rank > 0 && self.config.lora_dropout > 0.0
    }

    pub fn make_dropout(&self, seed: u64) -> Option<Dropout> {
        self.wants_dropout().then(|| Dropout {
            p: self.config.lora_dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Dropout {
    pub(crate) fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mask = self.mask(g.value(x).shape());
        g.mul_const(x, &mask)
    }
}

/// Inference-only forward pass over an embedding matrix.
pub fn forward_embeddings(model: &TransformerModel, embeds: &Tensor, mask: AttentionMask) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let x = g.leaf(embeds.clone(), false);
    let h = b.forward_embeddings(&mut g, x, mask, None)?;
    Ok(g.value(h).clone())
}

/// Token-table rows for `ids` (no positions).
pub fn embed_tokens(model: &TransformerModel, ids: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let e = b.embed_tokens(&mut g, ids)?;
    Ok(g.value(e).clone())
}
