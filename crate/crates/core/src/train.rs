//! Base pretraining and the two adaptation steps.
//!
//! Every stage shares one loop: per optimizer step, `batch_size ·
//! grad_accum_steps` samples are drawn from a per-epoch permutation; each
//! micro-batch's loss is the mean over its samples, micro-batch gradients are
//! summed and scaled by `1 / grad_accum_steps`. Data order and dropout masks
//! are derived from `(seed, stage, step)`, so a run resumed from a checkpoint
//! takes exactly the steps an uninterrupted run would.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionMask, Graph, Var};
use crate::bench::baselines::avgpool_tokens;
use crate::bench::task::QASample;
use crate::compressor::compress_in_graph;
use crate::error::{Error, Result};
use crate::frame::{FrameEncoder, Projector, RawFeature};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::{accumulate, global_norm, prefixed, scale_grads, GradMap, ParamSet};
use crate::pipeline::{FrameCompressor, Pipeline};
use crate::qa::{prefix_in_graph, PromptOrder};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;
use crate::transformer::{BoundTransformer, Dropout, TransformerModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub learning_rate: f64,
    /// Full-parameter pretraining of the shared base.
    pub base_learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub cosine_schedule: bool,
    /// `C`
    pub context_tokens: usize,
    /// `L`
    pub memory_capacity: usize,
    pub base_epochs: usize,
    pub step1_epochs: usize,
    pub step2_epochs: usize,
    /// Optimizer steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub prompt_order: PromptOrder,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            grad_accum_steps: 4,
            learning_rate: 2e-4,
            base_learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cosine_schedule: false,
            context_tokens: 64,
            memory_capacity: 10,
            base_epochs: 4,
            step1_epochs: 2,
            step2_epochs: 2,
            checkpoint_every: 0,
            prompt_order: PromptOrder::QuestionFirst,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("batch_size and grad_accum_steps must be at least 1".into()));
        }
        if self.context_tokens == 0 || self.memory_capacity == 0 {
            return Err(Error::Config("context_tokens and memory_capacity must be at least 1".into()));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("base_learning_rate", self.base_learning_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive real")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("weight_decay must be >= 0 and betas in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn samples_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    pub fn optimizer(&self, stage: Stage) -> AdamWConfig {
        AdamWConfig {
            learning_rate: match stage {
                Stage::Base => self.base_learning_rate,
                _ => self.learning_rate,
            },
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Step1,
    Step2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Step1 => "step1",
            Stage::Step2 => "step2",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Base => 0xba5e,
            Stage::Step1 => 0x5701,
            Stage::Step2 => 0x5702,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub type CheckpointFn<'a, T> = dyn FnMut(&T, &OptimizerState) -> Result<()> + 'a;

pub struct TrainHooks<'a, T> {
    pub log: Option<&'a mut dyn Write>,
    /// Called every `checkpoint_every` steps and after the last step.
    pub checkpoint: Option<&'a mut CheckpointFn<'a, T>>,
}

impl<T> Default for TrainHooks<'_, T> {
    fn default() -> Self {
        Self {
            log: None,
            checkpoint: None,
        }
    }
}

/// SplitMix64 finalizer folded over `parts`.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn epoch_order(n: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, stage.tag(), epoch as u64]));
    order.shuffle(&mut rng);
    order
}

fn scheduled_lr(cfg: &TrainConfig, base: f64, step: u64, total: u64) -> f64 {
    if cfg.cosine_schedule && total > 0 {
        0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
    } else {
        base
    }
}

/// Per-sample loss and gradients; `u64` seeds that sample's dropout.
pub type SampleFn<'a, T, S> = dyn Fn(&T, &S, u64) -> Result<(f64, GradMap)> + 'a;

/// Runs optimizer steps `state.step .. epochs · steps_per_epoch`.
#[allow(clippy::too_many_arguments)]
pub fn optimize<T: ParamSet, S>(
    target: &mut T,
    samples: &[S],
    epochs: usize,
    cfg: &TrainConfig,
    stage: Stage,
    seed: u64,
    state: &mut OptimizerState,
    hooks: &mut TrainHooks<'_, T>,
    sample_fn: &SampleFn<'_, T, S>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract(format!("{} training set is empty", stage.name())));
    }
    let per_step = cfg.samples_per_step();
    let steps_per_epoch = samples.len().div_ceil(per_step) as u64;
    let total = steps_per_epoch * epochs as u64;
    let mut records = Vec::new();
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while state.step < total {
        let step = state.step;
        let epoch = (step / steps_per_epoch) as usize;
        if epoch != order_epoch {
            order = epoch_order(samples.len(), seed, stage, epoch);
            order_epoch = epoch;
        }
        let j = (step % steps_per_epoch) as usize;
        let chosen = &order[j * per_step..((j + 1) * per_step).min(samples.len())];

        let mut grads = GradMap::new();
        let mut loss_sum = 0.0;
        let micro: Vec<&[usize]> = chosen.chunks(cfg.batch_size).collect();
        for (mb_i, mb) in micro.iter().enumerate() {
            let mut mb_grads = GradMap::new();
            let mut mb_loss = 0.0;
            let w = 1.0 / mb.len() as f64;
            for (k, &idx) in mb.iter().enumerate() {
                let dropout_seed = mix_seed(&[seed, stage.tag(), step, (mb_i * cfg.batch_size + k) as u64]);
                let (loss, g) = sample_fn(target, &samples[idx], dropout_seed)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("{} loss at step {step}, sample {idx}", stage.name())));
                }
                mb_loss += w * loss;
                accumulate(&mut mb_grads, &g, w);
            }
            loss_sum += mb_loss;
            accumulate(&mut grads, &mb_grads, 1.0);
        }
        let m = micro.len() as f64;
        scale_grads(&mut grads, 1.0 / m);
        let loss = loss_sum / m;
        let grad_norm = global_norm(&grads);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("{} gradient at step {step}", stage.name())));
        }
        let lr = scheduled_lr(cfg, state.config.learning_rate, step, total);
        state.step(target, &grads, lr);
        let rec = StepRecord {
            step: state.step,
            epoch,
            loss,
            lr,
            grad_norm,
        };
        if let Some(log) = hooks.log.as_deref_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::format("training log", e))?;
            writeln!(log, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        log::debug!("{} step {} loss {:.5} |g| {:.4}", stage.name(), rec.step, loss, grad_norm);
        records.push(rec);
        let due = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
        if due || state.step == total {
            if let Some(cb) = hooks.checkpoint.as_deref_mut() {
                cb(target, state)?;
            }
        }
    }
    Ok(records)
}

/// Mean loss per epoch, in epoch order.
pub fn epoch_means(records: &[StepRecord]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in records {
        if out.len() <= r.epoch {
            out.resize(r.epoch + 1, (0.0, 0));
        }
        out[r.epoch].0 += r.loss;
        out[r.epoch].1 += 1;
    }
    out.into_iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / n as f64).collect()
}

/// Gold answer followed by `<eos>`.
pub fn answer_targets(gold: &TokenSequence, eos: usize) -> Vec<usize> {
    let mut t = gold.ids.clone();
    t.push(eos);
    t
}

/// Teacher-forced answer loss after `prefix`: rows `n-1 .. n+A` predict
/// `gold ++ [eos]`.
fn answer_loss(
    g: &mut Graph<'_>,
    decoder: &BoundTransformer,
    prefix: Var,
    gold: &TokenSequence,
    eos: usize,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let n = g.value(prefix).dims2()?.0;
    let input = if gold.is_empty() {
        prefix
    } else {
        let e_a = decoder.embed_tokens(g, &gold.ids)?;
        g.concat_rows(&[prefix, e_a])?
    };
    let hidden = decoder.forward_embeddings(g, input, AttentionMask::Causal, dropout)?;
    let rows = g.slice_rows(hidden, n - 1, n + gold.len())?;
    let logits = decoder.logits(g, rows)?;
    let targets = answer_targets(gold, eos);
    let mask = vec![true; targets.len()];
    g.cross_entropy(logits, &targets, &mask)
}

/// Shared base model plus the projector it reads frames through.
#[derive(Clone, Debug)]
pub struct BaseSystem {
    pub model: TransformerModel,
    pub projector: Projector,
}

impl ParamSet for BaseSystem {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.model.visit_params(&mut |n, t| f(&format!("model.{n}"), t));
        self.projector.visit_params(&mut |n, t| f(&format!("projector.{n}"), t));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.model.visit_params_mut(&mut |n, t| f(&format!("model.{n}"), t));
        self.projector.visit_params_mut(&mut |n, t| f(&format!("projector.{n}"), t));
    }
}

/// Encoder features for every frame of every sample; the encoder is frozen.
pub fn encode_samples(encoder: &FrameEncoder, samples: &[QASample]) -> Result<Vec<Vec<RawFeature>>> {
    samples
        .iter()
        .map(|s| s.frames.iter().map(|f| encoder.encode(f)).collect())
        .collect()
}

struct EncodedSample<'a> {
    sample: &'a QASample,
    features: Vec<RawFeature>,
}

fn encoded<'a>(encoder: &FrameEncoder, samples: &'a [QASample]) -> Result<Vec<EncodedSample<'a>>> {
    Ok(encode_samples(encoder, samples)?
        .into_iter()
        .zip(samples)
        .map(|(features, sample)| EncodedSample { sample, features })
        .collect())
}

/// Full-parameter training of the base model and projector on QA over
/// uncompressed frame tokens, `[e_q ‖ e_v1 ‖ .. ‖ e_vT ‖ answer]`.
pub fn pretrain_base(
    base: &mut BaseSystem,
    encoder: &FrameEncoder,
    samples: &[QASample],
    eos: usize,
    cfg: &TrainConfig,
    seed: u64,
    state: &mut OptimizerState,
    hooks: &mut TrainHooks<'_, BaseSystem>,
) -> Result<Vec<StepRecord>> {
    let data = encoded(encoder, samples)?;
    let sample_fn = |b: &BaseSystem, s: &EncodedSample<'_>, _seed: u64| -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let model = b.model.bind(&mut g, true);
        let proj = b.projector.bind(&mut g, true);
        let mut parts = vec![model.embed_tokens(&mut g, &s.sample.question.ids)?];
        for f in &s.features {
            let x = g.param(&f.tokens, false);
            parts.push(proj.forward(&mut g, x)?);
        }
        let prefix = g.concat_rows(&parts)?;
        let loss = answer_loss(&mut g, &model, prefix, &s.sample.gold_answer, eos, None)?;
        let grads = g.backward(loss)?;
        let mut out = prefixed("model", model.collect_grads(&g, &grads));
        out.extend(prefixed("projector", proj.collect_grads(&g, &grads)));
        Ok((g.value(loss).item(), out))
    };
    optimize(base, &data, cfg.base_epochs, cfg, Stage::Base, seed, state, hooks, &sample_fn)
}

/// Constant pooling matrix so that `pool · e_v` is the average-pool baseline.
fn pool_matrix(c: usize, p: usize) -> Result<Tensor> {
    let eye = Tensor::new(
        vec![p, p],
        (0..p * p).map(|i| if i / p == i % p { 1.0 } else { 0.0 }).collect(),
    )?;
    avgpool_tokens(&eye, c)
}

/// Step 1: single-frame QA through a one-entry memory read by the frozen
/// decoder. Trains the projector and, for the IQViC compressor, its adapters
/// and context-token lookup. The decoder is bound without gradients.
pub fn train_step1(
    pipeline: &mut Pipeline,
    samples: &[QASample],
    eos: usize,
    cfg: &TrainConfig,
    seed: u64,
    state: &mut OptimizerState,
    hooks: &mut TrainHooks<'_, Pipeline>,
) -> Result<Vec<StepRecord>> {
    if samples.iter().any(|s| s.frames.len() != 1) {
        return Err(Error::Contract("step 1 trains on single-frame samples".into()));
    }
    let data = encoded(&pipeline.encoder, samples)?;
    let patches = data[0].features[0].tokens.dims2()?.0;
    let pool = match &pipeline.compressor {
        FrameCompressor::Avgpool { context_tokens } => Some(pool_matrix(*context_tokens, patches)?),
        _ => None,
    };
    let order = pipeline.order;
    let sample_fn = |p: &Pipeline, s: &EncodedSample<'_>, dropout_seed: u64| -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let proj = p.projector.bind(&mut g, true);
        let decoder = p.decoder.bind(&mut g, false);
        let x = g.param(&s.features[0].tokens, false);
        let e_v = proj.forward(&mut g, x)?;
        let q = &s.sample.question.ids;
        let mut compressor_side = None;
        let e_c = match &p.compressor {
            FrameCompressor::Iqvic { model, lookup } => {
                let bound = model.bind(&mut g, true);
                let l = g.param(&lookup.table, true);
                let mut dropout = bound.make_dropout(dropout_seed);
                let e_c = compress_in_graph(&mut g, &bound, q, e_v, l, dropout.as_mut())?;
                compressor_side = Some((bound, l));
                e_c
            }
            FrameCompressor::Avgpool { .. } => {
                let pm = g.param(pool.as_ref().expect("pool matrix"), false);
                g.matmul(pm, e_v)?
            }
            FrameCompressor::Truncate { context_tokens } => g.slice_rows(e_v, 0, *context_tokens)?,
        };
        let prefix = prefix_in_graph(&mut g, &decoder, q, e_c, order)?;
        let loss = answer_loss(&mut g, &decoder, prefix, &s.sample.gold_answer, eos, None)?;
        let grads = g.backward(loss)?;
        let mut out = prefixed("projector", proj.collect_grads(&g, &grads));
        if let Some((bound, l)) = compressor_side {
            out.extend(prefixed("compressor", bound.collect_grads(&g, &grads)));
            out.insert("lookup.table".into(), grads.wrt(&g, l));
        }
        Ok((g.value(loss).item(), out))
    };
    optimize(pipeline, &data, cfg.step1_epochs, cfg, Stage::Step1, seed, state, hooks, &sample_fn)
}

/// A training stream reduced to what step 2 needs: the memory rows are
/// constants because the compressor side is frozen.
pub struct MemorySample {
    pub question: TokenSequence,
    pub memory_rows: Tensor,
    pub gold_answer: TokenSequence,
}

pub fn precompute_memories(pipeline: &Pipeline, samples: &[QASample]) -> Result<Vec<MemorySample>> {
    samples
        .iter()
        .map(|s| {
            let memory = pipeline.build_memory(&s.frames, &s.question)?;
            Ok(MemorySample {
                question: s.question.clone(),
                memory_rows: memory.as_decoder_input()?,
                gold_answer: s.gold_answer.clone(),
            })
        })
        .collect()
}

/// Step 2: decoder adapters on streamed QA; nothing upstream of the memory
/// receives gradients.
pub fn train_step2(
    pipeline: &mut Pipeline,
    samples: &[QASample],
    eos: usize,
    cfg: &TrainConfig,
    seed: u64,
    state: &mut OptimizerState,
    hooks: &mut TrainHooks<'_, Pipeline>,
) -> Result<Vec<StepRecord>> {
    let data = precompute_memories(pipeline, samples)?;
    let order = pipeline.order;
    let sample_fn = |p: &Pipeline, s: &MemorySample, dropout_seed: u64| -> Result<(f64, GradMap)> {
        let mut g = Graph::new();
        let decoder = p.decoder.bind(&mut g, true);
        let m = g.param(&s.memory_rows, false);
        let prefix = prefix_in_graph(&mut g, &decoder, &s.question.ids, m, order)?;
        let mut dropout = decoder.make_dropout(dropout_seed);
        let loss = answer_loss(&mut g, &decoder, prefix, &s.gold_answer, eos, dropout.as_mut())?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), prefixed("decoder", decoder.collect_grads(&g, &grads))))
    };
    optimize(pipeline, &data, cfg.step2_epochs, cfg, Stage::Step2, seed, state, hooks, &sample_fn)
}
