//! The `iqvic` command line: `gen`, `train`, `eval`, `ask`.
//!
//! Everything a command writes lives under `--out` (default `run/`):
//!
//! ```text
//! data/     vocab.txt, pretrain.jsonl, single_frame.train.jsonl,
//!           kv_retrieval.train.jsonl, kv_retrieval.eval.jsonl, example_frames.json
//! ckpt/     base/, <method>/compressor/, <method>/decoder/, *.optim/
//! logs/     one JSONL record per optimizer step and stage
//! report/   report.txt, report.json, report.svg
//! <command>.resolved.toml
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::bench::report::{accounting_table, evaluate, BenchReport};
use crate::bench::task::{gen_pretraining_split, gen_split, read_jsonl, write_jsonl, QASample, TaskConfig, TaskTag};
use crate::compressor::ContextTokenLookup;
use crate::error::{Error, Result};
use crate::frame::{FrameEncoder, Projector, SymbolicFrame};
use crate::optim::OptimizerState;
use crate::pipeline::{FrameCompressor, Method, Pipeline};
use crate::tokenizer::{Vocabulary, EOS};
use crate::train::{mix_seed, pretrain_base, train_step1, train_step2, BaseSystem, Stage, TrainConfig, TrainHooks};
use crate::transformer::{TransformerConfig, TransformerModel};

pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERICAL: u8 = 4;
    pub const GATE: u8 = 6;
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Capacity { .. } => exit::CONFIG,
        Error::Io { .. } | Error::Format { .. } | Error::Vocabulary(_) | Error::Index { .. } | Error::Consistency(_) => {
            exit::DATA
        }
        Error::NonFinite(_) => exit::NUMERICAL,
        Error::Dimension { .. } | Error::Contract(_) => exit::OTHER,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_pretrain: usize,
    /// Longest stream in the pretraining mix.
    pub pretrain_max_frames: usize,
    pub n_single_train: usize,
    pub n_kv_train: usize,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_pretrain: 3000,
            pretrain_max_frames: 3,
            n_single_train: 2000,
            n_kv_train: 2000,
            n_eval: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub max_new: usize,
    /// Required IQViC-over-avgpool accuracy margin, in points.
    pub min_margin: f64,
    pub plot: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            max_new: crate::qa::DEFAULT_MAX_NEW,
            min_margin: 10.0,
            plot: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: TransformerConfig,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of SHA-256 over the resolved TOML.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.to_toml().as_bytes());
        h.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        let words = self.task.vocabulary().len();
        if self.model.vocab_size < words {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the task vocabulary ({words} words)",
                self.model.vocab_size
            )));
        }
        if self.data.n_eval == 0 {
            return Err(Error::Config("n_eval must be positive".into()));
        }
        Ok(())
    }

    fn seed_for(&self, what: &str) -> u64 {
        let tag = what.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        mix_seed(&[self.seed, tag])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepArg {
    Base,
    One,
    Two,
    All,
}

impl FromStr for StepArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "base" => Ok(StepArg::Base),
            "1" => Ok(StepArg::One),
            "2" => Ok(StepArg::Two),
            "all" => Ok(StepArg::All),
            _ => Err(format!("expected base, 1, 2 or all, got {s:?}")),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "iqvic", version, about = "Question-conditioned frame compression with a bounded context memory")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic datasets and vocabulary.
    Gen,
    /// Base pretraining, step 1 and step 2.
    Train {
        #[arg(long, default_value = "all")]
        step: StepArg,
        /// Comma-separated; defaults to the configured eval methods.
        #[arg(long, value_delimiter = ',')]
        method: Vec<Method>,
        /// Continue from the stage's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score trained methods on the held-out streams.
    Eval {
        #[arg(long, value_delimiter = ',')]
        method: Vec<Method>,
        /// Print memory-token accounting at P=576, L=10 for C=64/32/1.
        #[arg(long)]
        paper_accounting: bool,
    },
    /// Answer one question about a frames file (JSON array of frames).
    Ask {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long, default_value = "iqvic")]
        method: Method,
        /// Print a snapshot answer after every frame.
        #[arg(long)]
        incremental: bool,
    },
}

/// Paths of one run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn data(&self, file: &str) -> PathBuf {
        self.root.join("data").join(file)
    }

    pub fn base(&self) -> PathBuf {
        self.root.join("ckpt").join("base")
    }

    pub fn ckpt(&self, method: Method, part: &str) -> PathBuf {
        self.root.join("ckpt").join(method.name()).join(part)
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("report").join(file)
    }
}

fn mkdirs(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        mkdirs(parent)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Config file (if any) with `--seed` applied, validated.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut rc = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        rc.seed = s;
    }
    rc.validate()?;
    Ok(rc)
}

/// Runs one command; `Ok` carries the process exit code.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<u8> {
    let mut rc = resolve_config(cli)?;
    let layout = Layout::new(&cli.out);
    let name = match &cli.command {
        Command::Gen => "gen",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Ask { .. } => "ask",
    };
    match &cli.command {
        Command::Train { method, .. } | Command::Eval { method, .. } if !method.is_empty() => {
            rc.eval.methods = method.clone();
        }
        _ => {}
    }
    write_file(&cli.out.join(format!("{name}.resolved.toml")), &rc.to_toml())?;
    let w = |out: &mut dyn Write, s: &str| out.write_all(s.as_bytes()).map_err(|e| Error::io("stdout", e));
    match &cli.command {
        Command::Gen => {
            let summary = cmd_gen(&rc, &layout)?;
            w(stdout, &summary)?;
            Ok(exit::OK)
        }
        Command::Train { step, resume, .. } => {
            cmd_train(&rc, &layout, *step, *resume)?;
            w(stdout, "training finished\n")?;
            Ok(exit::OK)
        }
        Command::Eval {
            paper_accounting,
            method,
        } => {
            if *paper_accounting {
                w(stdout, &accounting_table(576, 10, &[64, 32, 1])?)?;
                if method.is_empty() {
                    return Ok(exit::OK);
                }
            }
            let report = cmd_eval(&rc, &layout)?;
            w(stdout, &report.to_text())?;
            let gates = report.gates(rc.eval.min_margin);
            for g in &gates {
                let mark = if g.passed { "PASS" } else { "FAIL" };
                w(stdout, &format!("[{mark}] {}: {}\n", g.name, g.detail))?;
            }
            Ok(if gates.iter().all(|g| g.passed) { exit::OK } else { exit::GATE })
        }
        Command::Ask {
            frames,
            question,
            method,
            incremental,
        } => {
            let text = cmd_ask(&rc, &layout, frames, question, *method, *incremental)?;
            w(stdout, &text)?;
            Ok(exit::OK)
        }
    }
}

/// Train/eval splits from disjoint seeds; returns a short summary.
pub fn cmd_gen(rc: &RunConfig, layout: &Layout) -> Result<String> {
    let d = &rc.data;
    let splits: [(&str, Vec<QASample>); 4] = [
        (
            "pretrain.jsonl",
            gen_pretraining_split(&rc.task, d.n_pretrain, d.pretrain_max_frames, rc.seed_for("pretrain"))?,
        ),
        (
            "single_frame.train.jsonl",
            gen_split(&rc.task, TaskTag::SingleFrame, d.n_single_train, rc.seed_for("single"))?,
        ),
        (
            "kv_retrieval.train.jsonl",
            gen_split(&rc.task, TaskTag::KvRetrieval, d.n_kv_train, rc.seed_for("kv-train"))?,
        ),
        (
            "kv_retrieval.eval.jsonl",
            gen_split(&rc.task, TaskTag::KvRetrieval, d.n_eval, rc.seed_for("kv-eval"))?,
        ),
    ];
    mkdirs(&layout.root.join("data"))?;
    let vocab = rc.task.vocabulary();
    write_file(&layout.data("vocab.txt"), &vocab.to_text())?;
    let mut summary = String::new();
    for (file, samples) in &splits {
        write_jsonl(&layout.data(file), samples)?;
        summary.push_str(&format!("{file}: {} samples\n", samples.len()));
    }
    let example = &splits[3].1[0];
    let frames = serde_json::to_string(&example.frames).map_err(|e| Error::format("frames", e))?;
    write_file(&layout.data("example_frames.json"), &(frames + "\n"))?;
    summary.push_str(&format!(
        "example_frames.json: {} frames, question \"{}\", gold \"{}\"\n",
        example.frames.len(),
        vocab.decode(&example.question),
        vocab.decode(&example.gold_answer)
    ));
    Ok(summary)
}

fn load_vocab(layout: &Layout) -> Result<Vocabulary> {
    let p = layout.data("vocab.txt");
    Vocabulary::from_text(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
}

fn eos_id(vocab: &Vocabulary) -> Result<usize> {
    vocab.id(EOS).ok_or_else(|| Error::Vocabulary(vec![EOS.into()]))
}

fn log_writer(path: &Path, append: bool) -> Result<File> {
    if let Some(parent) = path.parent() {
        mkdirs(parent)?;
    }
    OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Frozen featurizer shared by every method of a run.
pub fn frame_encoder(rc: &RunConfig) -> FrameEncoder {
    FrameEncoder::new(
        rc.task.alphabet_size(),
        rc.task.patches(),
        rc.task.d_feature,
        rc.seed_for("encoder"),
    )
}

/// Fresh, untrained base model and projector.
pub fn fresh_base(rc: &RunConfig) -> Result<BaseSystem> {
    Ok(BaseSystem {
        model: TransformerModel::new(rc.model.clone(), rc.seed_for("base"))?.without_lora(),
        projector: Projector::new(rc.task.d_feature, rc.model.d_model, rc.seed_for("projector")),
    })
}

/// The decoder both adaptation steps start from: base weights, fresh
/// zero-delta adapters.
pub fn initial_decoder(rc: &RunConfig, base: &TransformerModel) -> Result<TransformerModel> {
    base.adapted(
        rc.model.lora_rank,
        rc.model.lora_alpha,
        rc.model.lora_dropout,
        rc.seed_for("decoder-lora"),
    )
}

pub fn initial_compressor(rc: &RunConfig, method: Method, base: &TransformerModel) -> Result<FrameCompressor> {
    let c = rc.train.context_tokens;
    Ok(match method {
        Method::Iqvic => FrameCompressor::Iqvic {
            model: base.adapted(
                rc.model.lora_rank,
                rc.model.lora_alpha,
                rc.model.lora_dropout,
                rc.seed_for("compressor-lora"),
            )?,
            lookup: ContextTokenLookup::new(c, rc.model.d_model, rc.seed_for("lookup"))?,
        },
        Method::Avgpool => FrameCompressor::Avgpool { context_tokens: c },
        Method::Truncate => FrameCompressor::Truncate { context_tokens: c },
    })
}

pub fn assemble(
    rc: &RunConfig,
    vocab: Vocabulary,
    encoder: FrameEncoder,
    projector: Projector,
    compressor: FrameCompressor,
    decoder: TransformerModel,
) -> Pipeline {
    let mut p = Pipeline::new(vocab, encoder, projector, compressor, decoder, rc.train.memory_capacity);
    p.order = rc.train.prompt_order;
    p.max_new = rc.eval.max_new;
    p
}

fn optimizer_or_resume(rc: &RunConfig, stage: Stage, path: &Path, resume: bool) -> Result<OptimizerState> {
    if resume && path.exists() {
        let s = archive::load_optimizer(path)?;
        log::info!("resuming {} from step {}", stage.name(), s.step);
        Ok(s)
    } else {
        Ok(OptimizerState::new(rc.train.optimizer(stage)))
    }
}

pub fn cmd_train(rc: &RunConfig, layout: &Layout, step: StepArg, resume: bool) -> Result<()> {
    let vocab = load_vocab(layout)?;
    let eos = eos_id(&vocab)?;
    let encoder = frame_encoder(rc);
    mkdirs(&layout.root.join("ckpt"))?;

    if matches!(step, StepArg::Base | StepArg::All) {
        let samples = read_jsonl(&layout.data("pretrain.jsonl"))?;
        let optim_path = layout.root.join("ckpt").join("base.optim");
        let mut state = optimizer_or_resume(rc, Stage::Base, &optim_path, resume)?;
        let mut base = if resume && state.step > 0 {
            let (model, projector) = archive::load_base(&layout.base())?;
            BaseSystem { model, projector }
        } else {
            fresh_base(rc)?
        };
        let mut log = log_writer(&layout.log("base"), resume)?;
        let base_dir = layout.base();
        let mut save = |b: &BaseSystem, s: &OptimizerState| -> Result<()> {
            archive::save_base(&base_dir, &b.model, &b.projector)?;
            archive::save_optimizer(&optim_path, s)
        };
        let mut hooks = TrainHooks {
            log: Some(&mut log),
            checkpoint: Some(&mut save),
        };
        pretrain_base(&mut base, &encoder, &samples, eos, &rc.train, rc.seed_for("train-base"), &mut state, &mut hooks)?;
    }

    for &method in &rc.eval.methods {
        if matches!(step, StepArg::One | StepArg::All) {
            let samples = read_jsonl(&layout.data("single_frame.train.jsonl"))?;
            let (base, base_projector) = archive::load_base(&layout.base())?;
            let optim_path = layout.ckpt(method, "step1.optim");
            let mut state = optimizer_or_resume(rc, Stage::Step1, &optim_path, resume)?;
            let (encoder, projector, compressor) = if resume && state.step > 0 {
                archive::load_compressor_side(&layout.ckpt(method, "compressor"))?
            } else {
                (encoder.clone(), base_projector, initial_compressor(rc, method, &base)?)
            };
            let decoder = initial_decoder(rc, &base)?;
            let mut p = assemble(rc, vocab.clone(), encoder, projector, compressor, decoder);
            let mut log = log_writer(&layout.log(&format!("{method}.step1")), resume)?;
            let dir = layout.ckpt(method, "compressor");
            let mut save = |p: &Pipeline, s: &OptimizerState| -> Result<()> {
                archive::save_compressor_side(&dir, &p.encoder, &p.projector, &p.compressor)?;
                archive::save_optimizer(&optim_path, s)
            };
            let mut hooks = TrainHooks {
                log: Some(&mut log),
                checkpoint: Some(&mut save),
            };
            train_step1(&mut p, &samples, eos, &rc.train, rc.seed_for("train-step1"), &mut state, &mut hooks)?;
        }
        if matches!(step, StepArg::Two | StepArg::All) {
            let samples = read_jsonl(&layout.data("kv_retrieval.train.jsonl"))?;
            let (encoder, projector, compressor) = archive::load_compressor_side(&layout.ckpt(method, "compressor"))?;
            let optim_path = layout.ckpt(method, "step2.optim");
            let mut state = optimizer_or_resume(rc, Stage::Step2, &optim_path, resume)?;
            let decoder = if resume && state.step > 0 {
                archive::load_decoder_side(&layout.ckpt(method, "decoder"))?
            } else {
                let (base, _) = archive::load_base(&layout.base())?;
                initial_decoder(rc, &base)?
            };
            let mut p = assemble(rc, vocab.clone(), encoder, projector, compressor, decoder);
            let mut log = log_writer(&layout.log(&format!("{method}.step2")), resume)?;
            let dir = layout.ckpt(method, "decoder");
            let mut save = |p: &Pipeline, s: &OptimizerState| -> Result<()> {
                archive::save_decoder_side(&dir, &p.decoder)?;
                archive::save_optimizer(&optim_path, s)
            };
            let mut hooks = TrainHooks {
                log: Some(&mut log),
                checkpoint: Some(&mut save),
            };
            train_step2(&mut p, &samples, eos, &rc.train, rc.seed_for("train-step2"), &mut state, &mut hooks)?;
        }
    }
    Ok(())
}

/// Trained pipeline for `method` from the run's checkpoints.
pub fn load_pipeline(rc: &RunConfig, layout: &Layout, method: Method) -> Result<Pipeline> {
    let vocab = load_vocab(layout)?;
    let (encoder, projector, compressor) = archive::load_compressor_side(&layout.ckpt(method, "compressor"))?;
    let decoder = archive::load_decoder_side(&layout.ckpt(method, "decoder"))?;
    Ok(assemble(rc, vocab, encoder, projector, compressor, decoder))
}

pub fn cmd_eval(rc: &RunConfig, layout: &Layout) -> Result<BenchReport> {
    let samples = read_jsonl(&layout.data("kv_retrieval.eval.jsonl"))?;
    let mut rows = Vec::new();
    for &method in &rc.eval.methods {
        let p = load_pipeline(rc, layout, method)?;
        rows.push(evaluate(&p, &samples, rc.task.patches())?);
    }
    let report = BenchReport {
        seed: rc.seed,
        config_digest: rc.digest(),
        patches: rc.task.patches(),
        rows,
    };
    write_file(&layout.report("report.txt"), &report.to_text())?;
    write_file(&layout.report("report.json"), &(report.to_json() + "\n"))?;
    if rc.eval.plot {
        write_file(&layout.report("report.svg"), &report.to_svg())?;
    }
    Ok(report)
}

pub fn read_frames(path: &Path) -> Result<Vec<SymbolicFrame>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("frames file", format!("{}: {e}", path.display())))
}

pub fn cmd_ask(
    rc: &RunConfig,
    layout: &Layout,
    frames: &Path,
    question: &str,
    method: Method,
    incremental: bool,
) -> Result<String> {
    let p = load_pipeline(rc, layout, method)?;
    let q = p.vocab.encode(question)?;
    let frames = read_frames(frames)?;
    if frames.is_empty() {
        return Err(Error::format("frames file", "no frames"));
    }
    let mut out = String::new();
    let mut session = p.session(&q)?;
    for (t, f) in frames.iter().enumerate() {
        session.push(f)?;
        if incremental {
            let a = session.answer_now()?;
            out.push_str(&format!("after frame {}: {}\n", t + 1, a.text));
        }
    }
    let a = session.answer_now()?;
    let m = session.memory();
    out.push_str(&format!("answer: {}\n", a.text));
    out.push_str(&format!(
        "entries={} token_count={} merges={}\n",
        m.len(),
        m.token_count(),
        m.merge_log().len()
    ));
    Ok(out)
}
