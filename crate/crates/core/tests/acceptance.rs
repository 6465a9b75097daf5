//! Acceptance criteria, one `[PASS]`/`[FAIL]` line each.
//!
//! `IQVIC_ACCEPTANCE_ONLY=1,2,9` runs a subset while iterating locally; the
//! default runs everything, including the trained ablation (tens of minutes
//! on one core).

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use iqvic::bench::task::{gen_kv_stream, TaskConfig};
use iqvic::cli::{self, Cli, Layout, RunConfig, StepArg};
use iqvic::compressor::{ContextEmbedding, ContextTokenLookup};
use iqvic::frame::{FrameEncoder, Projector};
use iqvic::memory::ContextMemory;
use iqvic::optim::OptimizerState;
use iqvic::params::ParamSet;
use iqvic::pipeline::{FrameCompressor, Method, Pipeline};
use iqvic::tokenizer::QuestionHash;
use iqvic::train::{train_step1, train_step2, Stage, TrainConfig, TrainHooks};
use iqvic::transformer::{forward_embeddings, TransformerConfig, TransformerModel};
use iqvic::{AttentionMask, Graph, Result, Tensor};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn work_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&d);
    d
}

// 1 ---------------------------------------------------------------------

fn gradcheck_model() -> TransformerModel {
    let cfg = TransformerConfig {
        d_model: 32,
        n_heads: 4,
        n_layers: 2,
        d_ff: 64,
        vocab_size: 12,
        max_positions: 8,
        lora_rank: 2,
        lora_alpha: 4.0,
        lora_dropout: 0.0,
    };
    let mut m = TransformerModel::new(cfg, 21).unwrap();
    // Non-zero B so the adapter path contributes to every gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    m.visit_params_mut(&mut |name, t| {
        if name.ends_with(".b") {
            for x in t.data_mut() {
                *x = rng.random_range(-0.1..0.1);
            }
        }
    });
    m
}

fn lm_loss(model: &TransformerModel, ids: &[usize], targets: &[usize]) -> (f64, iqvic::params::GradMap) {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let x = b.embed_tokens(&mut g, ids).unwrap();
    let h = b.forward_embeddings(&mut g, x, AttentionMask::Causal, None).unwrap();
    let logits = b.logits(&mut g, h).unwrap();
    let loss = g.cross_entropy(logits, targets, &vec![true; targets.len()]).unwrap();
    let grads = g.backward(loss).unwrap();
    (g.value(loss).item(), b.collect_grads(&g, &grads))
}

fn criterion_gradcheck() -> Result<Outcome> {
    let mut model = gradcheck_model();
    let ids = [3, 7, 1, 11, 4, 9];
    let targets = [7, 1, 11, 4, 9, 2];
    let (_, analytic) = lm_loss(&model, &ids, &targets);
    let mut names = Vec::new();
    model.visit_params(&mut |n, t| names.push((n.to_string(), t.len())));
    let h = 1e-5;
    let (mut worst, mut worst_name, mut checked) = (0.0f64, String::new(), 0usize);
    for (name, len) in &names {
        let a = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no analytic gradient for trainable parameter {name}"));
        for i in 0..*len {
            let nudge = |model: &mut TransformerModel, d: f64| {
                model.visit_params_mut(&mut |n, t| {
                    if n == name {
                        t.data_mut()[i] += d;
                    }
                })
            };
            nudge(&mut model, h);
            let plus = lm_loss(&model, &ids, &targets).0;
            nudge(&mut model, -2.0 * h);
            let minus = lm_loss(&model, &ids, &targets).0;
            nudge(&mut model, h);
            let fd = (plus - minus) / (2.0 * h);
            let an = a.data()[i];
            let rel = (an - fd).abs() / (an.abs() + fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_name = format!("{name}[{i}]");
            }
            checked += 1;
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{checked} entries over {} tensors, max rel err {worst:.2e} at {worst_name}", names.len()),
    )
}

// 2 ---------------------------------------------------------------------

fn criterion_merge_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut merges = 0;
    for s in 0..1000 {
        let t_len = rng.random_range(1..=50);
        let cap = rng.random_range(1..=8);
        let c = rng.random_range(1..=4);
        let d = rng.random_range(1..=32 / c);
        // Every third stream uses small integers so exact ties occur.
        let integral = s % 3 == 0;
        let stream: Vec<Vec<f64>> = (0..t_len)
            .map(|_| {
                (0..c * d)
                    .map(|_| if integral { rng.random_range(-2i32..=2) as f64 } else { rng.random_range(-1.0..1.0) })
                    .collect()
            })
            .collect();
        let mut mem = ContextMemory::new(cap)?;
        for (t, e) in stream.iter().enumerate() {
            mem.insert(ContextEmbedding {
                tokens: Tensor::new(vec![c, d], e.clone())?,
                source_index: t,
                question_hash: QuestionHash(s),
            })?;
            if mem.len() > cap {
                return outcome(false, format!("stream {s}: {} entries over capacity {cap}", mem.len()));
            }
        }
        merges += mem.merge_log().len();
        let expected = common::replay_merges(&stream, cap);
        let got: Vec<Vec<f64>> = mem.entries().iter().map(|e| e.tokens.data().to_vec()).collect();
        let same = expected.len() == got.len()
            && expected
                .iter()
                .zip(&got)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        if !same {
            return outcome(false, format!("stream {s} (T={t_len}, L={cap}) differs from the replay"));
        }
    }
    outcome(true, format!("1000 streams bitwise equal, {merges} merges"))
}

// 3 ---------------------------------------------------------------------

fn criterion_accounting() -> Result<Outcome> {
    let mut mem = ContextMemory::new(10)?;
    for t in 0..25 {
        mem.insert(ContextEmbedding {
            tokens: Tensor::full(&[64, 2], t as f64 + 1.0),
            source_index: t,
            question_hash: QuestionHash(0),
        })?;
    }
    let table = iqvic::bench::accounting_table(576, 10, &[64, 32, 1])?;
    let ratios: Vec<String> = table
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().last().unwrap_or_default().to_string())
        .collect();
    let row = iqvic::bench::BenchRow::new(Method::Iqvic, 64, 10, 576, 0, 1)?;
    let ok = mem.token_count() == 640 && row.memory_tokens == 640 && ratios == ["11%", "5.6%", "0.2%"];
    outcome(ok, format!("full memory {} tokens, ratios {}", mem.token_count(), ratios.join(" ")))
}

// 4 ---------------------------------------------------------------------

fn criterion_lora_identity() -> Result<Outcome> {
    let cfg = TransformerConfig {
        d_model: 64,
        vocab_size: 40,
        max_positions: 32,
        ..Default::default()
    };
    let base = TransformerModel::new(cfg, 4)?.without_lora();
    let adapted = base.adapted(8, 16.0, 0.0, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..100 {
        let n = rng.random_range(1..=32);
        let x = Tensor::uniform(&[n, 64], -2.0, 2.0, &mut rng);
        let a = forward_embeddings(&base, &x, AttentionMask::Causal)?;
        let b = forward_embeddings(&adapted, &x, AttentionMask::Causal)?;
        if a.data().iter().zip(b.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return outcome(false, format!("input {trial} differs"));
        }
    }
    outcome(true, "100 inputs bit-identical".into())
}

// 5 ---------------------------------------------------------------------

fn criterion_causality() -> Result<Outcome> {
    let cfg = TransformerConfig {
        vocab_size: 40,
        max_positions: 24,
        ..Default::default()
    };
    let model = TransformerModel::new(cfg, 6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let n = rng.random_range(2..=24);
        let j = rng.random_range(1..n);
        let x = Tensor::uniform(&[n, 64], -1.0, 1.0, &mut rng);
        let mut y = x.clone();
        for v in &mut y.data_mut()[j * 64..(j + 1) * 64] {
            *v += rng.random_range(-5.0..5.0);
        }
        let a = forward_embeddings(&model, &x, AttentionMask::Causal)?;
        let b = forward_embeddings(&model, &y, AttentionMask::Causal)?;
        if a.data()[..j * 64] != b.data()[..j * 64] {
            return outcome(false, format!("trial {trial}: perturbing row {j} leaked backwards"));
        }
        if a.data()[j * 64..] == b.data()[j * 64..] {
            return outcome(false, format!("trial {trial}: perturbation had no effect"));
        }
    }
    outcome(true, "100 trials, earlier rows exact".into())
}

// 6, 7 ------------------------------------------------------------------

struct Trained {
    desk: RunConfig,
    desk_dir: PathBuf,
    acc: Vec<(Method, usize, f64)>,
    /// IQViC with its step-2 decoder swapped for the untrained one.
    before_step2: f64,
    minutes: f64,
}

fn accuracy_of(trained: &Trained, method: Method, c: usize) -> f64 {
    trained
        .acc
        .iter()
        .find(|(m, cc, _)| *m == method && *cc == c)
        .map(|r| r.2)
        .unwrap_or(f64::NAN)
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

fn train_desk() -> Result<Trained> {
    let start = Instant::now();
    let desk = RunConfig::load(&configs_dir().join("desk.toml"))?;
    desk.validate()?;
    let desk_dir = work_dir("desk");
    let layout = Layout::new(&desk_dir);
    cli::cmd_gen(&desk, &layout)?;
    cli::cmd_train(&desk, &layout, StepArg::All, false)?;
    let report = cli::cmd_eval(&desk, &layout)?;
    let mut acc: Vec<_> = report
        .rows
        .iter()
        .map(|r| (r.method, r.context_tokens, r.accuracy))
        .collect();
    eprintln!("{}", report.to_text());
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let before_step2 = {
        let mut p = cli::load_pipeline(&desk, &layout, Method::Iqvic)?;
        let (base, _) = iqvic::archive::load_base(&layout.base())?;
        p.decoder = cli::initial_decoder(&desk, &base)?;
        let eval = iqvic::bench::read_jsonl(&layout.data("kv_retrieval.eval.jsonl"))?;
        iqvic::bench::evaluate(&p, &eval, desk.task.patches())?.accuracy
    };

    // The budget sweep reuses the data and base model of the main run.
    for c in [4, 1] {
        let mut rc = desk.clone();
        rc.train.context_tokens = c;
        rc.eval.methods = vec![Method::Iqvic];
        let dir = work_dir(&format!("desk_c{c}"));
        copy_tree(&desk_dir.join("data"), &dir.join("data")).map_err(|e| iqvic::Error::io(&dir, e))?;
        copy_tree(&layout.base(), &Layout::new(&dir).base()).map_err(|e| iqvic::Error::io(&dir, e))?;
        let l = Layout::new(&dir);
        cli::cmd_train(&rc, &l, StepArg::One, false)?;
        cli::cmd_train(&rc, &l, StepArg::Two, false)?;
        let r = cli::cmd_eval(&rc, &l)?;
        eprintln!("{}", r.to_text());
        acc.extend(r.rows.iter().map(|r| (r.method, r.context_tokens, r.accuracy)));
    }
    Ok(Trained {
        desk,
        desk_dir,
        acc,
        before_step2,
        minutes,
    })
}

fn criterion_ablation(t: &Trained) -> Result<Outcome> {
    let c = t.desk.train.context_tokens;
    let (iq, avg) = (accuracy_of(t, Method::Iqvic, c), accuracy_of(t, Method::Avgpool, c));
    let tc = &t.desk.task;
    outcome(
        iq - avg >= 10.0,
        format!(
            "T={} L={} C={c} eval n={}: iqvic {iq:.1} vs avgpool {avg:.1} (margin {:+.1}); \
             iqvic before step 2 {:.1}; gen+train+eval {:.1} min",
            tc.frames,
            t.desk.train.memory_capacity,
            t.desk.data.n_eval,
            iq - avg,
            t.before_step2,
            t.minutes
        ),
    )
}

fn criterion_monotonic(t: &Trained) -> Result<Outcome> {
    let (a8, a4, a1) = (
        accuracy_of(t, Method::Iqvic, 8),
        accuracy_of(t, Method::Iqvic, 4),
        accuracy_of(t, Method::Iqvic, 1),
    );
    outcome(
        a8 >= a4 - 2.0 && a4 >= a1 - 2.0,
        format!("iqvic C=8 {a8:.1}, C=4 {a4:.1}, C=1 {a1:.1}"),
    )
}

// 8 ---------------------------------------------------------------------

fn params_with(p: &dyn ParamSet, prefixes: &[&str]) -> Vec<(String, Vec<u64>)> {
    let mut out = Vec::new();
    p.visit_params(&mut |n, t| {
        if prefixes.iter().any(|pre| n.starts_with(pre)) {
            out.push((n.to_string(), t.data().iter().map(|x| x.to_bits()).collect()));
        }
    });
    out
}

fn criterion_freeze() -> Result<Outcome> {
    let task = TaskConfig::default();
    let vocab = task.vocabulary();
    let mcfg = TransformerConfig {
        vocab_size: vocab.len(),
        max_positions: 64,
        ..Default::default()
    };
    let base = TransformerModel::new(mcfg, 8)?.without_lora();
    let mut p = Pipeline::new(
        vocab,
        FrameEncoder::new(task.alphabet_size(), task.patches(), task.d_feature, 1),
        Projector::new(task.d_feature, 64, 2),
        FrameCompressor::Iqvic {
            model: base.adapted(4, 8.0, 0.05, 3)?,
            lookup: ContextTokenLookup::new(8, 64, 4)?,
        },
        base.adapted(4, 8.0, 0.05, 5)?,
        4,
    );
    let cfg = TrainConfig {
        batch_size: 2,
        grad_accum_steps: 2,
        learning_rate: 1e-2,
        context_tokens: 8,
        memory_capacity: 4,
        step1_epochs: 1,
        step2_epochs: 1,
        ..Default::default()
    };
    let single = iqvic::bench::gen_split(&task, iqvic::bench::TaskTag::SingleFrame, 8, 1)?;
    let kv = iqvic::bench::gen_split(&task, iqvic::bench::TaskTag::KvRetrieval, 8, 2)?;
    let upstream = ["projector.", "compressor.", "lookup."];

    let decoder_before = params_with(&p, &["decoder."]);
    let upstream_before = params_with(&p, &upstream);
    let mut st = OptimizerState::new(cfg.optimizer(Stage::Step1));
    train_step1(&mut p, &single, 1, &cfg, 0, &mut st, &mut TrainHooks::default())?;
    let step1_ok = params_with(&p, &["decoder."]) == decoder_before;
    let step1_moved = params_with(&p, &upstream) != upstream_before;

    let upstream_before = params_with(&p, &upstream);
    let decoder_before = params_with(&p, &["decoder."]);
    let mut st = OptimizerState::new(cfg.optimizer(Stage::Step2));
    train_step2(&mut p, &kv, 1, &cfg, 0, &mut st, &mut TrainHooks::default())?;
    let step2_ok = params_with(&p, &upstream) == upstream_before;
    let step2_moved = params_with(&p, &["decoder."]) != decoder_before;
    outcome(
        step1_ok && step2_ok && step1_moved && step2_moved,
        format!(
            "step 1 decoder unchanged: {step1_ok}, step 2 projector/compressor/lookup unchanged: {step2_ok} \
             (trainable sides moved: {step1_moved}/{step2_moved})"
        ),
    )
}

// 9 ---------------------------------------------------------------------

fn criterion_streaming(pipeline: &Pipeline, task: &TaskConfig) -> Result<Outcome> {
    let mut compared = 0;
    for i in 0..50 {
        let s = gen_kv_stream(task, task.frames, 909, i)?;
        let mut session = pipeline.session(&s.question)?;
        for t in 1..=s.frames.len() {
            session.push(&s.frames[t - 1])?;
            let live = session.answer_now()?;
            let batch = pipeline.run_stream(&s.frames[..t], &s.question)?.answer;
            if live.tokens != batch.tokens {
                return outcome(false, format!("stream {i}, prefix {t}: {:?} vs {:?}", live.text, batch.text));
            }
            compared += 1;
        }
    }
    outcome(true, format!("{compared} prefixes of 50 streams token-exact"))
}

// 10 --------------------------------------------------------------------

fn cli_run(args: &[&str]) -> Result<u8> {
    let cli = Cli::try_parse_from(args).map_err(|e| iqvic::Error::Config(e.to_string()))?;
    cli::run(&cli, &mut std::io::sink())
}

fn criterion_determinism() -> Result<Outcome> {
    let smoke = configs_dir().join("smoke.toml");
    let smoke = smoke.to_str().expect("utf-8 path");
    let mut reports = Vec::new();
    for run in ["det_a", "det_b"] {
        let dir = work_dir(run);
        let out = dir.to_str().expect("utf-8 path");
        for cmd in [&["gen"][..], &["train", "--step", "all"], &["eval"]] {
            let mut args = vec!["iqvic", "--config", smoke, "--out", out];
            args.extend_from_slice(cmd);
            let code = cli_run(&args)?;
            if code != cli::exit::OK && code != cli::exit::GATE {
                return outcome(false, format!("{cmd:?} exited with {code}"));
            }
        }
        let read = |f: &str| std::fs::read(dir.join("report").join(f)).unwrap_or_default();
        reports.push((read("report.txt"), read("report.json"), read("report.svg")));
    }
    let same = reports[0] == reports[1] && !reports[0].0.is_empty();
    outcome(
        same,
        format!("report.txt/json/svg {} across two runs", if same { "byte-identical" } else { "differ" }),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("IQVIC_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut failed = 0;
    let mut report = |n: u32, name: &str, r: Result<Outcome>, started: Instant| {
        let secs = started.elapsed().as_secs_f64();
        let (passed, detail) = match r {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failed += 1;
        }
        println!("[{}] {n:>2} {name}: {detail} ({secs:.1}s)", if passed { "PASS" } else { "FAIL" });
    };

    let simple: [(u32, &str, fn() -> Result<Outcome>); 6] = [
        (1, "gradient oracle", criterion_gradcheck),
        (2, "memory merge oracle", criterion_merge_oracle),
        (3, "memory accounting", criterion_accounting),
        (4, "LoRA identity at init", criterion_lora_identity),
        (5, "causality", criterion_causality),
        (8, "freeze contracts", criterion_freeze),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            let t = Instant::now();
            report(n, name, f(), t);
        }
    }

    if wanted(6) || wanted(7) || wanted(9) {
        let t = Instant::now();
        match train_desk() {
            Ok(trained) => {
                if wanted(6) {
                    report(6, "directional ablation", criterion_ablation(&trained), t);
                }
                if wanted(7) {
                    report(7, "context budget monotonicity", criterion_monotonic(&trained), Instant::now());
                }
                if wanted(9) {
                    let t = Instant::now();
                    let r = cli::load_pipeline(&trained.desk, &Layout::new(&trained.desk_dir), Method::Iqvic)
                        .and_then(|p| criterion_streaming(&p, &trained.desk.task));
                    report(9, "streaming equivalence", r, t);
                }
            }
            Err(e) => {
                for (n, name) in [(6, "directional ablation"), (7, "context budget monotonicity"), (9, "streaming equivalence")] {
                    if wanted(n) {
                        report(n, name, Err(iqvic::Error::Contract(format!("desk training failed: {e}"))), t);
                    }
                }
            }
        }
    }
    if wanted(10) {
        let t = Instant::now();
        report(10, "determinism", criterion_determinism(), t);
    }

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
