//! Base pretraining, step 1 and step 2 in process at smoke scale: per-epoch
//! losses and which parameter groups each step moved.

use std::path::Path;

use iqvic::bench::task::gen_pretraining_split;
use iqvic::bench::{evaluate, gen_split, TaskTag};
use iqvic::cli::{self, RunConfig};
use iqvic::optim::OptimizerState;
use iqvic::params::ParamSet;
use iqvic::pipeline::Method;
use iqvic::train::{epoch_means, pretrain_base, train_step1, train_step2, Stage, TrainHooks};

fn fingerprint(p: &dyn ParamSet, prefix: &str) -> f64 {
    let mut s = 0.0;
    p.visit_params(&mut |n, t| {
        if n.starts_with(prefix) {
            s += t.data().iter().enumerate().map(|(i, x)| x * (i as f64 + 1.0).sin()).sum::<f64>();
        }
    });
    s
}

fn main() -> iqvic::Result<()> {
    let mut rc = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml"))?;
    rc.train.base_epochs = 30;
    rc.train.step1_epochs = 10;
    rc.train.step2_epochs = 10;
    let (task, cfg) = (&rc.task, &rc.train);
    let encoder = cli::frame_encoder(&rc);
    let eos = 1;

    let mut base = cli::fresh_base(&rc)?;
    let pre = gen_pretraining_split(task, 64, 1, 1)?;
    let mut st = OptimizerState::new(cfg.optimizer(Stage::Base));
    let r = pretrain_base(&mut base, &encoder, &pre, eos, cfg, 0, &mut st, &mut TrainHooks::default())?;
    println!("base   epochs {:?}", rounded(&epoch_means(&r)));

    let mut p = cli::assemble(
        &rc,
        task.vocabulary(),
        encoder,
        base.projector.clone(),
        cli::initial_compressor(&rc, Method::Iqvic, &base.model)?,
        cli::initial_decoder(&rc, &base.model)?,
    );
    let groups = ["projector.", "compressor.", "lookup.", "decoder."];
    let before: Vec<f64> = groups.iter().map(|g| fingerprint(&p, g)).collect();

    let single = gen_split(task, TaskTag::SingleFrame, 64, 2)?;
    let mut st = OptimizerState::new(cfg.optimizer(Stage::Step1));
    let r = train_step1(&mut p, &single, eos, cfg, 0, &mut st, &mut TrainHooks::default())?;
    println!("step 1 epochs {:?}", rounded(&epoch_means(&r)));
    let after1: Vec<f64> = groups.iter().map(|g| fingerprint(&p, g)).collect();

    let kv = gen_split(task, TaskTag::KvRetrieval, 64, 3)?;
    let eval = gen_split(task, TaskTag::KvRetrieval, 64, 4)?;
    let untrained = evaluate(&p, &eval, task.patches())?.accuracy;
    let mut st = OptimizerState::new(cfg.optimizer(Stage::Step2));
    let r = train_step2(&mut p, &kv, eos, cfg, 0, &mut st, &mut TrainHooks::default())?;
    println!("step 2 epochs {:?}", rounded(&epoch_means(&r)));
    let after2: Vec<f64> = groups.iter().map(|g| fingerprint(&p, g)).collect();

    for (i, g) in groups.iter().enumerate() {
        println!(
            "{g:<12} step 1 {:<7} step 2 {}",
            if after1[i] != before[i] { "moved" } else { "frozen" },
            if after2[i] != after1[i] { "moved" } else { "frozen" }
        );
    }
    let trained = evaluate(&p, &eval, task.patches())?.accuracy;
    println!("held-out streams: {untrained:.1}% before step 2, {trained:.1}% after");
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
