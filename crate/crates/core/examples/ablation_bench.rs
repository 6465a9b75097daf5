//! The ablation end to end through the command layer: generate data, train
//! every configured method, evaluate, print the report and its gates.
//!
//! ```text
//! cargo run --release --example ablation_bench                 # smoke scale, seconds
//! cargo run --release --example ablation_bench -- crates/core/configs/desk.toml /tmp/desk
//! ```

use std::path::{Path, PathBuf};

use iqvic::cli::{self, Layout, RunConfig, StepArg};

fn main() -> iqvic::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = args
        .first()
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml"));
    let out = args
        .get(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("iqvic-ablation"));
    let rc = RunConfig::load(&config)?;
    rc.validate()?;
    let layout = Layout::new(&out);
    print!("{}", cli::cmd_gen(&rc, &layout)?);
    cli::cmd_train(&rc, &layout, StepArg::All, false)?;
    let report = cli::cmd_eval(&rc, &layout)?;
    print!("{}", report.to_text());
    for g in report.gates(rc.eval.min_margin) {
        println!("[{}] {}: {}", if g.passed { "PASS" } else { "FAIL" }, g.name, g.detail);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}
