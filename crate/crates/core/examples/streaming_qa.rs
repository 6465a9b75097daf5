//! Streaming answers: one frame at a time, answering from a snapshot after
//! each, and checking the batch pipeline agrees.
//!
//! Untrained weights by default. Point it at a trained run directory to see
//! real answers:
//!
//! ```text
//! cargo run --release --bin iqvic -- --config crates/core/configs/desk.toml --out run gen
//! cargo run --release --bin iqvic -- --config crates/core/configs/desk.toml --out run train
//! cargo run --release --example streaming_qa -- crates/core/configs/desk.toml run
//! ```

use std::path::Path;

use iqvic::bench::gen_kv_stream;
use iqvic::cli::{self, Layout, RunConfig};
use iqvic::pipeline::Method;

fn main() -> iqvic::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (rc, pipeline) = match args.as_slice() {
        [config, run] => {
            let rc = RunConfig::load(Path::new(config))?;
            let p = cli::load_pipeline(&rc, &Layout::new(Path::new(run)), Method::Iqvic)?;
            (rc, p)
        }
        _ => {
            let rc = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.toml"))?;
            let base = cli::fresh_base(&rc)?;
            let p = cli::assemble(
                &rc,
                rc.task.vocabulary(),
                cli::frame_encoder(&rc),
                base.projector.clone(),
                cli::initial_compressor(&rc, Method::Iqvic, &base.model)?,
                cli::initial_decoder(&rc, &base.model)?,
            );
            (rc, p)
        }
    };

    let sample = gen_kv_stream(&rc.task, rc.task.frames, 99, 0)?;
    println!(
        "question \"{}\", gold \"{}\"",
        pipeline.vocab.decode(&sample.question),
        pipeline.vocab.decode(&sample.gold_answer)
    );
    let mut session = pipeline.session(&sample.question)?;
    for frame in &sample.frames {
        session.push(frame)?;
        let a = session.answer_now()?;
        let m = session.memory();
        println!(
            "after frame {}: \"{}\"  entries={} tokens={} merges={}",
            session.frames_seen(),
            a.text,
            m.len(),
            m.token_count(),
            m.merge_log().len()
        );
    }
    let batch = pipeline.run_stream(&sample.frames, &sample.question)?;
    println!("batch answer \"{}\"", batch.answer.text);
    Ok(())
}
