//! One frame through the featurizer and the three compressors.

use iqvic::bench::{TaskConfig, TaskTag};
use iqvic::compressor::ContextTokenLookup;
use iqvic::frame::{FrameEncoder, Projector};
use iqvic::pipeline::FrameCompressor;
use iqvic::transformer::{TransformerConfig, TransformerModel};

fn main() -> iqvic::Result<()> {
    let task = TaskConfig::default();
    let vocab = task.vocabulary();
    let sample = &iqvic::bench::gen_split(&task, TaskTag::SingleFrame, 1, 5)?[0];
    let frame = &sample.frames[0];
    println!("frame cells {:?}", frame.cells);
    println!("question \"{}\"", vocab.decode(&sample.question));

    let encoder = FrameEncoder::new(task.alphabet_size(), task.patches(), task.d_feature, 1);
    let projector = Projector::new(task.d_feature, 64, 2);
    let e_v = projector.project(&encoder.encode(frame)?)?;
    println!("e_v {:?}", e_v.tokens.shape());

    let cfg = TransformerConfig {
        vocab_size: vocab.len(),
        max_positions: 64,
        ..Default::default()
    };
    let base = TransformerModel::new(cfg, 3)?.without_lora();
    let c = 4;
    for comp in [
        FrameCompressor::Iqvic {
            model: base.adapted(4, 8.0, 0.05, 4)?,
            lookup: ContextTokenLookup::new(c, 64, 5)?,
        },
        FrameCompressor::Avgpool { context_tokens: c },
        FrameCompressor::Truncate { context_tokens: c },
    ] {
        let e_c = comp.compress(&sample.question, &e_v)?;
        let row0: Vec<String> = e_c.tokens.data()[..4].iter().map(|x| format!("{x:+.3}")).collect();
        println!(
            "{:<8} -> {:?}, question {}, row 0 starts [{}]",
            comp.method().name(),
            e_c.tokens.shape(),
            e_c.question_hash,
            row0.join(", ")
        );
    }
    Ok(())
}
