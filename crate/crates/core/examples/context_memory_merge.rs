//! A 3-entry memory fed six entries: each overflow averages the most similar
//! adjacent pair. The final memory is dumped to a checkpoint directory.

use iqvic::compressor::ContextEmbedding;
use iqvic::memory::ContextMemory;
use iqvic::tokenizer::QuestionHash;
use iqvic::Tensor;

fn main() -> iqvic::Result<()> {
    let rows = [
        [1.0, 0.0],
        [0.9, 0.1],
        [0.0, 1.0],
        [0.0, 0.9],
        [-1.0, 0.2],
        [0.7, 0.7],
    ];
    let mut memory = ContextMemory::new(3)?;
    for (t, r) in rows.iter().enumerate() {
        memory.insert(ContextEmbedding {
            tokens: Tensor::new(vec![1, 2], r.to_vec())?,
            source_index: t,
            question_hash: QuestionHash(0),
        })?;
        let view: Vec<String> = memory
            .entries()
            .iter()
            .map(|e| format!("f{}:{:?}", e.source_index, e.tokens.data()))
            .collect();
        println!("insert f{t}: {}", view.join("  "));
    }
    for m in memory.merge_log() {
        println!("insert {} merged entries {} and {} (cos {:.3})", m.step, m.index, m.index + 1, m.similarity);
    }
    let dir = std::env::temp_dir().join("iqvic-memory-dump");
    iqvic::archive::dump_memory(&dir, &memory)?;
    println!("dumped to {}", dir.display());
    Ok(())
}
