//! Synthetic tasks, baseline compressors, and exact-match reports.

pub mod baselines;
pub mod report;
pub mod task;

pub use baselines::{avgpool_compress, avgpool_tokens, truncate_compress, truncate_tokens};
pub use report::{accounting_table, evaluate, score_samples, BenchReport, BenchRow, GateResult};
pub use task::{gen_kv_stream, gen_single_frame, gen_split, read_jsonl, write_jsonl, QASample, TaskConfig, TaskTag};
