//! Question-conditioned streaming video QA at desk scale: a small autodiff
//! engine, a shared transformer with low-rank adapters, per-frame context
//! compression, a bounded similarity-merging memory, and the training and
//! benchmarking around them.

pub mod archive;
pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod compressor;
pub mod error;
pub mod frame;
pub mod memory;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod qa;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod transformer;

pub use autodiff::{AttentionMask, Graph, Gradients, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
