//! Toy decoder-only transformer: forward passes, block traces, sampling and
//! training.

mod block;
mod config;
pub mod corpus;
mod sample;
pub mod tokenizer;
mod train;
mod transformer;

pub use block::{BlockCtx, BlockVars, Linear, LinearInputs, Norm, NormVars, TransformerBlock, Watch};
pub use config::{ModelConfig, NormKind};
pub use sample::{argmax, sample, DecodeCache, SamplingPolicy};
pub use train::{train_toy, train_toy_with, TrainConfig, TrainLog};
pub use transformer::{is_norm_tensor, BlockTrace, ModelVars, TransformerModel};
