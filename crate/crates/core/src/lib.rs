//! Transformer-based natural-language-to-code translation with
//! differentiable back-translation and cycle-consistency training.

pub mod error;
pub mod tensor;
pub mod backtrans;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod decode;
pub mod eval;
pub mod metrics;
pub mod strategy;
pub mod tokenizer;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
