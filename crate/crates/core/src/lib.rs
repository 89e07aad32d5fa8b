//! Forget-before-learn knowledge updating on a desk-scale transformer.
//!
//! The crate trains a small decoder-only language model on a synthetic fact
//! corpus, then updates facts by subtracting a scaled old-knowledge task
//! vector before fine-tuning on the new facts. Full fine-tuning, LoRA and
//! L∞-constrained fine-tuning are provided as baselines, together with
//! reliability/generality/locality metrics and the diagnostic experiments
//! (forgetting-rate sweeps, timing, per-layer parameter distances).

pub mod arith;
pub mod checkpoint;
pub mod cli;
mod clock;
pub mod data;
pub mod editors;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod io;
pub mod lora;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
