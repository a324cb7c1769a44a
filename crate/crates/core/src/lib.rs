//! Streaming Bayesian inference for customer lifetime value.
//!
//! Batch HMC/NUTS regression is turned into one-pass mini-batch learning:
//! each mini-batch is scored with the posterior carried over from the
//! previous batches, the sampler is re-adapted with a short extra warmup,
//! and then refit on the new batch. The crate ships the fat-tailed
//! (Student-t) and Gaussian hierarchical LTV models, streaming categorical
//! encoding and target scaling, a synthetic data generator and a
//! prequential evaluation harness.
//!
//! Row-level loops (likelihood reductions, posterior predictive draws,
//! scoring) run on rayon when the `parallel` feature is enabled and fall
//! back to plain iterators otherwise. Both paths use the same fixed
//! chunking, so results are bit-identical across execution modes.

pub mod data_io;
pub mod diff;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod ltv;
pub mod nuts;
pub mod online;
pub mod preprocess;
pub mod run;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Execution;
