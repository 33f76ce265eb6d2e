//! Universal Cognitive Kernel with differentiable symbolic planning.
//!
//! The crate contains everything needed to generate the three graph
//! constraint-reasoning benchmarks (gridworld planning, CNF satisfiability,
//! directed reachability), train the kernel on them, and evaluate it:
//!
//! - [`tensor`]: dense `f64` tensors with a reverse-mode tape;
//! - [`projection`]: sparsemax and softmax simplex projections;
//! - [`attention`]: masked graph attention;
//! - [`dsp`]: rule activation, node selection, gated effects, feasibility channels;
//! - [`model`] and [`checkpoint`]: the full kernel and its on-disk format;
//! - [`tasks`]: generators, exact oracles, encodings and dataset files;
//! - [`training`], [`evaluation`], [`ablation`]: optimization and measurement;
//! - [`commands`]: the reproducible command layer behind the `uck` binary.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod commands;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod projection;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
