//! Residual-stream circuit and sheaf discovery on a tiny layer-norm-free
//! transformer.
//!
//! The crate is `no_std` + `alloc`: everything here is pure computation over
//! in-memory values. File formats, the CLI and experiment pipelines live in the
//! `sheaf-lab` companion crate.
//!
//! Module map:
//!
//! - [`array`] and [`tape`]: dense `f64` arrays and a reverse-mode tape.
//! - [`model`]: the bias-free, norm-free decoder and its trainer.
//! - [`graph`]: the residual-stream computation graph and masked execution
//!   under zero ablation.
//! - [`tasks`]: synthetic IOI-style and number-agreement datasets.
//! - [`discovery`]: Gumbel-sigmoid mask learning with overlap repulsion, plus
//!   greedy-pruning and attribution baselines.
//! - [`analysis`]: overlap metrics, intersection cores, exhaustive core search.
//! - [`theory`]: edge signatures, quantised subset-sum collisions and the
//!   counting/margin bounds behind low-overlap faithful circuits.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod array;
pub mod batch;
pub mod discovery;
mod error;
pub mod gradcheck;
pub mod graph;
mod math;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tasks;
pub mod theory;

pub use array::Array;
pub use error::{Error, Result};
pub use graph::{ComputationGraph, EdgeMask, Sheaf};
pub use model::{ModelConfig, Parameters, TrainConfig};
pub use tape::{Gradients, Tape, Var};
