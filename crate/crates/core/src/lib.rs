//! Retraining-free structured pruning for transformer encoders.
//!
//! The pipeline has three stages, all operating on per-head and per-filter
//! mask variables of a frozen model:
//!
//! 1. [`search`]: pick a binary mask that keeps the most Fisher importance
//!    under a FLOPs or latency budget.
//! 2. [`rearrange`]: swap pruned and kept units inside each layer using the
//!    block-diagonal Fisher to account for intra-layer interactions.
//! 3. [`tune`]: rescale the kept units of every sublayer by damped linear
//!    least squares so that the layer output of the original model is
//!    reconstructed.
//!
//! [`model`] provides a small masked encoder that supplies the losses,
//! mask gradients and activations the stages consume. The crate is
//! `no_std` and only needs `alloc`; file formats and the CLI live in the
//! `maskprune` crate.
#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod baseline;
pub mod cost;
pub mod error;
pub mod fisher;
pub mod mask;
pub mod model;
pub mod numerics;
pub mod rearrange;
pub mod rng;
pub mod search;
pub mod tune;

pub use cost::{FlopsCost, LatencyModel, LatencyTable, SeparableCost};
pub use error::{Error, Result};
pub use fisher::{FisherBlocks, FisherDiagonal, GradSample, ImportanceScores};
pub use mask::{MaskDims, MaskSet, UnitKind};
pub use model::{ModelShape, SampleBatch, ToyTransformer};
pub use numerics::Matrix;
pub use search::{Constraint, SearchResult};
