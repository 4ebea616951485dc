//! Calibration-free network compression by orthogonal projection.
//!
//! Structured magnitude pruning zeroes whole rows of a weight matrix, which
//! is a projection onto a coordinate subspace. Model folding replaces each
//! cluster of rows by its mean, which is a projection onto a
//! cluster-structured subspace. This crate builds both projections, folds
//! with Hartigan k-means (or an exhaustive oracle on small layers), shrinks
//! layer pairs accordingly, and checks that the fold error never exceeds the
//! pruning error at one extra rank.
//!
//! Modules:
//! - [`matrixio`]: NPY arrays and JSON checkpoint manifests
//! - [`projection`]: pruning/folding bases and their projections
//! - [`clustering`]: Hartigan and exact k-means
//! - [`compress`]: layer and checkpoint compression
//! - [`analysis`]: reconstruction errors, rank-slack sweeps, theorem checks
//! - [`toynet`]: small ReLU network for functional equivalence checks

pub mod analysis;
pub mod clustering;
pub mod compress;
pub mod error;
pub mod matrix;
pub mod matrixio;
pub mod projection;
pub mod sum;
pub mod toynet;

pub use error::{Error, Result};
pub use matrix::WeightMatrix;
