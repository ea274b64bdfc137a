//! Multi-head scan over 2D patch grids.
//!
//! The library turns an H x W grid of patch embeddings into 1D sequences
//! along several traversal orders (raster, snake, diagonal, spiral), runs a
//! selective state-space block over each sequence, re-aligns the results into
//! position-matched sections, and fuses them per head before the heads are
//! concatenated and normalized.
//!
//! Modules:
//! - [`tensor`]: dense row-major f64 arrays with reproducible reductions
//! - [`routes`]: scan-route permutations, gather/scatter, adjacency checks
//! - [`ssm`]: discretization, recurrence, convolution form, selective scan
//! - [`esf`]: per-head fusion of route sections
//! - [`config`], [`weights`]: module hyperparameters and learnable arrays
//! - [`forward`]: the end-to-end module forward pass
//! - [`grad`]: hand-derived backward passes and the finite-difference harness
//! - [`checks`]: named property suites
//! - [`bench`]: gather/scatter strategy benchmark
//! - [`cli`]: command-line surface over all of the above

#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod checks;
pub mod cli;
pub mod config;
pub mod error;
pub mod esf;
pub mod forward;
pub mod grad;
pub mod routes;
pub mod ssm;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Reduction, Tensor};
