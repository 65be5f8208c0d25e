//! Null-space constrained cross-frozen low-rank adaptation for dense weight
//! matrices.
//!
//! The library adapts a frozen weight `W0` with a low-rank update built from
//! two cross-frozen factor pairs and a per-channel scaling vector. In
//! null-space mode the frozen factors are null-space bases of `W0` obtained by
//! SVD, and the trainable up-projection is confined to the left null space by
//! the projector `P = U_hat * U_hat^T`, so `W0^T * dW = 0` holds structurally
//! for every setting of the trainables.
//!
//! Modules:
//! - [`matrix`]: row-major `f64` dense matrices with (optionally rayon-parallel)
//!   products whose results do not depend on thread count.
//! - [`numerics`]: deterministic SVD, numerical rank, null-space bases,
//!   orthonormalization.
//! - [`adapter`]: the adapted layer (null / random-ablation / vanilla modes),
//!   forward, analytic gradients, merging, invariant checks.
//! - [`training`]: losses, SGD/AdamW, a finite-difference gradient oracle,
//!   planted synthetic tasks, the training loop.
//! - [`io`]: the NLRT tensor container and JSON reports.
//! - [`cli`]: the `nullora` command-line surface.

pub mod adapter;
pub mod cli;
pub mod io;
pub mod matrix;
pub mod numerics;
pub mod training;

pub use adapter::{AdapterLayer, AdapterMode, GradientSet, InvariantReport};
pub use matrix::DenseMatrix;
pub use numerics::{RankReport, SvdResult, DEFAULT_TAU};
pub use training::{PlantedTask, TrainConfig, TrainHistory};
