//! Training-free task-vector transfer between pre-trained models of different
//! width and depth.
//!
//! A fine-tuning update `τ = θ_ft − θ_pre` is, layer by layer, an accumulation of
//! outer products between output-side gradients and input activations. This
//! crate aligns both of those coordinate systems from a source model to a
//! target model with orthogonal Procrustes maps estimated from one
//! forward/backward pass over a small calibration set, then maps the source
//! update into the target's coordinates as `R_outᵀ · τ · R_in`.
//!
//! Module map:
//!
//! - [`linalg`]: dense matrices, Jacobi SVD, seeded RNG
//! - [`nn`]: small MLP / patch-sequence models with traced forward and backward
//! - [`container`]: the `BICO` binary container used for every artifact on disk
//! - [`taskvec`]: task-vector extraction, trajectory reconstruction, naive baselines
//! - [`calib`]: synthetic task suites, calibration selection, activation/gradient capture
//! - [`align`]: Procrustes maps, depth matching, bilinear transfer
//! - [`diag`]: CKA, cosine, activation consistency, cost estimates
//! - [`cli`]: config-driven commands and experiment sweeps

pub mod align;
pub mod calib;
pub mod cli;
pub mod container;
pub mod diag;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod taskvec;

pub use error::{Error, Result};
pub use linalg::Matrix;
