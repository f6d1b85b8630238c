//! Small trainable models whose forward and backward passes expose, for every
//! linear layer, the inputs it consumed and the loss gradient at its output.
//!
//! A model is a chain of linear layers `y = x·Wᵀ + b`, each followed by a
//! pointwise nonlinearity. Inputs are either plain feature vectors (one token
//! per example) or grayscale images cut into non-overlapping square patches
//! (one token per patch). Every layer acts token-wise; the logits of an
//! example are the mean of the last layer's outputs over its tokens.

mod checkpoint;
mod data;
mod model;
mod trace;
mod train;

pub use checkpoint::{
    load_checkpoint, load_trajectory, model_from_container, model_to_container, save_checkpoint,
    save_trajectory, spec_fingerprint, trajectory_from_container, trajectory_to_container,
};
pub use data::Dataset;
pub use model::{Activation, InputKind, LayerSpec, Model, ModelSpec};
pub use trace::{backward, forward, BackwardTrace, ForwardTrace};
pub use train::{
    accuracy, train, LayerFactors, LoggedStep, OptimizerConfig, OptimizerKind, Schedule,
    TrajectoryLog, TrajectoryOptions,
};
