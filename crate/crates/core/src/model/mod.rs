//! The graph-structured variational RNN and its ablations.

mod ops;
mod params;
mod rollout;

pub use ops::{
    decode_visual, encode_posterior, encode_visual, fuse_decode, graph_message_pass, prior_step, recurrence, social_pool, Fused,
};
pub use params::{cell_features, Dynamics, CELL_FEATURES, Interaction, ModelConfig, ModelParams, RelationParams, Variant};
pub use rollout::{categorical, rollout, BeliefSequence, Mode, RolloutOptions, RolloutTrace, StepBelief};

use alloc::string::String;
use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("expected {expected} observed frames, got {got}")]
    StepCount { expected: usize, got: usize },
    #[error("train mode needs targets for all {0} steps")]
    MissingTargets(usize),
    #[error("model is built for {expected} agents, data has {got}")]
    AgentCount { expected: usize, got: usize },
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}
