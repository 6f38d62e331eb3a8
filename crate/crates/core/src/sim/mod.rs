//! Ground-truth trajectory sources: a synthetic interacting-agents generator,
//! a 2D soccer simulator, and the basketball-format conversion.

mod basketball;
mod episode;
mod soccer;
mod synthetic;

pub use basketball::{basketball_episode, CourtExtent, BASKETBALL_FRAMES};
pub use episode::{Episode, Provenance, Role, Split, TrajectorySet};
pub use soccer::{camera_window, decision_tree_step, simulate_soccer, Action, AgentState, SoccerConfig, WorldState};
pub use synthetic::{gen_synthetic, reflect, synthetic_episode, SynthConfig};

use alloc::string::String;
use thiserror::Error;

use crate::Pos;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("need at least {min} agents, got {got}")]
    TooFewAgents { min: usize, got: usize },
    #[error("episode {episode}, frame {frame}, agent {agent}: position {pos:?} outside the unit field")]
    OutOfRange { episode: u64, frame: usize, agent: usize, pos: Pos },
    #[error("frame {frame}: expected {expected} agents, got {got}")]
    AgentCount { frame: usize, expected: usize, got: usize },
    #[error("episode {episode} has {frames} frames, need {needed}")]
    TooShort { episode: usize, frames: usize, needed: usize },
    #[error("{frames} frames are not divisible into steps of {frames_per_step}")]
    StepGrouping { frames: usize, frames_per_step: usize },
    #[error("camera: {0}")]
    Camera(String),
    #[error("unrecognized role `{0}`")]
    BadRole(String),
    #[error("episodes in a set must share agent and frame counts")]
    NonUniform,
}
