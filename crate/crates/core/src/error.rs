use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidSpec(String),

    #[error("action {action} out of range (state has {count} actions)")]
    ActionOutOfRange { action: usize, count: usize },

    #[error("step called after the episode finished")]
    EpisodeDone,

    #[error("enumeration exceeds cap of {cap} trajectories")]
    EnumerationCap { cap: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dummy action probability {dummy} is negative: action values violate the range condition")]
    RangeConditionViolated { dummy: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible target: {0}")]
    Infeasible(String),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
