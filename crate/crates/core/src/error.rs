//! Error type shared by all pipeline stages.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("solver blowup at step {step}: max |value| = {max:.3e} exceeds bound {bound:.3e}")]
    SolverBlowup { step: usize, max: f64, bound: f64 },

    #[error("corpus too short: length {len} cannot supply a window of {needed} snapshots")]
    CorpusTooShort { len: usize, needed: usize },

    #[error("corrupt corpus: {0}")]
    CorruptCorpus(String),

    #[error("corpus format version {found} not supported (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask region is empty but the masking fraction is positive")]
    EmptyMaskRegion,

    #[error("every eligible window start is masked; no usable training anchor")]
    NoUnmaskedAnchor,

    #[error("non-finite {component} loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64, component: String },

    #[error("latent rollout diverged at step {step}: norm {norm:.3e} exceeds bound {bound:.3e}")]
    RolloutDiverged { step: usize, norm: f64, bound: f64 },

    #[error("masked snapshot {index} has no unmasked predecessor to impute from")]
    NoUnmaskedPredecessor { index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("metadata error: {0}")]
    Metadata(String),
}

pub type Result<T> = std::result::Result<T, Error>;
