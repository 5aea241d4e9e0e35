//! Two-stage preference-disentangled reward model.
//!
//! Stage 1 fuses several encoded profile views into one embedding. Stage 2
//! propagates collaborative embeddings over the user-item graph and splits
//! each user into interest and conformity branches, fused by a small
//! attention map. At inference, an action is embedded through its text-space
//! neighbors and scored against the user's unit embeddings.

pub mod autodiff;
pub mod cf;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod profile;

use thiserror::Error;

pub use cf::{
    popularity, train_stage2, Adjacency, Branches, CfConfig, CfModel, Interaction, LossWeights, Stage2Loss,
    Stage2TrainConfig, TrainTrace, Triplet, TripletSampler,
};
pub use inference::{normalize_scores, ActionEmbedding, ActionScores, RewardStats, Scorer};
pub use profile::{fuse_profile, stage1_loss, train_stage1, FusionParams, ProfileViews, Stage1Loss};

#[derive(Debug, Error)]
pub enum RewardModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("contrastive batch needs at least 2 users, got {0}")]
    BatchTooSmall(usize),
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("batch lacks negatives")]
    EmptyNegatives,
    #[error("empty item set")]
    EmptyItems,
    #[error("index out of range: {0}")]
    UnknownIndex(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RewardModelError>;
