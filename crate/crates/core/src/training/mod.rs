//! Set-prediction losses and the training loop.
//!
//! Ground-truth groups are padded with no-activity (∅) targets up to the
//! number of group tokens and matched to slots with the Hungarian algorithm
//! on detached scores. The total loss is
//! `l_ind + Σ l_group + λ_mem · Σ l_mem + λ_con · l_con`, summed over matched
//! pairs.

mod losses;
mod train;

pub use losses::{
    clip_loss, consistency_loss, group_loss, group_targets, individual_action_loss, match_groups, membership_loss,
    LossBreakdown, LossConfig,
};
pub use train::{learning_rate, loss_curve_csv, train, TrainConfig, TrainReport};

use thiserror::Error;

use crate::assignment::AssignmentError;
use crate::model::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error("clip {clip_id} has {groups} groups but the model has only {slots} group tokens")]
    TooManyGroups { clip_id: String, groups: usize, slots: usize },
    #[error("loss diverged at epoch {epoch}, step {step}: {value}")]
    Divergence { epoch: usize, step: usize, value: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::Numerics(e))
    }
}
