//! Reference Grouping Transformer.
//!
//! Learnable group tokens and per-frame actor features pass through a stack
//! of pre-norm layers. Each layer runs, in order:
//!
//! 1. actor self-attention (optionally restricted by a [`distance_mask`]) and
//!    group-token self-attention,
//! 2. grouping attention: group tokens query the actor features,
//! 3. cross-attention of both streams over scene tokens,
//! 4. a GELU feed-forward block per stream.
//!
//! Heads then produce actor action logits, group class logits and projected
//! embeddings whose dot products are the membership logits. Frame-wise
//! outputs are averaged over the sampled frames.

mod features;
mod forward;
mod infer;
mod layers;

pub use features::{
    features_to_json, load_features, parse_features, save_features, ClipFeatures, ClipInput, FrameFeatures, FrameInput,
};
pub use forward::{ForwardVars, GroupingTransformer, ModelOutput};
pub use infer::{distance_mask, infer_groups, InferOptions};

use thiserror::Error;

use crate::data::DataError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("features for clip {clip_id}: {message}")]
    Features { clip_id: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

impl ModelError {
    pub(crate) fn features(clip_id: &str, message: impl Into<String>) -> Self {
        ModelError::Features {
            clip_id: clip_id.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Number of group tokens (K).
    pub k_tokens: usize,
    pub layers: usize,
    pub heads: usize,
    /// Activity classes excluding the no-activity class.
    pub num_classes: usize,
    /// Distance-mask threshold in normalized frame units.
    pub mu: f64,
    /// Frames sampled per clip.
    pub frames: usize,
    /// Width of the per-actor input features.
    pub actor_in: usize,
    /// Width of the scene features; `None` uses learned scene tokens.
    pub scene_in: Option<usize>,
    /// Learned scene tokens used when `scene_in` is `None`.
    pub scene_tokens: usize,
    /// Hidden width of the feed-forward blocks as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub use_distance_mask: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            k_tokens: 12,
            layers: 6,
            heads: 4,
            num_classes: 6,
            mu: 0.2,
            frames: 1,
            actor_in: 32,
            scene_in: None,
            scene_tokens: 4,
            ffn_mult: 2,
            use_distance_mask: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.k_tokens == 0 {
            return fail("need at least one group token".into());
        }
        if self.num_classes == 0 {
            return fail("need at least one activity class".into());
        }
        if !(self.mu > 0.0 && self.mu <= std::f64::consts::SQRT_2) {
            return fail(format!("mu must lie in (0, sqrt 2], got {}", self.mu));
        }
        if self.frames == 0 || self.actor_in == 0 || self.ffn_mult == 0 {
            return fail("frames, actor_in and ffn_mult must be positive".into());
        }
        if self.scene_in == Some(0) || (self.scene_in.is_none() && self.scene_tokens == 0) {
            return fail("scene input needs at least one feature or learned token".into());
        }
        Ok(())
    }
}
