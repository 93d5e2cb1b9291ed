use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::data::{clip_sample_frames, read_file, write_file, Clip, DataError};
use crate::numerics::Tensor;

/// Features for one sampled frame, one row per clip actor in file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub actor_feats: Vec<Vec<f64>>,
    /// Scene tokens; empty when the model supplies learned tokens.
    #[serde(default)]
    pub scene_feats: Vec<Vec<f64>>,
}

/// Precomputed features for a clip. Frame `t` corresponds to the `t`-th
/// deterministic segment sample of the clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFeatures {
    pub clip_id: String,
    pub frames: Vec<FrameFeatures>,
}

/// The file is a JSON array of [`ClipFeatures`].
pub fn parse_features(json: &str) -> Result<Vec<ClipFeatures>, ModelError> {
    serde_json::from_str(json).map_err(|e| ModelError::Data(DataError::from_json(e)))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Vec<ClipFeatures>, ModelError> {
    parse_features(&read_file(path.as_ref())?)
}

pub fn features_to_json(features: &[ClipFeatures]) -> String {
    serde_json::to_string(features).expect("features serialize")
}

pub fn save_features(path: impl AsRef<Path>, features: &[ClipFeatures]) -> Result<(), ModelError> {
    Ok(write_file(path.as_ref(), &features_to_json(features))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    /// `N × actor_in`.
    pub actor_feats: Tensor,
    /// Normalized `(cx, cy, w, h)` per actor.
    pub boxes: Vec<[f64; 4]>,
    /// `S × scene_in`, or `None` for learned scene tokens.
    pub scene_feats: Option<Tensor>,
}

impl FrameInput {
    pub fn centers(&self) -> Vec<(f64, f64)> {
        self.boxes.iter().map(|b| (b[0], b[1])).collect()
    }
}

/// Model input for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipInput {
    pub clip_id: String,
    pub frames: Vec<FrameInput>,
}

impl ClipInput {
    /// Pairs features with the clip's boxes at the sampled frames (nearest
    /// annotated box when an actor has none at that frame).
    pub fn new(clip: &Clip, features: &ClipFeatures) -> Result<Self, ModelError> {
        let id = clip.clip_id.as_str();
        if features.clip_id != clip.clip_id {
            return Err(ModelError::features(id, format!("features are for clip {}", features.clip_id)));
        }
        if features.frames.is_empty() {
            return Err(ModelError::features(id, "no frames"));
        }
        let n = clip.num_actors();
        let frame_ids = clip_sample_frames(clip, features.frames.len());
        let mut frames = Vec::with_capacity(frame_ids.len());
        for (t, (f, frame)) in features.frames.iter().zip(frame_ids).enumerate() {
            if f.actor_feats.len() != n {
                return Err(ModelError::features(
                    id,
                    format!("frame {t}: {} feature rows for {n} actors", f.actor_feats.len()),
                ));
            }
            let actor_feats = to_tensor(id, t, "actor_feats", &f.actor_feats)?;
            let scene_feats = if f.scene_feats.is_empty() {
                None
            } else {
                Some(to_tensor(id, t, "scene_feats", &f.scene_feats)?)
            };
            let boxes = clip
                .tracklets
                .iter()
                .map(|tr| {
                    let b = tr.nearest_box(frame).normalized(clip.frame_size);
                    let (cx, cy) = b.center();
                    [cx, cy, b.width(), b.height()]
                })
                .collect();
            frames.push(FrameInput {
                actor_feats,
                boxes,
                scene_feats,
            });
        }
        let width = |f: &FrameInput| f.actor_feats.cols();
        let scene = |f: &FrameInput| f.scene_feats.as_ref().map(Tensor::cols);
        if frames.iter().any(|f| width(f) != width(&frames[0]) || scene(f) != scene(&frames[0])) {
            return Err(ModelError::features(id, "feature widths differ between frames"));
        }
        Ok(Self {
            clip_id: clip.clip_id.clone(),
            frames,
        })
    }

    pub fn num_actors(&self) -> usize {
        self.frames[0].actor_feats.rows()
    }

    pub fn actor_width(&self) -> usize {
        self.frames[0].actor_feats.cols()
    }

    pub fn scene_width(&self) -> Option<usize> {
        self.frames[0].scene_feats.as_ref().map(Tensor::cols)
    }

    /// Matches features to clips by id, in clip order.
    pub fn for_dataset(clips: &[Clip], features: &[ClipFeatures]) -> Result<Vec<ClipInput>, ModelError> {
        clips
            .iter()
            .map(|clip| {
                let f = features
                    .iter()
                    .find(|f| f.clip_id == clip.clip_id)
                    .ok_or_else(|| ModelError::features(&clip.clip_id, "missing from the features file"))?;
                ClipInput::new(clip, f)
            })
            .collect()
    }
}

fn to_tensor(clip_id: &str, t: usize, what: &str, rows: &[Vec<f64>]) -> Result<Tensor, ModelError> {
    let bad = |m: &str| ModelError::features(clip_id, format!("frame {t}: {what} {m}"));
    if rows.is_empty() {
        return Err(bad("are empty"));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(bad("rows must be non-empty and equally long"));
    }
    let tensor = Tensor::from_rows(rows).map_err(|_| bad("are ragged"))?;
    if !tensor.all_finite() {
        return Err(bad("contain non-finite values"));
    }
    Ok(tensor)
}
