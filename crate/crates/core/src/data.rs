//! Clips, actors, groups and predictions, plus the JSON interchange format.
//!
//! A dataset file holds many clips:
//!
//! ```json
//! {"clips":[{"clip_id":"c0","width":1280,"height":720,"num_frames":30,
//!   "actors":[{"actor_id":1,"boxes":[[0,10.0,20.0,60.0,120.0]]}],
//!   "groups":[{"group_id":0,"members":[1,2],"activity":3}],
//!   "outliers":[7]}]}
//! ```
//!
//! Prediction files mirror it, with `groups` holding `class_scores` and
//! `member_scores` and a `predicted_outliers` list. Class index 0 is always the
//! no-activity class.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ActorId = u32;
/// Activity class index; [`NO_ACTIVITY`] is reserved.
pub type ClassId = usize;

pub const NO_ACTIVITY: ClassId = 0;

/// A predicted actor counts as a member of a group only at or above this score.
pub const MEMBERSHIP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed JSON: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("clip {clip_id}: {path}: {message}")]
    Invariant {
        clip_id: String,
        path: String,
        message: String,
    },
    #[error("no prediction for clip {0}")]
    MissingPrediction(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    fn invariant(clip_id: &str, path: impl Into<String>, message: impl Into<String>) -> Self {
        DataError::Invariant {
            clip_id: clip_id.to_string(),
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn from_json(err: serde_json::Error) -> Self {
        use serde_json::error::Category;
        match err.classify() {
            Category::Data => DataError::Schema(err.to_string()),
            _ => DataError::Parse(err.to_string()),
        }
    }
}

/// Axis-aligned box in frame pixels (or normalized units after
/// [`BBox::normalized`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Smallest axis-aligned box containing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    pub fn normalized(&self, size: FrameSize) -> BBox {
        let (w, h) = (size.width as f64, size.height as f64);
        BBox::new(self.x1 / w, self.y1 / h, self.x2 / w, self.y2 / h)
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x1, self.y1),
            (self.x2, self.y1),
            (self.x2, self.y2),
            (self.x1, self.y2),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: u32,
    pub height: u32,
}

/// Box center in unit-square coordinates.
pub fn box_center_normalized(b: &BBox, size: FrameSize) -> (f64, f64) {
    let w = size.width as f64;
    let h = size.height as f64;
    ((b.x1 + b.x2) / (2.0 * w), (b.y1 + b.y2) / (2.0 * h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub actor_id: ActorId,
    /// Strictly increasing frame indices.
    pub boxes: Vec<(u32, BBox)>,
}

impl Tracklet {
    pub fn box_at(&self, frame: u32) -> Option<BBox> {
        self.boxes
            .binary_search_by_key(&frame, |(f, _)| *f)
            .ok()
            .map(|i| self.boxes[i].1)
    }

    /// Box at `frame`, or at the closest annotated frame (earlier wins ties).
    pub fn nearest_box(&self, frame: u32) -> BBox {
        match self.boxes.binary_search_by_key(&frame, |(f, _)| *f) {
            Ok(i) => self.boxes[i].1,
            Err(0) => self.boxes[0].1,
            Err(i) if i == self.boxes.len() => self.boxes[i - 1].1,
            Err(i) => {
                let (before, b0) = self.boxes[i - 1];
                let (after, b1) = self.boxes[i];
                if frame - before <= after - frame {
                    b0
                } else {
                    b1
                }
            }
        }
    }

    /// Box on the clip's key frame: frame 0, or the first annotated frame.
    pub fn key_box(&self) -> BBox {
        self.boxes[0].1
    }

    pub fn normalized(&self, size: FrameSize) -> Tracklet {
        Tracklet {
            actor_id: self.actor_id,
            boxes: self
                .boxes
                .iter()
                .map(|(f, b)| (*f, b.normalized(size)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAnnotation {
    pub group_id: u32,
    pub members: BTreeSet<ActorId>,
    pub activity: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub clip_id: String,
    pub frame_size: FrameSize,
    pub num_frames: u32,
    pub tracklets: Vec<Tracklet>,
    pub groups: Vec<GroupAnnotation>,
    pub outliers: BTreeSet<ActorId>,
}

impl Clip {
    /// Actor ids in file order; this order indexes every per-actor vector.
    pub fn actor_ids(&self) -> Vec<ActorId> {
        self.tracklets.iter().map(|t| t.actor_id).collect()
    }

    pub fn num_actors(&self) -> usize {
        self.tracklets.len()
    }

    pub fn actor_index(&self, id: ActorId) -> Option<usize> {
        self.tracklets.iter().position(|t| t.actor_id == id)
    }

    pub fn tracklet(&self, id: ActorId) -> Option<&Tracklet> {
        self.tracklets.iter().find(|t| t.actor_id == id)
    }

    /// Activity label per actor (file order): its group's class, or
    /// [`NO_ACTIVITY`] for outliers.
    pub fn actor_labels(&self) -> Vec<ClassId> {
        self.tracklets
            .iter()
            .map(|t| {
                self.groups
                    .iter()
                    .find(|g| g.members.contains(&t.actor_id))
                    .map_or(NO_ACTIVITY, |g| g.activity)
            })
            .collect()
    }

    /// Checks every clip-level invariant. Returns warnings for conditions the
    /// options downgrade.
    pub fn validate(&self, opts: &LoadOptions) -> Result<Vec<String>, DataError> {
        let id = self.clip_id.as_str();
        let mut warnings = Vec::new();
        if self.frame_size.width == 0 || self.frame_size.height == 0 {
            return Err(DataError::invariant(id, "width/height", "frame size must be positive"));
        }
        if self.num_frames == 0 {
            return Err(DataError::invariant(id, "num_frames", "must be at least 1"));
        }
        let mut actors = BTreeSet::new();
        for (ai, t) in self.tracklets.iter().enumerate() {
            let path = format!("actors[{ai}]");
            if !actors.insert(t.actor_id) {
                return Err(DataError::invariant(
                    id,
                    path,
                    format!("duplicate actor_id {}", t.actor_id),
                ));
            }
            if t.boxes.is_empty() {
                return Err(DataError::invariant(id, format!("{path}.boxes"), "tracklet is empty"));
            }
            let mut prev: Option<u32> = None;
            for (bi, (f, b)) in t.boxes.iter().enumerate() {
                let bpath = format!("{path}.boxes[{bi}]");
                if prev.is_some_and(|p| *f <= p) {
                    return Err(DataError::invariant(id, bpath, "frame indices must increase strictly"));
                }
                if *f >= self.num_frames {
                    return Err(DataError::invariant(
                        id,
                        bpath,
                        format!("frame {f} outside clip of {} frames", self.num_frames),
                    ));
                }
                if !b.is_valid() {
                    return Err(DataError::invariant(id, bpath, "box needs x1 < x2, y1 < y2, finite"));
                }
                prev = Some(*f);
            }
        }

        let mut owner: BTreeMap<ActorId, String> = BTreeMap::new();
        for (gi, g) in self.groups.iter().enumerate() {
            let path = format!("groups[{gi}]");
            if g.members.len() < 2 {
                let msg = format!("group {} has {} member(s); singletons are outliers", g.group_id, g.members.len());
                if opts.allow_singleton_groups && !g.members.is_empty() {
                    warnings.push(format!("clip {id}: {path}: {msg}"));
                } else {
                    return Err(DataError::invariant(id, format!("{path}.members"), msg));
                }
            }
            if g.activity == NO_ACTIVITY {
                return Err(DataError::invariant(
                    id,
                    format!("{path}.activity"),
                    "class 0 is reserved for no activity",
                ));
            }
            for m in &g.members {
                if !actors.contains(m) {
                    return Err(DataError::invariant(
                        id,
                        format!("{path}.members"),
                        format!("actor {m} is not in the clip"),
                    ));
                }
                if let Some(prev) = owner.insert(*m, path.clone()) {
                    return Err(DataError::invariant(
                        id,
                        format!("{path}.members"),
                        format!("actor {m} appears in two groups ({prev} and {path})"),
                    ));
                }
            }
        }
        for o in &self.outliers {
            if !actors.contains(o) {
                return Err(DataError::invariant(id, "outliers", format!("actor {o} is not in the clip")));
            }
            if let Some(g) = owner.get(o) {
                return Err(DataError::invariant(
                    id,
                    "outliers",
                    format!("actor {o} is both an outlier and a member of {g}"),
                ));
            }
        }
        for a in &actors {
            if !owner.contains_key(a) && !self.outliers.contains(a) {
                return Err(DataError::invariant(
                    id,
                    "outliers",
                    format!("actor {a} is neither in a group nor an outlier"),
                ));
            }
        }
        Ok(warnings)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Accept single-member groups with a warning (JRDB-Act style data).
    pub allow_singleton_groups: bool,
}

// ---- wire records -------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRecord {
    clips: Vec<ClipRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipRecord {
    clip_id: String,
    width: u32,
    height: u32,
    num_frames: u32,
    actors: Vec<ActorRecord>,
    groups: Vec<GroupRecord>,
    outliers: Vec<ActorId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ActorRecord {
    actor_id: ActorId,
    boxes: Vec<BoxRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRecord(u32, f64, f64, f64, f64);

#[derive(Debug, Serialize, Deserialize)]
struct GroupRecord {
    group_id: u32,
    members: Vec<ActorId>,
    activity: ClassId,
}

impl From<ClipRecord> for Clip {
    fn from(r: ClipRecord) -> Self {
        Clip {
            clip_id: r.clip_id,
            frame_size: FrameSize {
                width: r.width,
                height: r.height,
            },
            num_frames: r.num_frames,
            tracklets: r
                .actors
                .into_iter()
                .map(|a| Tracklet {
                    actor_id: a.actor_id,
                    boxes: a
                        .boxes
                        .into_iter()
                        .map(|BoxRecord(f, x1, y1, x2, y2)| (f, BBox::new(x1, y1, x2, y2)))
                        .collect(),
                })
                .collect(),
            groups: r
                .groups
                .into_iter()
                .map(|g| GroupAnnotation {
                    group_id: g.group_id,
                    members: g.members.into_iter().collect(),
                    activity: g.activity,
                })
                .collect(),
            outliers: r.outliers.into_iter().collect(),
        }
    }
}

impl From<&Clip> for ClipRecord {
    fn from(c: &Clip) -> Self {
        ClipRecord {
            clip_id: c.clip_id.clone(),
            width: c.frame_size.width,
            height: c.frame_size.height,
            num_frames: c.num_frames,
            actors: c
                .tracklets
                .iter()
                .map(|t| ActorRecord {
                    actor_id: t.actor_id,
                    boxes: t
                        .boxes
                        .iter()
                        .map(|(f, b)| BoxRecord(*f, b.x1, b.y1, b.x2, b.y2))
                        .collect(),
                })
                .collect(),
            groups: c
                .groups
                .iter()
                .map(|g| GroupRecord {
                    group_id: g.group_id,
                    members: g.members.iter().copied().collect(),
                    activity: g.activity,
                })
                .collect(),
            outliers: c.outliers.iter().copied().collect(),
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), DataError> {
    fs::write(path, contents).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_dataset(json: &str, opts: &LoadOptions) -> Result<Vec<Clip>, DataError> {
    let record: DatasetRecord = serde_json::from_str(json).map_err(DataError::from_json)?;
    let clips: Vec<Clip> = record.clips.into_iter().map(Clip::from).collect();
    let mut seen = BTreeSet::new();
    for clip in &clips {
        if !seen.insert(clip.clip_id.as_str()) {
            return Err(DataError::invariant(&clip.clip_id, "clip_id", "duplicate clip_id"));
        }
        for w in clip.validate(opts)? {
            log::warn!("{w}");
        }
    }
    Ok(clips)
}

pub fn load_dataset(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Vec<Clip>, DataError> {
    parse_dataset(&read_file(path.as_ref())?, opts)
}

pub fn dataset_to_json(clips: &[Clip]) -> String {
    let record = DatasetRecord {
        clips: clips.iter().map(ClipRecord::from).collect(),
    };
    serde_json::to_string_pretty(&record).expect("dataset serializes")
}

pub fn save_dataset(path: impl AsRef<Path>, clips: &[Clip]) -> Result<(), DataError> {
    write_file(path.as_ref(), &dataset_to_json(clips))
}

// ---- predictions -------------------------------------------------------

/// One predicted group. `members` is derived from the scores of every group
/// in the clip, see [`ClipPrediction::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPrediction {
    /// Distribution over `C + 1` classes, index 0 = no activity.
    pub class_scores: Vec<f64>,
    /// One score in `[0, 1]` per clip actor, in file order.
    pub member_scores: Vec<f64>,
    #[serde(skip)]
    pub members: BTreeSet<ActorId>,
}

impl GroupPrediction {
    pub fn new(class_scores: Vec<f64>, member_scores: Vec<f64>) -> Self {
        Self {
            class_scores,
            member_scores,
            members: BTreeSet::new(),
        }
    }

    /// Argmax over all classes, lowest index on ties.
    pub fn argmax_class(&self) -> ClassId {
        argmax(&self.class_scores)
    }

    /// Highest non-∅ class score; the class-agnostic detection confidence.
    pub fn max_activity_score(&self) -> f64 {
        self.class_scores
            .iter()
            .skip(1)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip_id: String,
    pub groups: Vec<GroupPrediction>,
    pub predicted_outliers: BTreeSet<ActorId>,
}

impl ClipPrediction {
    /// Builds a prediction whose member sets follow from the scores: actor `j`
    /// joins the group with its highest score (lowest index on ties) when that
    /// score reaches [`MEMBERSHIP_THRESHOLD`]. Every other actor is an outlier.
    pub fn new(clip: &Clip, groups: Vec<GroupPrediction>) -> Result<Self, DataError> {
        let mut pred = ClipPrediction {
            clip_id: clip.clip_id.clone(),
            groups,
            predicted_outliers: BTreeSet::new(),
        };
        pred.resolve(clip)?;
        let grouped: BTreeSet<ActorId> = pred.groups.iter().flat_map(|g| g.members.iter().copied()).collect();
        pred.predicted_outliers = clip.actor_ids().into_iter().filter(|a| !grouped.contains(a)).collect();
        Ok(pred)
    }

    /// Validates the scores against `clip` and fills in each group's derived
    /// member set.
    pub fn resolve(&mut self, clip: &Clip) -> Result<(), DataError> {
        let id = self.clip_id.as_str();
        let n = clip.num_actors();
        for (gi, g) in self.groups.iter().enumerate() {
            if g.member_scores.len() != n {
                return Err(DataError::invariant(
                    id,
                    format!("groups[{gi}].member_scores"),
                    format!("expected {n} scores, found {}", g.member_scores.len()),
                ));
            }
            if g.member_scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(DataError::invariant(
                    id,
                    format!("groups[{gi}].member_scores"),
                    "scores must lie in [0, 1]",
                ));
            }
            let total: f64 = g.class_scores.iter().sum();
            if g.class_scores.len() < 2
                || g.class_scores.iter().any(|s| !s.is_finite() || *s < 0.0)
                || (total - 1.0).abs() > 1e-6
            {
                return Err(DataError::invariant(
                    id,
                    format!("groups[{gi}].class_scores"),
                    "need a nonnegative distribution over at least two classes summing to 1",
                ));
            }
        }
        let ids = clip.actor_ids();
        let mut members = vec![BTreeSet::new(); self.groups.len()];
        for (j, actor) in ids.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in self.groups.iter().enumerate() {
                let s = g.member_scores[j];
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((gi, s));
                }
            }
            if let Some((gi, s)) = best {
                if s >= MEMBERSHIP_THRESHOLD {
                    members[gi].insert(*actor);
                }
            }
        }
        for (g, m) in self.groups.iter_mut().zip(members) {
            g.members = m;
        }
        for o in &self.predicted_outliers {
            if !ids.contains(o) {
                return Err(DataError::invariant(id, "predicted_outliers", format!("actor {o} is not in the clip")));
            }
            if self.groups.iter().any(|g| g.members.contains(o)) {
                return Err(DataError::invariant(
                    id,
                    "predicted_outliers",
                    format!("actor {o} is both a predicted outlier and a group member"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionFile {
    clips: Vec<ClipPrediction>,
}

/// Parses predictions and resolves each against its clip. Predictions for
/// clip ids absent from `clips` are rejected.
pub fn parse_predictions(json: &str, clips: &[Clip]) -> Result<Vec<ClipPrediction>, DataError> {
    let file: PredictionFile = serde_json::from_str(json).map_err(DataError::from_json)?;
    let mut preds = file.clips;
    for p in &mut preds {
        let clip = clips
            .iter()
            .find(|c| c.clip_id == p.clip_id)
            .ok_or_else(|| DataError::invariant(&p.clip_id, "clip_id", "no such clip in the dataset"))?;
        p.resolve(clip)?;
    }
    Ok(preds)
}

pub fn load_predictions(path: impl AsRef<Path>, clips: &[Clip]) -> Result<Vec<ClipPrediction>, DataError> {
    parse_predictions(&read_file(path.as_ref())?, clips)
}

pub fn predictions_to_json(preds: &[ClipPrediction]) -> String {
    serde_json::to_string_pretty(&PredictionFile { clips: preds.to_vec() }).expect("predictions serialize")
}

pub fn save_predictions(path: impl AsRef<Path>, preds: &[ClipPrediction]) -> Result<(), DataError> {
    write_file(path.as_ref(), &predictions_to_json(preds))
}

// ---- frame sampling -----------------------------------------------------

pub enum Sampling<'a, R: Rng> {
    /// Midpoint of each segment.
    Deterministic,
    /// Uniform within each segment.
    Stochastic(&'a mut R),
}

/// Segment-based sampling: split `num_frames` into `count` equal segments and
/// take one index from each. When `count > num_frames` segments shorter than
/// one frame repeat indices.
pub fn sample_frames<R: Rng>(num_frames: u32, count: usize, mode: Sampling<'_, R>) -> Vec<u32> {
    assert!(num_frames >= 1 && count >= 1, "need at least one frame and one sample");
    let n = num_frames as u64;
    let t = count as u64;
    match mode {
        Sampling::Deterministic => (0..t).map(|i| ((2 * i + 1) * n / (2 * t)) as u32).collect(),
        Sampling::Stochastic(rng) => (0..t)
            .map(|i| {
                let start = i * n / t;
                let end = (i + 1) * n / t;
                if end > start {
                    rng.random_range(start..end) as u32
                } else {
                    start.min(n - 1) as u32
                }
            })
            .collect(),
    }
}

/// Deterministic segment midpoints for a clip.
pub fn clip_sample_frames(clip: &Clip, count: usize) -> Vec<u32> {
    sample_frames::<crate::rng::SplitMix64>(clip.num_frames, count, Sampling::Deterministic)
}
