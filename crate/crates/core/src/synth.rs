//! Seeded synthetic scenes: spatially clustered groups, outliers that may
//! sit close to groups, and per-actor features built from class prototypes.
//! Also a prediction perturber for calibrating metrics.

use std::collections::BTreeSet;
use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{ActorId, BBox, Clip, ClipPrediction, FrameSize, GroupAnnotation, GroupPrediction, Tracklet};
use crate::model::{ClipFeatures, FrameFeatures};
use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_clips: usize,
    pub actors: RangeInclusive<usize>,
    pub groups: RangeInclusive<usize>,
    /// Members per group; the lower bound must be at least 2.
    pub group_size: RangeInclusive<usize>,
    /// Probability that each spare actor slot becomes an outlier.
    pub outlier_fraction: f64,
    /// Probability that an outlier is placed right next to a group.
    pub tightness: f64,
    /// Standard deviation (in norm) of the noise added to feature prototypes.
    pub feature_noise: f64,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Feature frames per clip.
    pub feature_frames: usize,
    /// Scene tokens per feature frame; 0 leaves them to the model.
    pub scene_tokens: usize,
    pub num_frames: u32,
    pub frame_size: FrameSize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clips: 4,
            actors: 6..=10,
            groups: 2..=2,
            group_size: 2..=4,
            outlier_fraction: 0.3,
            tightness: 0.5,
            feature_noise: 0.1,
            num_classes: 6,
            feature_dim: 16,
            feature_frames: 2,
            scene_tokens: 0,
            num_frames: 10,
            frame_size: FrameSize {
                width: 1280,
                height: 720,
            },
            seed: 0,
        }
    }
}

/// Group centers stay this far apart (normalized units).
const GROUP_SEPARATION: f64 = 0.3;
/// Members lie within this radius of their group center.
const GROUP_RADIUS: f64 = 0.05;
/// Outliers placed "near" a group lie between these distances of its center.
const NEAR: (f64, f64) = (0.08, 0.14);
/// Other outliers keep at least this distance from every group center.
const FAR: f64 = 0.25;
const BOX_W: f64 = 0.03;
const BOX_H: f64 = 0.12;
const ATTEMPTS: usize = 1000;

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InfeasibleSpec(m));
        if self.actors.is_empty() || self.groups.is_empty() || self.group_size.is_empty() {
            return bad("ranges must be non-empty".into());
        }
        if *self.group_size.start() < 2 {
            return bad("groups need at least two members".into());
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) || !(0.0..=1.0).contains(&self.tightness) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.feature_noise.is_nan() || self.feature_noise < 0.0 {
            return bad("feature noise must be nonnegative".into());
        }
        if self.num_classes == 0 || self.feature_dim == 0 || self.feature_frames == 0 || self.num_frames == 0 {
            return bad("class count, feature size and frame counts must be positive".into());
        }
        if self.frame_size.width == 0 || self.frame_size.height == 0 {
            return bad("frame size must be positive".into());
        }
        let min_members = self.groups.start() * self.group_size.start();
        if *self.actors.end() < min_members {
            return bad(format!(
                "at most {} actors cannot hold {} groups of {}",
                self.actors.end(),
                self.groups.start(),
                self.group_size.start()
            ));
        }
        let max_members = self.groups.end() * self.group_size.end();
        if self.outlier_fraction == 0.0 && *self.actors.start() > max_members {
            return bad(format!("without outliers at most {max_members} actors fit in groups"));
        }
        // group centers must fit with the required separation
        if *self.groups.end() > 9 {
            return bad("at most 9 spatially separated groups fit in a frame".into());
        }
        Ok(())
    }
}

struct Layout {
    /// Normalized center per actor, group index (`None` = outlier).
    actors: Vec<((f64, f64), Option<usize>)>,
    centers: Vec<(f64, f64)>,
}

fn layout(spec: &SynthSpec, rng: &mut SplitMix64) -> Result<Layout, SynthError> {
    let (counts, outliers) = 'sizes: {
        for _ in 0..ATTEMPTS {
            let g = rng.random_range(spec.groups.clone());
            let sizes: Vec<usize> = (0..g).map(|_| rng.random_range(spec.group_size.clone())).collect();
            let members: usize = sizes.iter().sum();
            if members > *spec.actors.end() {
                continue;
            }
            let spare = spec.actors.end() - members;
            let outliers = (0..spare).filter(|_| rng.random::<f64>() < spec.outlier_fraction).count();
            if spec.actors.contains(&(members + outliers)) {
                break 'sizes (sizes, outliers);
            }
        }
        return Err(SynthError::InfeasibleSpec("no group/outlier split fits the actor range".into()));
    };

    let mut centers: Vec<(f64, f64)> = Vec::new();
    while centers.len() < counts.len() {
        let mut placed = false;
        for _ in 0..ATTEMPTS {
            let c = (rng.random_range(0.15..0.85), rng.random_range(0.2..0.8));
            if centers.iter().all(|o| dist(*o, c) >= GROUP_SEPARATION) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            // rare with at most 9 groups; start over
            centers.clear();
        }
    }

    let mut actors = Vec::new();
    for (gi, &size) in counts.iter().enumerate() {
        for _ in 0..size {
            let r = GROUP_RADIUS * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            actors.push(((centers[gi].0 + r * a.cos(), centers[gi].1 + r * a.sin()), Some(gi)));
        }
    }
    for _ in 0..outliers {
        let pos = if !centers.is_empty() && rng.random::<f64>() < spec.tightness {
            let c = centers[rng.random_range(0..centers.len())];
            let r = rng.random_range(NEAR.0..NEAR.1);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            (c.0 + r * a.cos(), c.1 + r * a.sin())
        } else {
            let mut p = (rng.random_range(0.05..0.95), rng.random_range(0.1..0.9));
            for _ in 0..ATTEMPTS {
                if centers.iter().all(|c| dist(*c, p) >= FAR) {
                    break;
                }
                p = (rng.random_range(0.05..0.95), rng.random_range(0.1..0.9));
            }
            p
        };
        actors.push((pos, None));
    }
    Ok(Layout { actors, centers })
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

fn unit_vector(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// Generates clips and matching features. Output depends only on `spec`.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Clip>, Vec<ClipFeatures>), SynthError> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    // index 0 is the no-activity prototype used for outliers
    let prototypes: Vec<Vec<f64>> = (0..=spec.num_classes).map(|_| unit_vector(&mut rng, spec.feature_dim)).collect();
    let scene_prototype: Vec<Vec<f64>> = (0..spec.scene_tokens).map(|_| unit_vector(&mut rng, spec.feature_dim)).collect();
    let noise = Normal::new(0.0, spec.feature_noise / (spec.feature_dim as f64).sqrt()).expect("finite noise");
    let (w, h) = (spec.frame_size.width as f64, spec.frame_size.height as f64);

    let mut clips = Vec::with_capacity(spec.num_clips);
    let mut features = Vec::with_capacity(spec.num_clips);
    for ci in 0..spec.num_clips {
        let mut crng = rng.fork(ci as u64);
        let lay = layout(spec, &mut crng)?;
        let activities: Vec<usize> = lay.centers.iter().map(|_| crng.random_range(1..=spec.num_classes)).collect();
        let clip_id = format!("synth-{ci:04}");

        let mut tracklets = Vec::with_capacity(lay.actors.len());
        for (ai, (pos, _)) in lay.actors.iter().enumerate() {
            let drift = (crng.random_range(-0.002..0.002), crng.random_range(-0.002..0.002));
            let boxes = (0..spec.num_frames)
                .map(|f| {
                    let cx = (pos.0 + drift.0 * f as f64).clamp(BOX_W, 1.0 - BOX_W);
                    let cy = (pos.1 + drift.1 * f as f64).clamp(BOX_H / 2.0, 1.0 - BOX_H / 2.0);
                    let b = BBox::new(
                        (cx - BOX_W / 2.0) * w,
                        (cy - BOX_H / 2.0) * h,
                        (cx + BOX_W / 2.0) * w,
                        (cy + BOX_H / 2.0) * h,
                    );
                    (f, b)
                })
                .collect();
            tracklets.push(Tracklet {
                actor_id: ai as ActorId + 1,
                boxes,
            });
        }
        let groups = (0..lay.centers.len())
            .map(|gi| GroupAnnotation {
                group_id: gi as u32,
                members: lay
                    .actors
                    .iter()
                    .enumerate()
                    .filter(|(_, (_, g))| *g == Some(gi))
                    .map(|(ai, _)| ai as ActorId + 1)
                    .collect(),
                activity: activities[gi],
            })
            .collect();
        let outliers = lay
            .actors
            .iter()
            .enumerate()
            .filter(|(_, (_, g))| g.is_none())
            .map(|(ai, _)| ai as ActorId + 1)
            .collect();

        let mut noisy = |base: &[f64]| -> Vec<f64> { base.iter().map(|v| v + noise.sample(&mut crng)).collect() };
        let frames = (0..spec.feature_frames)
            .map(|_| FrameFeatures {
                actor_feats: lay
                    .actors
                    .iter()
                    .map(|(_, g)| noisy(&prototypes[g.map_or(0, |gi| activities[gi])]))
                    .collect(),
                scene_feats: scene_prototype.iter().map(|p| noisy(p)).collect(),
            })
            .collect();
        clips.push(Clip {
            clip_id: clip_id.clone(),
            frame_size: spec.frame_size,
            num_frames: spec.num_frames,
            tracklets,
            groups,
            outliers,
        });
        features.push(ClipFeatures { clip_id, frames });
    }
    Ok((clips, features))
}

/// Ground-truth predictions degraded by `noise ∈ [0, 1]`.
///
/// Each actor draws one uniform number per seed and is corrupted when it is
/// below `noise`, so corrupted sets grow with `noise`. Corrupted members are
/// dropped from their group and become predicted outliers; corrupted
/// outliers join the first group. Each group keeps its true class with a
/// seeded confidence in `[0.5, 1)`; the rest of the mass is spread evenly.
pub fn perturb_prediction(clips: &[Clip], noise: f64, num_classes: usize, seed: u64) -> Vec<ClipPrediction> {
    assert!((0.0..=1.0).contains(&noise), "noise must lie in [0, 1]");
    let mut root = SplitMix64::new(seed);
    clips
        .iter()
        .enumerate()
        .map(|(ci, clip)| {
            let mut rng = root.fork(ci as u64);
            let ids = clip.actor_ids();
            let corrupted: BTreeSet<ActorId> = ids.iter().copied().filter(|_| rng.random::<f64>() < noise).collect();
            let groups: Vec<GroupPrediction> = clip
                .groups
                .iter()
                .enumerate()
                .map(|(gi, g)| {
                    let conf = rng.random_range(0.5..1.0);
                    let rest = (1.0 - conf) / num_classes as f64;
                    let class_scores = (0..=num_classes).map(|c| if c == g.activity { conf } else { rest }).collect();
                    let member_scores = ids
                        .iter()
                        .map(|a| {
                            let keep = g.members.contains(a) && !corrupted.contains(a);
                            let joins = gi == 0 && clip.outliers.contains(a) && corrupted.contains(a);
                            if keep || joins {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    GroupPrediction::new(class_scores, member_scores)
                })
                .collect();
            ClipPrediction::new(clip, groups).expect("perturbed scores are valid")
        })
        .collect()
}
