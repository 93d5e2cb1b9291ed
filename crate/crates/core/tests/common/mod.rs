#![allow(dead_code)]

use std::collections::BTreeSet;

use gad_core::data::{ActorId, BBox, Clip, FrameSize, GroupAnnotation, Tracklet};
use gad_core::model::{ClipFeatures, FrameFeatures};
use gad_core::rng::SplitMix64;

/// Clip on a 100×100 frame with one box per actor per frame, centered at the
/// given normalized positions. Actor ids are 1-based positions.
pub fn clip_at(centers: &[(f64, f64)], frames: u32, groups: &[(&[ActorId], usize)]) -> Clip {
    let tracklets = centers
        .iter()
        .enumerate()
        .map(|(i, (cx, cy))| {
            let (x, y) = (cx * 100.0, cy * 100.0);
            Tracklet {
                actor_id: i as ActorId + 1,
                boxes: (0..frames).map(|f| (f, BBox::new(x - 5.0, y - 10.0, x + 5.0, y + 10.0))).collect(),
            }
        })
        .collect();
    let grouped: BTreeSet<ActorId> = groups.iter().flat_map(|(m, _)| m.iter().copied()).collect();
    Clip {
        clip_id: "c".into(),
        frame_size: FrameSize { width: 100, height: 100 },
        num_frames: frames,
        tracklets,
        groups: groups
            .iter()
            .enumerate()
            .map(|(gi, (m, a))| GroupAnnotation {
                group_id: gi as u32,
                members: m.iter().copied().collect(),
                activity: *a,
            })
            .collect(),
        outliers: (1..=centers.len() as ActorId).filter(|a| !grouped.contains(a)).collect(),
    }
}

/// Uniform(-1, 1) features.
pub fn features(clip: &Clip, frames: usize, width: usize, seed: u64) -> ClipFeatures {
    let mut rng = SplitMix64::new(seed);
    ClipFeatures {
        clip_id: clip.clip_id.clone(),
        frames: (0..frames)
            .map(|_| FrameFeatures {
                actor_feats: (0..clip.num_actors())
                    .map(|_| (0..width).map(|_| rng.uniform() * 2.0 - 1.0).collect())
                    .collect(),
                scene_feats: vec![],
            })
            .collect(),
    }
}
