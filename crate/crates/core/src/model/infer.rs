use super::ModelOutput;
use crate::data::{argmax, Clip, ClipPrediction, DataError, GroupPrediction, MEMBERSHIP_THRESHOLD, NO_ACTIVITY};
use crate::numerics::{softmax_rows, Mask};

/// Actor pairs farther apart than `mu` (Euclidean, normalized coordinates)
/// may not attend to each other. The diagonal is always allowed.
pub fn distance_mask(centers: &[(f64, f64)], mu: f64) -> Mask {
    Mask::from_fn(centers.len(), centers.len(), |i, j| {
        let (a, b) = (centers[i], centers[j]);
        i == j || (a.0 - b.0).hypot(a.1 - b.1) <= mu
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub score_threshold: f64,
    /// Dissolve groups left with fewer than two members.
    pub dissolve_singletons: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            score_threshold: MEMBERSHIP_THRESHOLD,
            dissolve_singletons: true,
        }
    }
}

/// Turns model outputs into a prediction.
///
/// Slots whose top class is no-activity are dropped. Each actor joins the
/// remaining slot where its membership score is highest, provided the score
/// reaches the threshold, and is an outlier otherwise. Groups that end up
/// with fewer than two members (or none, when dissolution is off) are
/// removed and the assignment is repeated over the rest until nothing
/// changes, so the written scores always reproduce the member sets.
///
/// Scores are recalibrated piecewise-linearly so that `score_threshold` maps
/// to the file-level threshold of 0.5; with the default threshold they are
/// the raw logistic scores.
pub fn infer_groups(out: &ModelOutput, clip: &Clip, opts: InferOptions) -> Result<ClipPrediction, DataError> {
    let n = clip.num_actors();
    assert_eq!(out.num_actors(), n, "model output and clip disagree on actor count");
    let t = opts.score_threshold;
    assert!(t > 0.0 && t < 1.0, "score threshold must lie in (0, 1)");
    let class_scores = softmax_rows(&out.group_logits, None).expect("finite logits");
    let scores = out.membership_scores();
    let recalibrate = |s: f64| {
        if t == MEMBERSHIP_THRESHOLD {
            s
        } else if s < t {
            0.5 * s / t
        } else {
            0.5 + 0.5 * (s - t) / (1.0 - t)
        }
    };

    let mut alive: Vec<usize> = (0..out.num_slots())
        .filter(|&k| argmax(class_scores.row(k)) != NO_ACTIVITY)
        .collect();
    let min_size = if opts.dissolve_singletons { 2 } else { 1 };
    loop {
        let mut counts = vec![0usize; alive.len()];
        for j in 0..n {
            let mut best: Option<(usize, f64)> = None;
            for (slot, &k) in alive.iter().enumerate() {
                let s = recalibrate(scores.get(k, j));
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((slot, s));
                }
            }
            if let Some((slot, s)) = best {
                if s >= MEMBERSHIP_THRESHOLD {
                    counts[slot] += 1;
                }
            }
        }
        let before = alive.len();
        alive = alive
            .into_iter()
            .zip(&counts)
            .filter(|(_, c)| **c >= min_size)
            .map(|(k, _)| k)
            .collect();
        if alive.len() == before {
            break;
        }
    }

    let groups = alive
        .iter()
        .map(|&k| {
            GroupPrediction::new(
                class_scores.row(k).to_vec(),
                (0..n).map(|j| recalibrate(scores.get(k, j))).collect(),
            )
        })
        .collect();
    ClipPrediction::new(clip, groups)
}
