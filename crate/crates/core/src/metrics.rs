//! Group IoU, Group mAP, Outlier mIoU and the activity confusion matrix.
//!
//! Group mAP treats every predicted group as a detection for every activity
//! class, with the predicted probability of that class as its confidence.
//! Detections are ranked across all clips; a detection is a true positive
//! when its Group IoU with a still-unmatched ground-truth group of the same
//! class in the same clip reaches θ. AP uses all-point interpolation, and the
//! mean runs over classes that have at least one ground-truth group.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{ActorId, ClassId, Clip, ClipPrediction, DataError, GroupAnnotation, GroupPrediction, NO_ACTIVITY};

/// `|a ∩ b| / |a ∪ b|`; two empty sets score 1.
pub fn group_iou(a: &BTreeSet<ActorId>, b: &BTreeSet<ActorId>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: ClassId,
    pub ap: f64,
    pub num_gt: usize,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub theta: f64,
    /// Classes with at least one ground-truth group, ascending.
    pub per_class: Vec<ClassAp>,
    pub group_map: f64,
    pub outlier_miou: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MetricOptions {
    /// Score outliers as singleton groups of an extra class `C + 1`.
    pub outliers_as_singletons: bool,
}

/// Pairs each clip with its prediction by `clip_id`.
fn align<'a>(clips: &'a [Clip], preds: &'a [ClipPrediction]) -> Result<Vec<(&'a Clip, &'a ClipPrediction)>, DataError> {
    let by_id: HashMap<&str, &ClipPrediction> = preds.iter().map(|p| (p.clip_id.as_str(), p)).collect();
    clips
        .iter()
        .map(|c| {
            by_id
                .get(c.clip_id.as_str())
                .map(|p| (c, *p))
                .ok_or_else(|| DataError::MissingPrediction(c.clip_id.clone()))
        })
        .collect()
}

pub(crate) fn num_classes(clips: &[Clip], preds: &[ClipPrediction]) -> usize {
    let gt = clips.iter().flat_map(|c| c.groups.iter().map(|g| g.activity)).max().unwrap_or(0);
    let pred = preds
        .iter()
        .flat_map(|p| p.groups.iter().map(|g| g.class_scores.len().saturating_sub(1)))
        .max()
        .unwrap_or(0);
    gt.max(pred)
}

/// All-point interpolated AP for a ranked list of true/false positives.
pub fn average_precision(ranked_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (k, hit) in ranked_tp.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

struct Detection<'a> {
    confidence: f64,
    clip_id: &'a str,
    clip: usize,
    group: usize,
}

fn ranked<'a>(mut dets: Vec<Detection<'a>>) -> Vec<Detection<'a>> {
    dets.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.clip_id.cmp(b.clip_id))
            .then(a.group.cmp(&b.group))
    });
    dets
}

/// Best still-unmatched candidate by Group IoU (lowest index on ties).
fn best_unmatched<'g>(
    members: &BTreeSet<ActorId>,
    candidates: impl Iterator<Item = (usize, &'g GroupAnnotation)>,
    matched: &[bool],
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in candidates {
        if matched[i] {
            continue;
        }
        let iou = group_iou(&g.members, members);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    best
}

fn class_ap(pairs: &[(&Clip, &ClipPrediction)], class: ClassId, theta: f64) -> ClassAp {
    let num_gt = pairs
        .iter()
        .map(|(c, _)| c.groups.iter().filter(|g| g.activity == class).count())
        .sum();
    let mut dets = Vec::new();
    for (ci, (clip, pred)) in pairs.iter().enumerate() {
        for (gi, g) in pred.groups.iter().enumerate() {
            dets.push(Detection {
                confidence: g.class_scores.get(class).copied().unwrap_or(0.0),
                clip_id: clip.clip_id.as_str(),
                clip: ci,
                group: gi,
            });
        }
    }
    let mut matched: Vec<Vec<bool>> = pairs.iter().map(|(c, _)| vec![false; c.groups.len()]).collect();
    let mut flags = Vec::new();
    for det in ranked(dets) {
        let (clip, pred) = pairs[det.clip];
        let members = &pred.groups[det.group].members;
        let candidates = clip.groups.iter().enumerate().filter(|(_, g)| g.activity == class);
        let hit = match best_unmatched(members, candidates, &matched[det.clip]) {
            Some((gi, iou)) if iou >= theta => {
                matched[det.clip][gi] = true;
                true
            }
            _ => false,
        };
        flags.push(hit);
    }
    let true_positives = flags.iter().filter(|f| **f).count();
    ClassAp {
        class,
        ap: average_precision(&flags, num_gt),
        num_gt,
        true_positives,
        false_positives: flags.len() - true_positives,
    }
}

/// Converts outliers into singleton groups of class `C + 1` on both sides.
pub fn outliers_as_singletons(clips: &[Clip], preds: &[ClipPrediction]) -> (Vec<Clip>, Vec<ClipPrediction>) {
    let singleton_class = num_classes(clips, preds) + 1;
    let clips = clips
        .iter()
        .map(|c| {
            let mut c = c.clone();
            let next_id = c.groups.iter().map(|g| g.group_id + 1).max().unwrap_or(0);
            for (k, o) in c.outliers.iter().enumerate() {
                c.groups.push(GroupAnnotation {
                    group_id: next_id + k as u32,
                    members: BTreeSet::from([*o]),
                    activity: singleton_class,
                });
            }
            c.outliers.clear();
            c
        })
        .collect();
    let preds = preds
        .iter()
        .map(|p| {
            let mut p = p.clone();
            for g in &mut p.groups {
                g.class_scores.resize(singleton_class + 1, 0.0);
            }
            for o in &p.predicted_outliers {
                let mut scores = vec![0.0; singleton_class + 1];
                scores[singleton_class] = 1.0;
                let mut g = GroupPrediction::new(scores, Vec::new());
                g.members = BTreeSet::from([*o]);
                p.groups.push(g);
            }
            p.predicted_outliers.clear();
            p
        })
        .collect();
    (clips, preds)
}

/// Group mAP at threshold `theta`, with per-class APs and Outlier mIoU.
pub fn group_map(clips: &[Clip], preds: &[ClipPrediction], theta: f64) -> Result<EvalReport, DataError> {
    let pairs = align(clips, preds)?;
    let classes = num_classes(clips, preds);
    let per_class: Vec<ClassAp> = (1..=classes)
        .map(|c| class_ap(&pairs, c, theta))
        .filter(|ap| ap.num_gt > 0)
        .collect();
    let group_map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(EvalReport {
        theta,
        per_class,
        group_map,
        outlier_miou: outlier_miou(clips, preds)?,
    })
}

pub fn evaluate(
    clips: &[Clip],
    preds: &[ClipPrediction],
    theta: f64,
    opts: MetricOptions,
) -> Result<EvalReport, DataError> {
    if opts.outliers_as_singletons {
        // outlier mIoU is reported on the original sets
        let miou = outlier_miou(clips, preds)?;
        let (c, p) = outliers_as_singletons(clips, preds);
        let mut report = group_map(&c, &p, theta)?;
        report.outlier_miou = miou;
        Ok(report)
    } else {
        group_map(clips, preds, theta)
    }
}

/// Mean over clips of the Jaccard index between true and predicted outliers.
pub fn outlier_miou(clips: &[Clip], preds: &[ClipPrediction]) -> Result<f64, DataError> {
    let pairs = align(clips, preds)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pairs
        .iter()
        .map(|(c, p)| group_iou(&c.outliers, &p.predicted_outliers))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// `(C+1) × (C+1)` counts; rows are true classes, columns predicted classes,
/// column 0 collects ground-truth groups with no prediction at IoU ≥ θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

pub fn confusion_matrix(clips: &[Clip], preds: &[ClipPrediction], theta: f64) -> Result<ConfusionMatrix, DataError> {
    let pairs = align(clips, preds)?;
    let classes = num_classes(clips, preds);
    let mut counts = vec![vec![0usize; classes + 1]; classes + 1];
    for (clip, pred) in pairs {
        let mut order: Vec<usize> = (0..pred.groups.len()).collect();
        order.sort_by(|&a, &b| {
            pred.groups[b]
                .max_activity_score()
                .partial_cmp(&pred.groups[a].max_activity_score())
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut matched = vec![false; clip.groups.len()];
        for gi in order {
            let g = &pred.groups[gi];
            if let Some((ti, iou)) = best_unmatched(&g.members, clip.groups.iter().enumerate(), &matched) {
                if iou >= theta {
                    matched[ti] = true;
                    counts[clip.groups[ti].activity][g.argmax_class()] += 1;
                }
            }
        }
        for (g, m) in clip.groups.iter().zip(matched) {
            if !m {
                counts[g.activity][NO_ACTIVITY] += 1;
            }
        }
    }
    Ok(ConfusionMatrix { counts })
}

/// Aligned plain-text rendering of one or more reports.
pub fn render_reports(reports: &[EvalReport], confusion: Option<&ConfusionMatrix>) -> String {
    let mut out = String::new();
    let classes: BTreeSet<ClassId> = reports.iter().flat_map(|r| r.per_class.iter().map(|c| c.class)).collect();
    let _ = write!(out, "{:<14}", "metric");
    for r in reports {
        let _ = write!(out, "{:>12}", format!("θ={}", r.theta));
    }
    out.push('\n');
    let _ = write!(out, "{:<14}", "Group mAP");
    for r in reports {
        let _ = write!(out, "{:>12.2}", 100.0 * r.group_map);
    }
    out.push('\n');
    for c in &classes {
        let _ = write!(out, "{:<14}", format!("  AP class {c}"));
        for r in reports {
            match r.per_class.iter().find(|a| a.class == *c) {
                Some(a) => {
                    let _ = write!(out, "{:>12.2}", 100.0 * a.ap);
                }
                None => {
                    let _ = write!(out, "{:>12}", "-");
                }
            }
        }
        out.push('\n');
    }
    if let Some(r) = reports.first() {
        let _ = writeln!(out, "{:<14}{:>12.2}", "Outlier mIoU", 100.0 * r.outlier_miou);
    }
    if let Some(cm) = confusion {
        out.push_str("\nconfusion (rows: true class, cols: predicted; col 0 = unmatched)\n");
        let _ = write!(out, "{:>6}", "");
        for j in 0..cm.counts.len() {
            let _ = write!(out, "{j:>6}");
        }
        out.push('\n');
        for (i, row) in cm.counts.iter().enumerate() {
            let _ = write!(out, "{i:>6}");
            for v in row {
                let _ = write!(out, "{v:>6}");
            }
            out.push('\n');
        }
    }
    out
}
