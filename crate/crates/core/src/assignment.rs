//! Exact bipartite assignment and the two matching costs built on it: group
//! matching for set-prediction training, and tracklet matching for the
//! detection-based setting.

use std::cmp::Ordering;

use thiserror::Error;

use crate::data::{ActorId, BBox, ClassId, GroupPrediction, Tracklet, NO_ACTIVITY};

#[derive(Debug, Error, PartialEq)]
pub enum AssignmentError {
    #[error("cost matrix has {rows} rows but only {cols} columns")]
    Shape { rows: usize, cols: usize },
    #[error("cost matrix needs {expected} values, got {got}")]
    Size { expected: usize, got: usize },
    #[error("cost entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("membership vectors disagree: expected {expected} actors, found {found}")]
    Dim { expected: usize, found: usize },
    #[error("tracklet of actor {actor_id} has no box on frame {frame}")]
    FrameMismatch { actor_id: ActorId, frame: u32 },
}

/// Dense row-major cost matrix; rows are ground-truth items, columns are
/// predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AssignmentError> {
        if values.len() != rows * cols {
            return Err(AssignmentError::Size {
                expected: rows * cols,
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AssignmentError::NonFinite {
                row: i / cols.max(1),
                col: i % cols.max(1),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignmentError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(AssignmentError::Size {
                expected: cols,
                got: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CostMatrix {
        let mut values = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            values.extend(cols.iter().map(|&c| self.get(r, c)));
        }
        CostMatrix {
            rows: rows.len(),
            cols: cols.len(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `assignment[row]` is the column assigned to `row`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost injective assignment of rows to columns.
///
/// Among optimal assignments the lexicographically smallest assignment vector
/// is returned, so results do not depend on solver internals.
pub fn hungarian(costs: &CostMatrix) -> Result<AssignmentResult, AssignmentError> {
    if costs.rows > costs.cols {
        return Err(AssignmentError::Shape {
            rows: costs.rows,
            cols: costs.cols,
        });
    }
    if costs.rows == 0 {
        return Ok(AssignmentResult {
            assignment: Vec::new(),
            total_cost: 0.0,
        });
    }
    let optimum = solve_min_cost(costs);
    let scale = costs.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * (1.0 + scale * costs.rows as f64);

    let mut assignment = Vec::with_capacity(costs.rows);
    let mut free_cols: Vec<usize> = (0..costs.cols).collect();
    let mut prefix = 0.0;
    for row in 0..costs.rows {
        let rest_rows: Vec<usize> = (row + 1..costs.rows).collect();
        let mut chosen = None;
        for (slot, &col) in free_cols.iter().enumerate() {
            let remaining: Vec<usize> = free_cols.iter().copied().filter(|&c| c != col).collect();
            let tail = if rest_rows.is_empty() {
                0.0
            } else {
                solve_min_cost(&costs.submatrix(&rest_rows, &remaining))
            };
            if prefix + costs.get(row, col) + tail <= optimum + tol {
                chosen = Some(slot);
                break;
            }
        }
        // The optimum is always reachable from an optimal prefix; fall back to
        // the first free column only if rounding defeats the tolerance.
        let slot = chosen.unwrap_or(0);
        let col = free_cols.remove(slot);
        prefix += costs.get(row, col);
        assignment.push(col);
    }
    let total_cost = assignment.iter().enumerate().map(|(r, &c)| costs.get(r, c)).sum();
    Ok(AssignmentResult {
        assignment,
        total_cost,
    })
}

/// Shortest augmenting path with potentials, O(rows² · cols). Returns the
/// optimal total cost.
fn solve_min_cost(costs: &CostMatrix) -> f64 {
    let n = costs.rows;
    let m = costs.cols;
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| costs.get(owner[j] - 1, j - 1))
        .sum()
}

/// Ground-truth side of group matching. `activity == NO_ACTIVITY` marks a
/// padding (∅) group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTarget {
    pub activity: ClassId,
    /// 0/1 membership per clip actor.
    pub membership: Vec<f64>,
}

impl GroupTarget {
    pub fn empty(num_actors: usize) -> Self {
        Self {
            activity: NO_ACTIVITY,
            membership: vec![0.0; num_actors],
        }
    }

    pub fn is_empty_group(&self) -> bool {
        self.activity == NO_ACTIVITY
    }
}

/// Matching cost between ground-truth groups (rows) and predicted slots
/// (columns): `-p̂(y) + ‖m - m̂‖₂` for real groups, 0 for ∅ rows. Fewer targets
/// than predictions are padded with ∅ rows.
pub fn group_matching_cost(
    targets: &[GroupTarget],
    preds: &[GroupPrediction],
) -> Result<CostMatrix, AssignmentError> {
    let k = preds.len();
    if targets.len() > k {
        return Err(AssignmentError::Shape {
            rows: targets.len(),
            cols: k,
        });
    }
    let n = targets
        .first()
        .map(|t| t.membership.len())
        .or_else(|| preds.first().map(|p| p.member_scores.len()))
        .unwrap_or(0);
    for found in targets
        .iter()
        .map(|t| t.membership.len())
        .chain(preds.iter().map(|p| p.member_scores.len()))
    {
        if found != n {
            return Err(AssignmentError::Dim { expected: n, found });
        }
    }
    let mut values = vec![0.0; k * k];
    for (i, target) in targets.iter().enumerate() {
        if target.is_empty_group() {
            continue;
        }
        for (j, pred) in preds.iter().enumerate() {
            let prob = pred.class_scores.get(target.activity).copied().unwrap_or(0.0);
            let dist = target
                .membership
                .iter()
                .zip(&pred.member_scores)
                .map(|(m, s)| (m - s) * (m - s))
                .sum::<f64>()
                .sqrt();
            values[i * k + j] = -prob + dist;
        }
    }
    CostMatrix::new(k, k, values)
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackletCostWeights {
    pub l1: f64,
    pub giou: f64,
}

impl Default for TrackletCostWeights {
    fn default() -> Self {
        Self { l1: 5.0, giou: 2.0 }
    }
}

fn boxes_on(t: &Tracklet, frames: &[u32]) -> Result<Vec<BBox>, AssignmentError> {
    frames
        .iter()
        .map(|&f| {
            t.box_at(f).ok_or(AssignmentError::FrameMismatch {
                actor_id: t.actor_id,
                frame: f,
            })
        })
        .collect()
}

/// Tracklet matching cost summed over `frames`:
/// `λ_L1·‖b − b̂‖₁ + λ_giou·(1 − GIoU(b, b̂))`. Boxes are expected in
/// normalized coordinates.
pub fn tracklet_matching_cost(
    gt: &[Tracklet],
    pred: &[Tracklet],
    frames: &[u32],
    weights: TrackletCostWeights,
) -> Result<CostMatrix, AssignmentError> {
    let gt_boxes = gt.iter().map(|t| boxes_on(t, frames)).collect::<Result<Vec<_>, _>>()?;
    let pred_boxes = pred.iter().map(|t| boxes_on(t, frames)).collect::<Result<Vec<_>, _>>()?;
    let mut values = Vec::with_capacity(gt.len() * pred.len());
    for g in &gt_boxes {
        for p in &pred_boxes {
            let cost: f64 = g
                .iter()
                .zip(p)
                .map(|(a, b)| {
                    let l1 = (a.x1 - b.x1).abs() + (a.y1 - b.y1).abs() + (a.x2 - b.x2).abs() + (a.y2 - b.y2).abs();
                    weights.l1 * l1 + weights.giou * (1.0 - giou(a, b))
                })
                .sum();
            values.push(cost);
        }
    }
    CostMatrix::new(gt.len(), pred.len(), values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityMatch {
    pub pred_id: ActorId,
    pub gt_id: Option<ActorId>,
    pub mean_iou: f64,
}

/// Greedy identity matching by mean IoU over `frames`. A frame on which
/// either tracklet has no box contributes IoU 0. Pairs below `iou_threshold`
/// stay unmatched; each ground-truth tracklet is used at most once.
pub fn identity_match(gt: &[Tracklet], pred: &[Tracklet], frames: &[u32], iou_threshold: f64) -> Vec<IdentityMatch> {
    let mean_iou = |g: &Tracklet, p: &Tracklet| -> f64 {
        if frames.is_empty() {
            return 0.0;
        }
        frames
            .iter()
            .map(|&f| match (g.box_at(f), p.box_at(f)) {
                (Some(a), Some(b)) => a.iou(&b),
                _ => 0.0,
            })
            .sum::<f64>()
            / frames.len() as f64
    };
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            pairs.push((mean_iou(g, p), gi, pi));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut result: Vec<IdentityMatch> = pred
        .iter()
        .map(|p| IdentityMatch {
            pred_id: p.actor_id,
            gt_id: None,
            mean_iou: 0.0,
        })
        .collect();
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    for (iou, gi, pi) in pairs {
        if iou < iou_threshold || gt_used[gi] || pred_used[pi] {
            continue;
        }
        gt_used[gi] = true;
        pred_used[pi] = true;
        result[pi].gt_id = Some(gt[gi].actor_id);
        result[pi].mean_iou = iou;
    }
    result
}
