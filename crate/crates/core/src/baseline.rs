//! Spectral-clustering baseline for group localization: build an actor
//! affinity graph, cluster it into a fixed number of groups, and turn the
//! clusters into a prediction that the metrics can score.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::data::{ClassId, Clip, ClipPrediction, DataError, GroupPrediction};
use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("cluster count {k} must lie in 1..={n}")]
    InvalidK { k: usize, n: usize },
    #[error("actors {actors:?} have no affinity to anyone and use up every one of the {k} clusters")]
    DegenerateDegree { actors: Vec<usize>, k: usize },
    #[error("shape error: {0}")]
    Shape(String),
}

/// Symmetric nonnegative `N × N` matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl AffinityMatrix {
    /// Symmetrizes `(a + aᵀ) / 2` and zeroes the diagonal.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, BaselineError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(BaselineError::Shape("affinity must be square".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(BaselineError::Shape("affinities must be finite and nonnegative".into()));
        }
        Ok(Self::from_fn(n, |i, j| 0.5 * (rows[i][j] + rows[j][i])))
    }

    fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = f(i, j);
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Self { n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.values[i * self.n..(i + 1) * self.n].iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AffinityKind {
    /// `max(0, cos(f_i, f_j))` over feature vectors.
    Cosine,
    /// `exp(−‖c_i − c_j‖² / 2σ²)` over positions.
    Rbf { bandwidth: f64 },
}

pub fn build_affinity(points: &[Vec<f64>], kind: AffinityKind) -> Result<AffinityMatrix, BaselineError> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(BaselineError::Shape("points must be finite and of equal length".into()));
    }
    let n = points.len();
    Ok(match kind {
        AffinityKind::Cosine => {
            let norms: Vec<f64> = points.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            AffinityMatrix::from_fn(n, |i, j| {
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    return 0.0;
                }
                let dot: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(0.0, 1.0)
            })
        }
        AffinityKind::Rbf { bandwidth } => {
            if bandwidth.is_nan() || bandwidth <= 0.0 {
                return Err(BaselineError::Shape("rbf bandwidth must be positive".into()));
            }
            AffinityMatrix::from_fn(n, |i, j| {
                let d2: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            })
        }
    })
}

/// Eigenvalues in ascending order; `vectors[k]` is the unit eigenvector of
/// `values[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Cyclic Jacobi rotations for a dense symmetric matrix.
pub fn symmetric_eigen(m: &[Vec<f64>]) -> Eigen {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (a[p][k], a[q][k]);
                    a[p][k] = c * x - s * y;
                    a[q][k] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]).then(i.cmp(&j)));
    Eigen {
        values: order.iter().map(|&k| a[k][k]).collect(),
        vectors: order.iter().map(|&k| (0..n).map(|i| v[i][k]).collect()).collect(),
    }
}

/// `L = I − D^{−1/2} A D^{−1/2}`; rows of zero-degree nodes are left as the
/// identity row.
pub fn normalized_laplacian(a: &AffinityMatrix) -> Vec<Vec<f64>> {
    let n = a.len();
    let inv: Vec<f64> = (0..n)
        .map(|i| {
            let d = a.degree(i);
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let id = if i == j { 1.0 } else { 0.0 };
                    id - inv[i] * a.get(i, j) * inv[j]
                })
                .collect()
        })
        .collect()
}

/// Cluster label per actor; labels are numbered by first appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub labels: Vec<usize>,
}

impl Partition {
    fn canonical(raw: &[usize]) -> Self {
        let mut map = BTreeMap::new();
        let labels = raw
            .iter()
            .map(|r| {
                let next = map.len();
                *map.entry(*r).or_insert(next)
            })
            .collect();
        Self { labels }
    }

    pub fn num_clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Member indices of each cluster.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters()];
        for (i, l) in self.labels.iter().enumerate() {
            out[*l].push(i);
        }
        out
    }
}

/// Normalized spectral clustering into `k` clusters.
///
/// Actors with zero total affinity become singleton clusters; the remaining
/// actors are embedded with the eigenvectors of the `k − z` smallest
/// eigenvalues of their normalized Laplacian (rows scaled to unit length)
/// and clustered with k-means++.
pub fn spectral_cluster(a: &AffinityMatrix, k: usize, seed: u64) -> Result<Partition, BaselineError> {
    let n = a.len();
    if k == 0 || k > n {
        return Err(BaselineError::InvalidK { k, n });
    }
    let isolated: Vec<usize> = (0..n).filter(|&i| a.degree(i) == 0.0).collect();
    let rest: Vec<usize> = (0..n).filter(|&i| a.degree(i) > 0.0).collect();
    let mut raw = vec![0usize; n];
    for (c, &i) in isolated.iter().enumerate() {
        raw[i] = c;
    }
    if rest.is_empty() {
        return Ok(Partition::canonical(&raw));
    }
    if isolated.len() >= k {
        return Err(BaselineError::DegenerateDegree { actors: isolated, k });
    }
    if !isolated.is_empty() {
        log::warn!("actors {isolated:?} have zero affinity and form their own clusters");
    }
    let k_rest = k - isolated.len();
    let sub = AffinityMatrix::from_fn(rest.len(), |i, j| a.get(rest[i], rest[j]));
    let eig = symmetric_eigen(&normalized_laplacian(&sub));
    let points: Vec<Vec<f64>> = (0..rest.len())
        .map(|i| {
            let row: Vec<f64> = (0..k_rest).map(|c| eig.vectors[c][i]).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|x| x / norm).collect()
            } else {
                row
            }
        })
        .collect();
    let labels = kmeans(&points, k_rest, seed);
    for (i, &actor) in rest.iter().enumerate() {
        raw[actor] = isolated.len() + labels[i];
    }
    Ok(Partition::canonical(&raw))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from a seeded k-means++ start, capped at 100. Ties go to
/// the lowest index; empty clusters take the point farthest from its center.
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut rng = SplitMix64::new(seed);
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, di) in d.iter().enumerate() {
                if *di > 0.0 && r < *di {
                    chosen = i;
                    break;
                }
                r -= di;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
    }

    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(p, center);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    };
    let mut labels = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        for c in 0..k {
            if next.contains(&c) {
                continue;
            }
            let mut sizes = vec![0usize; k];
            next.iter().for_each(|l| sizes[*l] += 1);
            let donor = (0..n)
                .filter(|&i| sizes[next[i]] > 1)
                .map(|i| (i, sq_dist(&points[i], &centers[next[i]])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = donor {
                next[i] = c;
            }
        }
        let converged = next == labels;
        labels = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, l)| **l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, x) in center.iter_mut().enumerate() {
                *x = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
            }
        }
        if converged {
            break;
        }
    }
    labels
}

/// Turns clusters into a prediction: singletons become predicted outliers,
/// larger clusters become groups. Without `votes` each group gets a uniform
/// distribution over the activity classes; with per-actor class votes the
/// group's distribution is its vote histogram, so the majority class (lowest
/// index on ties) wins.
pub fn clusters_to_prediction(
    clip: &Clip,
    partition: &Partition,
    votes: Option<&[ClassId]>,
    num_classes: usize,
) -> Result<ClipPrediction, DataError> {
    let n = clip.num_actors();
    assert_eq!(partition.labels.len(), n, "partition and clip disagree on actor count");
    let groups = partition
        .clusters()
        .into_iter()
        .filter(|c| c.len() >= 2)
        .map(|members| {
            let class_scores = match votes {
                None => (0..=num_classes).map(|c| if c == 0 { 0.0 } else { 1.0 / num_classes as f64 }).collect(),
                Some(v) => {
                    let mut hist = vec![0.0; num_classes + 1];
                    for &m in &members {
                        hist[v[m]] += 1.0;
                    }
                    hist.iter().map(|h| h / members.len() as f64).collect()
                }
            };
            let member_scores = (0..n).map(|j| if members.contains(&j) { 1.0 } else { 0.0 }).collect();
            GroupPrediction::new(class_scores, member_scores)
        })
        .collect();
    ClipPrediction::new(clip, groups)
}
