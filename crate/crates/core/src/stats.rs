//! Dataset characterization: group sizes, box aspect ratios, population
//! density and inter-group distance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BBox, Clip};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("convex hull is degenerate (zero area)")]
    DegenerateHull,
    #[error("clip {0}: no group member has a box on frame {1}")]
    NoParticipants(String, u32),
    #[error("clip {0}: group {1} has no non-member in the clip")]
    NoCounterpart(String, u32),
}

/// Height over width.
pub fn aspect_ratio(b: &BBox) -> f64 {
    b.height() / b.width()
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counterclockwise convex hull (Andrew's monotone chain) without collinear
/// vertices.
pub fn convex_hull(points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>, StatsError> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    pts.dedup();
    if pts.len() < 3 {
        return Err(StatsError::DegenerateHull);
    }
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 || polygon_area(&lower) <= 0.0 {
        return Err(StatsError::DegenerateHull);
    }
    Ok(lower)
}

/// Shoelace area; positive for counterclockwise vertex order.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (x0, y0) = poly[i];
            let (x1, y1) = poly[(i + 1) % n];
            x0 * y1 - x1 * y0
        })
        .sum();
    twice / 2.0
}

/// Exact area of a union of axis-aligned boxes by coordinate compression.
pub fn union_area(boxes: &[BBox]) -> f64 {
    let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.x1, b.x2]).collect();
    let mut ys: Vec<f64> = boxes.iter().flat_map(|b| [b.y1, b.y2]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let mut area = 0.0;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let (cx, cy) = ((xw[0] + xw[1]) / 2.0, (yw[0] + yw[1]) / 2.0);
            if boxes.iter().any(|b| b.x1 <= cx && cx <= b.x2 && b.y1 <= cy && cy <= b.y2) {
                area += (xw[1] - xw[0]) * (yw[1] - yw[0]);
            }
        }
    }
    area
}

/// Union area of the boxes over the area of the convex hull of their corners.
pub fn density_of_boxes(boxes: &[BBox]) -> Result<f64, StatsError> {
    let corners: Vec<(f64, f64)> = boxes.iter().flat_map(|b| b.corners()).collect();
    let hull = convex_hull(&corners)?;
    Ok(union_area(boxes) / polygon_area(&hull))
}

/// Population density of the group participants on `frame`; outliers and
/// members without a box on that frame are left out.
pub fn population_density(clip: &Clip, frame: u32) -> Result<f64, StatsError> {
    let boxes: Vec<BBox> = clip
        .groups
        .iter()
        .flat_map(|g| g.members.iter())
        .filter_map(|a| clip.tracklet(*a).and_then(|t| t.box_at(frame)))
        .collect();
    if boxes.is_empty() {
        return Err(StatsError::NoParticipants(clip.clip_id.clone(), frame));
    }
    density_of_boxes(&boxes)
}

fn key_frame_density(clip: &Clip) -> Option<f64> {
    let boxes: Vec<BBox> = clip
        .groups
        .iter()
        .flat_map(|g| g.members.iter())
        .filter_map(|a| clip.tracklet(*a).map(|t| t.key_box()))
        .collect();
    if boxes.is_empty() {
        None
    } else {
        density_of_boxes(&boxes).ok()
    }
}

/// Area-normalized distance between two boxes' centers.
pub fn normalized_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
    d / ((a.area() + b.area()) / 2.0).sqrt()
}

/// Per-group distance to the nearest non-member on the key frame, `None` for
/// a group whose clip has no other actors.
fn group_distances(clip: &Clip) -> Vec<(u32, Option<f64>)> {
    clip.groups
        .iter()
        .map(|g| {
            let mut best: Option<f64> = None;
            for i in &g.members {
                let Some(bi) = clip.tracklet(*i).map(|t| t.key_box()) else {
                    continue;
                };
                for t in clip.tracklets.iter().filter(|t| !g.members.contains(&t.actor_id)) {
                    let d = normalized_distance(&bi, &t.key_box());
                    if best.is_none_or(|b| d < b) {
                        best = Some(d);
                    }
                }
            }
            (g.group_id, best)
        })
        .collect()
}

/// Mean over all groups of the minimum normalized distance from a member to
/// any non-member of the same clip, measured on each clip's key frame.
pub fn inter_group_distance(clips: &[Clip]) -> Result<f64, StatsError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for clip in clips {
        for (gid, d) in group_distances(clip) {
            let d = d.ok_or_else(|| StatsError::NoCounterpart(clip.clip_id.clone(), gid))?;
            total += d;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Bin edges; bin `i` covers `[edges[i], edges[i+1])`, the last bin is
    /// open-ended.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn fixed(lo: f64, width: f64, bins: usize, values: impl Iterator<Item = f64>) -> Self {
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let i = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Self { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let upper = if i + 2 == self.edges.len() {
                "inf".to_string()
            } else {
                self.edges[i + 1].to_string()
            };
            out.push_str(&format!("{},{},{}\n", self.edges[i], upper, c));
        }
        out
    }
}

fn count_csv(header: &str, hist: &BTreeMap<usize, usize>) -> String {
    let mut out = format!("{header},count\n");
    for (k, v) in hist {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub num_clips: usize,
    pub num_groups: usize,
    /// group size → number of groups
    pub group_size_hist: BTreeMap<usize, usize>,
    /// actors in a clip → number of clips
    pub actors_per_clip_hist: BTreeMap<usize, usize>,
    /// Every annotated box, bins of 0.25 from 0 to 4.
    pub aspect_ratio_hist: Histogram,
    /// Mean over clips with at least one non-degenerate key-frame hull.
    pub population_density: f64,
    /// Mean over groups that have a counterpart in their clip.
    pub inter_group_distance: f64,
    pub groups_without_counterpart: usize,
}

impl StatsSummary {
    /// CSV files keyed by suggested file name.
    pub fn csv_files(&self) -> Vec<(&'static str, String)> {
        vec![
            ("group_size.csv", count_csv("group_size", &self.group_size_hist)),
            ("actors_per_clip.csv", count_csv("actors", &self.actors_per_clip_hist)),
            ("aspect_ratio.csv", self.aspect_ratio_hist.to_csv()),
        ]
    }
}

pub fn summarize(clips: &[Clip]) -> StatsSummary {
    let mut group_size_hist = BTreeMap::new();
    let mut actors_per_clip_hist = BTreeMap::new();
    for c in clips {
        *actors_per_clip_hist.entry(c.num_actors()).or_insert(0) += 1;
        for g in &c.groups {
            *group_size_hist.entry(g.members.len()).or_insert(0) += 1;
        }
    }
    let ratios = clips
        .iter()
        .flat_map(|c| c.tracklets.iter().flat_map(|t| t.boxes.iter().map(|(_, b)| aspect_ratio(b))));
    let aspect_ratio_hist = Histogram::fixed(0.0, 0.25, 16, ratios);

    let densities: Vec<f64> = clips.iter().filter_map(key_frame_density).collect();
    let population_density = if densities.is_empty() {
        0.0
    } else {
        densities.iter().sum::<f64>() / densities.len() as f64
    };
    let dists: Vec<Option<f64>> = clips.iter().flat_map(group_distances).map(|(_, d)| d).collect();
    let found: Vec<f64> = dists.iter().flatten().copied().collect();
    StatsSummary {
        num_clips: clips.len(),
        num_groups: dists.len(),
        group_size_hist,
        actors_per_clip_hist,
        aspect_ratio_hist,
        population_density,
        inter_group_distance: if found.is_empty() {
            0.0
        } else {
            found.iter().sum::<f64>() / found.len() as f64
        },
        groups_without_counterpart: dists.len() - found.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FrameSize, GroupAnnotation, Tracklet};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn clip_with(boxes: &[BBox], groups: &[&[u32]]) -> Clip {
        let grouped: BTreeSet<u32> = groups.iter().flat_map(|g| g.iter().copied()).collect();
        Clip {
            clip_id: "s".into(),
            frame_size: FrameSize { width: 100, height: 100 },
            num_frames: 1,
            tracklets: boxes
                .iter()
                .enumerate()
                .map(|(i, b)| Tracklet {
                    actor_id: i as u32,
                    boxes: vec![(0, *b)],
                })
                .collect(),
            groups: groups
                .iter()
                .enumerate()
                .map(|(i, m)| GroupAnnotation {
                    group_id: i as u32,
                    members: m.iter().copied().collect(),
                    activity: 1,
                })
                .collect(),
            outliers: (0..boxes.len() as u32).filter(|a| !grouped.contains(a)).collect(),
        }
    }

    fn unit(x: f64, y: f64) -> BBox {
        BBox::new(x, y, x + 1.0, y + 1.0)
    }

    #[test]
    fn aspect_ratios() {
        assert_eq!(aspect_ratio(&BBox::new(0.0, 0.0, 3.0, 3.0)), 1.0);
        assert_eq!(aspect_ratio(&BBox::new(0.0, 0.0, 50.0, 100.0)), 2.0);
        assert_eq!(aspect_ratio(&BBox::new(0.0, 0.0, 200.0, 100.0)), 0.5);
    }

    #[test]
    fn hull_examples() {
        let square = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let h = convex_hull(&square).unwrap();
        assert_eq!(h.len(), 4);
        assert_eq!(polygon_area(&h), 1.0);
        let mut with_inner = square.to_vec();
        with_inner.push((0.5, 0.5));
        assert_eq!(convex_hull(&with_inner).unwrap(), h);
        let tri = convex_hull(&[(0.0, 0.0), (4.0, 0.0), (0.0, 3.0)]).unwrap();
        assert_eq!(polygon_area(&tri), 6.0);
        assert_eq!(
            convex_hull(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]),
            Err(StatsError::DegenerateHull)
        );
    }

    #[test]
    fn density_examples() {
        let adjacent = clip_with(&[unit(0.0, 0.0), unit(1.0, 0.0)], &[&[0, 1]]);
        assert_eq!(population_density(&adjacent, 0).unwrap(), 1.0);
        let gap = clip_with(&[unit(0.0, 0.0), unit(2.0, 0.0)], &[&[0, 1]]);
        assert!((population_density(&gap, 0).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(density_of_boxes(&[unit(3.0, 4.0)]).unwrap(), 1.0);
        // outliers do not count
        let with_outlier = clip_with(&[unit(0.0, 0.0), unit(1.0, 0.0), unit(9.0, 9.0)], &[&[0, 1]]);
        assert_eq!(population_density(&with_outlier, 0).unwrap(), 1.0);
        assert!(matches!(population_density(&adjacent, 5), Err(StatsError::NoParticipants(..))));
    }

    #[test]
    fn union_area_overlaps() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert_eq!(union_area(&[a, b]), 7.0);
        assert_eq!(union_area(&[a, a]), 4.0);
    }

    #[test]
    fn distance_examples() {
        let two = clip_with(&[unit(0.0, 0.0), unit(2.0, 0.0), unit(10.0, 10.0)], &[&[0, 2]]);
        // member 0 to outlier 1: centers 2 apart, unit areas
        assert!((inter_group_distance(&[two]).unwrap() - 2.0).abs() < 1e-12);
        let same = clip_with(&[unit(0.0, 0.0), unit(0.0, 0.0), unit(5.0, 5.0)], &[&[0, 2]]);
        assert_eq!(inter_group_distance(&[same]).unwrap(), 0.0);
        // areas 1 and 3, centers (0.5,0.5) and (1.5,1.5)
        let a = unit(0.0, 0.0);
        let b = BBox::new(1.0, 0.0, 2.0, 3.0);
        assert_eq!(b.area(), 3.0);
        assert!((normalized_distance(&a, &b) - 1.0).abs() < 1e-12);
        let alone = clip_with(&[unit(0.0, 0.0), unit(1.0, 0.0)], &[&[0, 1]]);
        assert!(matches!(inter_group_distance(&[alone]), Err(StatsError::NoCounterpart(..))));
    }

    #[test]
    fn summary_counts() {
        let c = clip_with(&[unit(0.0, 0.0), unit(1.0, 0.0), unit(3.0, 0.0)], &[&[0, 1]]);
        let s = summarize(&[c.clone(), c]);
        assert_eq!(s.group_size_hist, BTreeMap::from([(2, 2)]));
        assert_eq!(s.actors_per_clip_hist, BTreeMap::from([(3, 2)]));
        assert_eq!(s.aspect_ratio_hist.total(), 6);
        assert_eq!(s.population_density, 1.0);
        assert!((s.inter_group_distance - 2.0).abs() < 1e-12);
        assert!(s.csv_files()[2].1.starts_with("lower,upper,count"));
    }

    proptest! {
        #[test]
        fn density_at_most_one(v in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0, 0.1f64..3.0, 0.1f64..3.0), 1..6)) {
            let boxes: Vec<BBox> = v.iter().map(|(x, y, w, h)| BBox::new(*x, *y, x + w, y + h)).collect();
            let d = density_of_boxes(&boxes).unwrap();
            prop_assert!(d > 0.0 && d <= 1.0 + 1e-12);
        }

        #[test]
        fn hull_area_invariant_under_permutation_and_translation(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..10),
            dx in -3.0f64..3.0, dy in -3.0f64..3.0,
        ) {
            if let Ok(h) = convex_hull(&pts) {
                let a = polygon_area(&h);
                let mut rev = pts.clone();
                rev.reverse();
                let moved: Vec<_> = pts.iter().map(|(x, y)| (x + dx, y + dy)).collect();
                prop_assert!((polygon_area(&convex_hull(&rev).unwrap()) - a).abs() < 1e-9);
                prop_assert!((polygon_area(&convex_hull(&moved).unwrap()) - a).abs() < 1e-9);
            }
        }

        #[test]
        fn distance_scale_invariant(
            v in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0, 0.1f64..3.0, 0.1f64..3.0), 3..7),
            s in 0.1f64..20.0,
        ) {
            let boxes: Vec<BBox> = v.iter().map(|(x, y, w, h)| BBox::new(*x, *y, x + w, y + h)).collect();
            let scaled: Vec<BBox> = boxes.iter().map(|b| BBox::new(b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s)).collect();
            let d0 = inter_group_distance(&[clip_with(&boxes, &[&[0, 1]])]).unwrap();
            let d1 = inter_group_distance(&[clip_with(&scaled, &[&[0, 1]])]).unwrap();
            prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1.0));
        }
    }
}
