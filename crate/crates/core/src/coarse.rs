//! Unsupervised coarse segmentation: ray-cast dynamic detection, density
//! clustering of the dynamic points, temporal consensus and pseudo-labels.

use std::collections::VecDeque;

use thiserror::Error;

use crate::rigid::RigidTransform;
use crate::scene::{FramePair, Point};
use crate::spatial::{cell_of, CellKey, VoxelGrid};

#[derive(Debug, Error, PartialEq)]
pub enum CoarseError {
    #[error("empty cloud")]
    EmptyCloud,
    #[error("length mismatch: mask has {mask}, clusters have {clusters}")]
    LengthMismatch { mask: usize, clusters: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CoarseConfig {
    /// Occupancy voxel size of the target frame (meters).
    pub occupancy_cell: f64,
    /// Displacement-to-range ratio above which a point is dynamic.
    pub ratio_threshold: f64,
    pub eps: f64,
    pub min_pts: usize,
    pub match_radius: f64,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            occupancy_cell: 0.2,
            ratio_threshold: 0.05,
            eps: 0.8,
            min_pts: 10,
            match_radius: 1.0,
        }
    }
}

/// Per-point dynamic flags of the source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicMask {
    pub flags: Vec<bool>,
    pub ratio_threshold: f64,
    /// The displacement/range ratio behind each flag (0 for origin points).
    pub ratios: Vec<f64>,
}

impl DynamicMask {
    pub fn dynamic_indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }
}

/// Cluster ids per point: `-1` noise or static, `1..` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub assignments: Vec<i32>,
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusterSet {
    pub fn num_clusters(&self) -> usize {
        self.assignments.iter().copied().max().unwrap_or(0).max(0) as usize
    }

    pub fn members(&self, id: i32) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn clustered_indices(&self) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, a)| **a >= 1)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Instance pseudo-labels: 0 background, `1..` instances.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<u32>,
    pub source_frame: i64,
}

fn cell_center(key: CellKey, cell: f64) -> Point {
    Point::new(
        (key.0 as f64 + 0.5) * cell,
        (key.1 as f64 + 0.5) * cell,
        (key.2 as f64 + 0.5) * cell,
    )
}

/// Walks the cells pierced by the ray from the origin through `p`, starting
/// just past `p`'s own cell, and returns the first occupied one.
fn first_occupied_beyond(occupancy: &VoxelGrid, p: &Point, max_range: f64) -> Option<CellKey> {
    let cell = occupancy.cell_size();
    let norm = p.norm();
    let dir = p / norm;
    let mut key = cell_of(p, cell);
    let start = [key.0, key.1, key.2];
    let mut idx = start;
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = ((idx[a] + 1) as f64 * cell - p[a]) / dir[a];
            t_delta[a] = cell / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (idx[a] as f64 * cell - p[a]) / dir[a];
            t_delta[a] = -cell / dir[a];
        }
    }
    let budget = (max_range - norm).max(0.0);
    loop {
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[a] > budget {
            return None;
        }
        idx[a] += step[a];
        t_max[a] += t_delta[a];
        key = (idx[0], idx[1], idx[2]);
        if occupancy.is_occupied(&key) {
            return Some(key);
        }
    }
}

/// Flags source points whose surroundings changed between the two frames.
///
/// The source is first moved by the pair's ego hint, if any. For each point
/// `p`, the projection `R(p)` is `p` when its cell is occupied in the target,
/// otherwise the center of the first occupied target cell along the sensor ray
/// past `p` (or `p` again when the ray escapes). The point is dynamic when the
/// target point nearest to `R(p)` lies farther than `ratio_threshold * |p|`
/// from `p`. Points at the sensor origin are always static.
pub fn raycast_dynamic_mask(
    pair: &FramePair,
    occupancy_cell: f64,
    ratio_threshold: f64,
) -> Result<DynamicMask, CoarseError> {
    if pair.source.is_empty() || pair.target.is_empty() {
        return Err(CoarseError::EmptyCloud);
    }
    if !(occupancy_cell > 0.0) {
        return Err(CoarseError::InvalidParameter(
            "occupancy cell must be positive",
        ));
    }
    let hint = pair.ego_pose_hint.unwrap_or_else(RigidTransform::identity);
    let occupancy = VoxelGrid::build(pair.target.points(), occupancy_cell).expect("positive cell");
    // coarser grid for nearest-point lookups
    let lookup = VoxelGrid::build(pair.target.points(), 1.0).expect("positive cell");
    let max_range = pair
        .target
        .points()
        .iter()
        .map(|q| q.norm())
        .fold(0.0, f64::max)
        + 2.0 * occupancy_cell;

    let mut flags = Vec::with_capacity(pair.source.len());
    let mut ratios = Vec::with_capacity(pair.source.len());
    for p0 in pair.source.points() {
        let p = hint.apply(p0);
        let range = p.norm();
        if range == 0.0 {
            flags.push(false);
            ratios.push(0.0);
            continue;
        }
        let projected = if occupancy.is_occupied(&cell_of(&p, occupancy_cell)) {
            p
        } else {
            first_occupied_beyond(&occupancy, &p, max_range)
                .map(|k| cell_center(k, occupancy_cell))
                .unwrap_or(p)
        };
        let (j, _) = lookup.nearest_to(&projected).expect("nonempty target");
        let ratio = (pair.target.points()[j] - p).norm() / range;
        flags.push(ratio > ratio_threshold);
        ratios.push(ratio);
    }
    Ok(DynamicMask {
        flags,
        ratio_threshold,
        ratios,
    })
}

const UNVISITED: i32 = -2;
const NOISE: i32 = -1;

/// Density clustering with closed `eps` balls; a point is core when its ball
/// (itself included) holds at least `min_pts` points. Seeds are expanded in
/// ascending index order, so the output is deterministic.
pub fn dbscan(points: &[Point], eps: f64, min_pts: usize) -> Vec<i32> {
    assert!(
        eps > 0.0 && min_pts >= 1,
        "eps > 0 and min_pts >= 1 required"
    );
    if points.is_empty() {
        return Vec::new();
    }
    let grid = VoxelGrid::build(points, eps).expect("positive eps");
    let region = |i: usize| grid.ball_around(&points[i], eps, Some(i));
    let mut labels = vec![UNVISITED; points.len()];
    let mut next_id = 0;
    for i in 0..points.len() {
        if labels[i] != UNVISITED {
            continue;
        }
        let seeds = region(i);
        if seeds.len() + 1 < min_pts {
            labels[i] = NOISE;
            continue;
        }
        next_id += 1;
        labels[i] = next_id;
        let mut queue: VecDeque<usize> = seeds.into();
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = next_id;
            }
            if labels[j] != UNVISITED {
                continue;
            }
            labels[j] = next_id;
            let nb = region(j);
            if nb.len() + 1 >= min_pts {
                queue.extend(nb);
            }
        }
    }
    labels
}

/// Clusters the dynamic subset of `points`; static points get `-1`.
pub fn cluster_dynamic(
    points: &[Point],
    mask: &DynamicMask,
    eps: f64,
    min_pts: usize,
) -> Result<ClusterSet, CoarseError> {
    if points.len() != mask.flags.len() {
        return Err(CoarseError::LengthMismatch {
            mask: mask.flags.len(),
            clusters: points.len(),
        });
    }
    let idx = mask.dynamic_indices();
    let subset: Vec<Point> = idx.iter().map(|&i| points[i]).collect();
    let sub_labels = dbscan(&subset, eps, min_pts);
    let mut assignments = vec![NOISE; points.len()];
    for (k, &i) in idx.iter().enumerate() {
        assignments[i] = sub_labels[k];
    }
    Ok(ClusterSet {
        assignments,
        eps,
        min_pts,
    })
}

/// A frame's points together with its clusters.
#[derive(Debug, Clone, Copy)]
pub struct FrameClusters<'a> {
    pub points: &'a [Point],
    pub clusters: &'a ClusterSet,
}

/// Keeps a clustered point of the current frame only if some clustered point of
/// the previous or next frame lies within `match_radius`. Clusters left with
/// fewer than `min_pts` points are dissolved and ids are made contiguous again.
/// With neither neighbor frame available the clusters pass through unchanged.
pub fn temporal_refine(
    prev: Option<FrameClusters<'_>>,
    curr: FrameClusters<'_>,
    next: Option<FrameClusters<'_>>,
    match_radius: f64,
) -> ClusterSet {
    if prev.is_none() && next.is_none() {
        return curr.clusters.clone();
    }
    let neighbors: Vec<Point> = [prev, next]
        .into_iter()
        .flatten()
        .flat_map(|f| {
            f.clusters
                .clustered_indices()
                .into_iter()
                .map(move |i| f.points[i])
        })
        .collect();
    let mut assignments = curr.clusters.assignments.clone();
    if neighbors.is_empty() {
        assignments.iter_mut().for_each(|a| *a = NOISE);
    } else {
        let grid = VoxelGrid::build(&neighbors, match_radius.max(1e-3)).expect("positive cell");
        for (i, a) in assignments.iter_mut().enumerate() {
            if *a >= 1
                && grid
                    .ball_around(&curr.points[i], match_radius, None)
                    .is_empty()
            {
                *a = NOISE;
            }
        }
    }
    let min_pts = curr.clusters.min_pts;
    relabel_contiguous(&mut assignments, min_pts);
    ClusterSet {
        assignments,
        eps: curr.clusters.eps,
        min_pts,
    }
}

fn relabel_contiguous(assignments: &mut [i32], min_pts: usize) {
    let max_id = assignments.iter().copied().max().unwrap_or(0).max(0) as usize;
    let mut counts = vec![0usize; max_id + 1];
    for &a in assignments.iter() {
        if a >= 1 {
            counts[a as usize] += 1;
        }
    }
    let mut remap = vec![NOISE; max_id + 1];
    let mut next = 0;
    for id in 1..=max_id {
        if counts[id] >= min_pts.max(1) {
            next += 1;
            remap[id] = next;
        }
    }
    for a in assignments.iter_mut() {
        if *a >= 1 {
            *a = remap[*a as usize];
        }
    }
}

/// Static points and dynamic noise become background; clusters keep their ids.
pub fn assemble_pseudo_labels(
    mask: &DynamicMask,
    clusters: &ClusterSet,
    source_frame: i64,
) -> Result<PseudoLabels, CoarseError> {
    if mask.flags.len() != clusters.assignments.len() {
        return Err(CoarseError::LengthMismatch {
            mask: mask.flags.len(),
            clusters: clusters.assignments.len(),
        });
    }
    let labels = mask
        .flags
        .iter()
        .zip(&clusters.assignments)
        .map(|(&dynamic, &c)| if dynamic && c >= 1 { c as u32 } else { 0 })
        .collect();
    Ok(PseudoLabels {
        labels,
        source_frame,
    })
}

/// Mask, clusters and pseudo-labels for one pair, without temporal refinement.
#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub mask: DynamicMask,
    pub clusters: ClusterSet,
    pub pseudo: PseudoLabels,
}

pub fn label_pair(pair: &FramePair, cfg: &CoarseConfig) -> Result<CoarseOutput, CoarseError> {
    let mask = raycast_dynamic_mask(pair, cfg.occupancy_cell, cfg.ratio_threshold)?;
    let clusters = cluster_dynamic(pair.source.points(), &mask, cfg.eps, cfg.min_pts)?;
    let pseudo = assemble_pseudo_labels(&mask, &clusters, pair.source.frame_index)?;
    Ok(CoarseOutput {
        mask,
        clusters,
        pseudo,
    })
}

/// Labels the source frame of each pair in a chained sequence (pair `t`'s
/// target is pair `t + 1`'s source) with temporal consensus over neighboring
/// frames. Neighbor frames are brought into frame `t` with the pairs' ego
/// hints when present.
pub fn label_sequence(
    pairs: &[FramePair],
    cfg: &CoarseConfig,
) -> Result<Vec<CoarseOutput>, CoarseError> {
    for w in pairs.windows(2) {
        if w[0].target.frame_index != w[1].source.frame_index {
            return Err(CoarseError::InvalidParameter("pairs are not chained"));
        }
    }
    let raw: Vec<CoarseOutput> = pairs
        .iter()
        .map(|p| label_pair(p, cfg))
        .collect::<Result<_, _>>()?;
    let hint = |t: usize| {
        pairs[t]
            .ego_pose_hint
            .unwrap_or_else(RigidTransform::identity)
    };
    let moved = |t: usize, tf: RigidTransform| -> Vec<Point> {
        pairs[t]
            .source
            .points()
            .iter()
            .map(|p| tf.apply(p))
            .collect()
    };
    let mut out = Vec::with_capacity(raw.len());
    for t in 0..raw.len() {
        let prev_pts = (t > 0).then(|| moved(t - 1, hint(t - 1)));
        let next_pts = (t + 1 < raw.len()).then(|| moved(t + 1, hint(t).inverse()));
        let prev = prev_pts.as_deref().map(|points| FrameClusters {
            points,
            clusters: &raw[t - 1].clusters,
        });
        let next = next_pts.as_deref().map(|points| FrameClusters {
            points,
            clusters: &raw[t + 1].clusters,
        });
        let curr = FrameClusters {
            points: pairs[t].source.points(),
            clusters: &raw[t].clusters,
        };
        let clusters = temporal_refine(prev, curr, next, cfg.match_radius);
        let pseudo = assemble_pseudo_labels(&raw[t].mask, &clusters, pairs[t].source.frame_index)?;
        out.push(CoarseOutput {
            mask: raw[t].mask.clone(),
            clusters,
            pseudo,
        });
    }
    Ok(out)
}
