//! Shared fixtures, brute-force oracles and a finite-difference checker.
#![allow(dead_code)]

pub mod gradcheck;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sceneflow::losses::LossWeights;
use sceneflow::network::{backward, forward, ModelConfig, ModelParams};
use sceneflow::spatial::VoxelGrid;
use sceneflow::{MaskLogits, Point, PointCloud};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor so that near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<Point> {
    (0..n)
        .map(|_| {
            Point::new(
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            )
        })
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f` at `x`.
pub fn check_gradient(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

pub fn flatten_points(v: &[Point]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn unflatten_points(x: &[f64]) -> Vec<Point> {
    x.chunks(3).map(|c| Point::new(c[0], c[1], c[2])).collect()
}

pub fn logits_from(x: &[f64], channels: usize) -> MaskLogits {
    MaskLogits::new(Array2::from_shape_vec((x.len() / channels, channels), x.to_vec()).unwrap())
        .unwrap()
}

/// Small network fixture: every tensor random, including the flow head.
pub fn small_network(seed: u64, n: usize) -> (ModelParams, PointCloud, VoxelGrid) {
    let config = ModelConfig {
        hidden: 8,
        iterations: 2,
        channels: 4,
        voxel_size: 0.5,
        input_scale: 1.0,
    };
    let mut params = ModelParams::init(config, seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    params.flow_w = random_matrix(&mut r, 3, 8, 0.35);
    params.flow_b = random_matrix(&mut r, 1, 3, 0.35);
    let points = random_points(&mut r, n, 0.0, 1.2);
    let grid = VoxelGrid::build(&points, config.voxel_size).unwrap();
    (params, PointCloud::new(points, 0).unwrap(), grid)
}

pub fn flatten_params(p: &ModelParams) -> Vec<f64> {
    p.tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
        .collect()
}

pub fn params_from(template: &ModelParams, x: &[f64]) -> ModelParams {
    let mut p = template.clone();
    let mut k = 0;
    for (_, t) in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = x[k];
            k += 1;
        }
    }
    p
}

/// Max relative error of network parameter gradients for the linear
/// functional `sum(a * flow) + sum(b * logits)`.
pub fn network_gradient_error(seed: u64) -> f64 {
    let (params, cloud, grid) = small_network(seed, 12);
    let mut r = rng(seed ^ 0x77);
    let a = random_matrix(&mut r, cloud.len(), 3, 1.0);
    let b = random_matrix(&mut r, cloud.len(), 4, 1.0);
    let (_, _, trace) = forward(&params, &cloud, &grid).unwrap();
    let grads = backward(&params, &trace, &a, &b).unwrap();
    let objective = |x: &[f64]| {
        let p = params_from(&params, x);
        let (flow, logits, _) = forward(&p, &cloud, &grid).unwrap();
        (&flow.to_array() * &a).sum() + (&logits.logits * &b).sum()
    };
    check_gradient(&flatten_params(&params), &flatten_params(&grads), objective)
}

pub fn test_weights() -> LossWeights {
    LossWeights {
        dom_delta: 0.8,
        ..LossWeights::default()
    }
}

pub fn brute_knn(points: &[Point], i: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..points.len())
        .filter(|&j| j != i)
        .map(|j| ((points[j] - points[i]).norm_squared(), j))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

pub fn brute_ball(points: &[Point], i: usize, r: f64) -> Vec<usize> {
    (0..points.len())
        .filter(|&j| j != i && (points[j] - points[i]).norm_squared() <= r * r)
        .collect()
}

/// Connected components of core points under eps-adjacency, with each border
/// point given to the earliest-expanded adjacent cluster, as a set partition.
pub fn brute_dbscan_partition(
    points: &[Point],
    eps: f64,
    min_pts: usize,
) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = points.len();
    let adj = |i: usize, j: usize| (points[i] - points[j]).norm_squared() <= eps * eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| adj(i, j)).count() >= min_pts)
        .collect();
    let mut comp = vec![usize::MAX; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for s in 0..n {
        if !core[s] || comp[s] != usize::MAX {
            continue;
        }
        let id = clusters.len();
        let mut members = Vec::new();
        let mut stack = vec![s];
        comp[s] = id;
        while let Some(i) = stack.pop() {
            members.push(i);
            for j in 0..n {
                if core[j] && comp[j] == usize::MAX && adj(i, j) {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
        clusters.push(members);
    }
    // a border point belongs to the cluster of its lowest-index adjacent core point's
    // cluster among those expanded first; order clusters by their lowest core index
    let mut noise = Vec::new();
    for i in 0..n {
        if core[i] {
            continue;
        }
        let owner = (0..n)
            .filter(|&j| core[j] && adj(i, j))
            .map(|j| comp[j])
            .min();
        match owner {
            Some(c) => clusters[c].push(i),
            None => noise.push(i),
        }
    }
    for c in &mut clusters {
        c.sort_unstable();
    }
    (clusters, noise)
}

pub fn brute_rand_index(pred: &[u32], gt: &[u32]) -> f64 {
    let n = pred.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0u64;
    let mut total = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (pred[i] == pred[j]) == (gt[i] == gt[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}
