//! Finite-difference checks of every analytic gradient, one function per
//! term. Each returns the worst relative error for its seed.

use ndarray::Array2;
use rand::Rng;
use sceneflow::losses::*;
use sceneflow::network::{backward, forward, ModelParams};
use sceneflow::spatial::NeighborQueryConfig;
use sceneflow::{FlowField, FlowKind, Point};

use super::*;

pub fn chamfer_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let warped = random_points(&mut r, 16, 0.0, 2.0);
    let target = random_points(&mut r, 13, 0.0, 2.0);
    let (_, g) = chamfer_loss(&warped, &target).unwrap();
    check_gradient(&flatten_points(&warped), &flatten_points(&g), |x| {
        chamfer_loss(&unflatten_points(x), &target).unwrap().0
    })
}

pub fn bf_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = random_matrix(&mut r, 16, 4, 3.0);
    let pseudo: Vec<u32> = (0..16).map(|_| r.random_range(0..3)).collect();
    let w = test_weights();
    let (_, g) = bf_loss(&logits_from(logits.as_slice().unwrap(), 4), &pseudo, &w).unwrap();
    check_gradient(logits.as_slice().unwrap(), g.as_slice().unwrap(), |x| {
        bf_loss(&logits_from(x, 4), &pseudo, &w).unwrap().0
    })
}

/// Channels by position so that each foreground channel holds several points.
pub fn banded_logits(points: &[Point]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 4), |(i, c)| {
        let band = ((points[i].x / 0.5) as usize).min(3);
        if c == band {
            2.0
        } else {
            0.1 * c as f64
        }
    })
}

pub fn rigid_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let points = random_points(&mut r, 16, 0.0, 2.0);
    let logits = logits_from(banded_logits(&points).as_slice().unwrap(), 4);
    let flow = random_points(&mut r, 16, -0.3, 0.3);
    let (v, g) = rigid_loss(&points, &logits, &flow).unwrap();
    assert!(v > 0.0, "fixture should not be rigid");
    check_gradient(&flatten_points(&flow), &flatten_points(&g), |x| {
        rigid_loss(&points, &logits, &unflatten_points(x))
            .unwrap()
            .0
    })
}

pub fn smc_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let points = random_points(&mut r, 16, 0.0, 1.5);
    let graph = NeighborGraph::build(
        &points,
        &NeighborQueryConfig {
            k: 4,
            radius: 0.5,
            knn_max_dist: 1.0,
        },
    );
    let logits = random_matrix(&mut r, 16, 4, 2.0);
    let w = test_weights();
    let (_, g) = smc_loss(&graph, &logits_from(logits.as_slice().unwrap(), 4), &w).unwrap();
    check_gradient(logits.as_slice().unwrap(), g.as_slice().unwrap(), |x| {
        smc_loss(&graph, &logits_from(x, 4), &w).unwrap().0
    })
}

/// Checked with every pair and with a strided subset.
pub fn dom_error(seed: u64) -> f64 {
    [7, 4096]
        .into_iter()
        .map(|max_pairs| {
            let mut r = rng(seed);
            let points = random_points(&mut r, 16, 0.0, 3.0);
            let logits = random_matrix(&mut r, 16, 4, 2.0);
            let w = test_weights();
            let (v, g) = dom_loss(
                &points,
                &logits_from(logits.as_slice().unwrap(), 4),
                0.8,
                max_pairs,
                &w,
            )
            .unwrap();
            assert!(v != w.l_min, "fixture should have foreground pairs");
            check_gradient(logits.as_slice().unwrap(), g.as_slice().unwrap(), |x| {
                dom_loss(&points, &logits_from(x, 4), 0.8, max_pairs, &w)
                    .unwrap()
                    .0
            })
        })
        .fold(0.0, f64::max)
}

pub fn loss_fixture(seed: u64) -> (LossContext, Vec<Point>, Array2<f64>) {
    let mut r = rng(seed);
    let source = random_points(&mut r, 16, 0.0, 2.0);
    let target = random_points(&mut r, 14, 0.0, 2.0);
    let pseudo: Vec<u32> = (0..16).map(|_| r.random_range(0..3)).collect();
    let neighbors = NeighborQueryConfig {
        k: 4,
        radius: 0.6,
        knn_max_dist: 1.0,
    };
    let ctx = LossContext::new(&source, &target, pseudo, &neighbors).unwrap();
    let flow = random_points(&mut r, 16, -0.2, 0.2);
    let logits = banded_logits(&source) + random_matrix(&mut r, 16, 4, 0.3);
    (ctx, flow, logits)
}

/// Total loss with respect to flow and to logits.
pub fn total_error(seed: u64) -> f64 {
    let w = test_weights();
    let (ctx, flow, logits) = loss_fixture(seed);
    let l = logits_from(logits.as_slice().unwrap(), 4);
    let out = total_loss(&ctx, &flow, &l, &w).unwrap();
    let flow_err = check_gradient(
        &flatten_points(&flow),
        &flatten_points(&out.grad_flow),
        |x| {
            total_loss(&ctx, &unflatten_points(x), &l, &w)
                .unwrap()
                .terms
                .total
        },
    );
    let logit_err = check_gradient(
        logits.as_slice().unwrap(),
        out.grad_logits.as_slice().unwrap(),
        |x| {
            total_loss(&ctx, &flow, &logits_from(x, 4), &w)
                .unwrap()
                .terms
                .total
        },
    );
    flow_err.max(logit_err)
}

/// Parameters through the network and the full loss.
pub fn end_to_end_error(seed: u64) -> f64 {
    let w = test_weights();
    let (params, cloud, grid) = small_network(seed, 16);
    let mut r = rng(seed ^ 0x5);
    let target = random_points(&mut r, 14, 0.0, 1.2);
    let pseudo: Vec<u32> = (0..16).map(|_| r.random_range(0..3)).collect();
    let ctx = LossContext::new(
        cloud.points(),
        &target,
        pseudo,
        &NeighborQueryConfig::default(),
    )
    .unwrap();
    let ego = FlowField::new(random_points(&mut r, 16, -0.1, 0.1), FlowKind::Ego);
    let loss = |p: &ModelParams| {
        let (res, logits, trace) = forward(p, &cloud, &grid).unwrap();
        let total = FlowField::compose(&ego, &res).unwrap();
        (
            total_loss(&ctx, &total.vectors, &logits, &w).unwrap(),
            trace,
        )
    };
    let (out, trace) = loss(&params);
    let gf = FlowField::new(out.grad_flow.clone(), FlowKind::Residual).to_array();
    let grads = backward(&params, &trace, &gf, &out.grad_logits).unwrap();
    check_gradient(&flatten_params(&params), &flatten_params(&grads), |x| {
        loss(&params_from(&params, x)).0.terms.total
    })
}

pub type Check = (&'static str, fn(u64) -> f64);

pub const ALL: [Check; 8] = [
    ("network", network_gradient_error),
    ("chamfer", chamfer_error),
    ("bf", bf_error),
    ("rigid", rigid_error),
    ("smc", smc_error),
    ("dom", dom_error),
    ("total", total_error),
    ("end_to_end", end_to_end_error),
];
