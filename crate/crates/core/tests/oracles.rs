//! Brute-force and construct-and-recover oracles.

mod common;

use common::*;
use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use sceneflow::coarse::{dbscan, raycast_dynamic_mask, CoarseConfig};
use sceneflow::metrics::{rand_index, rand_index_sampled};
use sceneflow::rigid::{icp_ego_motion, kabsch_align, IcpConfig};
use sceneflow::scene::read_frame;
use sceneflow::spatial::VoxelGrid;
use sceneflow::synth::{generate_pair, SceneSpec};
use sceneflow::{Point, PointCloud, RigidTransform};

fn clustered_points(seed: u64, n: usize) -> Vec<Point> {
    let mut r = rng(seed);
    let centers = random_points(&mut r, 5, 0.0, 10.0);
    (0..n)
        .map(|i| {
            let c = centers[i % centers.len()];
            c + Point::new(
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            )
        })
        .collect()
}

#[test]
fn knn_and_ball_match_brute_force() {
    for seed in 0..10 {
        let points = clustered_points(seed, 200);
        for cell in [0.3, 1.0] {
            let grid = VoxelGrid::build(&points, cell).unwrap();
            for i in 0..points.len() {
                assert_eq!(grid.knn(i, 8).unwrap(), brute_knn(&points, i, 8));
                assert_eq!(
                    grid.ball_query(i, 0.7).unwrap(),
                    brute_ball(&points, i, 0.7)
                );
            }
        }
    }
}

#[test]
fn knn_on_integer_lattice_breaks_ties_by_index() {
    let points: Vec<Point> = (0..4)
        .flat_map(|x| (0..4).map(move |y| Point::new(x as f64, y as f64, 0.0)))
        .collect();
    let grid = VoxelGrid::build(&points, 1.0).unwrap();
    for i in 0..points.len() {
        assert_eq!(grid.knn(i, 5).unwrap(), brute_knn(&points, i, 5));
        assert_eq!(
            grid.ball_query(i, 1.0).unwrap(),
            brute_ball(&points, i, 1.0)
        );
    }
}

fn partition(labels: &[i32]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let max = labels.iter().copied().max().unwrap_or(0).max(0) as usize;
    let mut clusters = vec![Vec::new(); max + 1];
    let mut noise = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l < 0 {
            noise.push(i);
        } else {
            clusters[l as usize].push(i);
        }
    }
    let mut clusters: Vec<Vec<usize>> = clusters.into_iter().filter(|c| !c.is_empty()).collect();
    clusters.sort();
    (clusters, noise)
}

#[test]
fn dbscan_matches_brute_force() {
    for seed in 0..10 {
        let points = clustered_points(seed, 200);
        for (eps, min_pts) in [(0.5, 4), (0.8, 10), (1.5, 3)] {
            let (mut expected, noise) = brute_dbscan_partition(&points, eps, min_pts);
            expected.sort();
            assert_eq!(
                partition(&dbscan(&points, eps, min_pts)),
                (expected, noise),
                "seed {seed}, eps {eps}"
            );
        }
    }
}

#[test]
fn dbscan_two_blobs() {
    let mut r = rng(4);
    let mut points = random_points(&mut r, 20, 0.0, 0.5);
    points.extend(random_points(&mut r, 20, 10.0, 10.5));
    let labels = dbscan(&points, 0.8, 10);
    let (clusters, noise) = partition(&labels);
    assert_eq!(clusters.len(), 2);
    assert!(noise.is_empty());
}

#[test]
fn dbscan_ignores_point_order_up_to_relabeling() {
    let points = clustered_points(7, 200);
    let mut r = rng(8);
    let mut order: Vec<usize> = (0..points.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let shuffled: Vec<Point> = order.iter().map(|&i| points[i]).collect();
    // core points and their clusters are order independent; compare on cores
    let a = dbscan(&points, 0.8, 10);
    let b = dbscan(&shuffled, 0.8, 10);
    let grid = VoxelGrid::build(&points, 0.8).unwrap();
    let core: Vec<usize> = (0..points.len())
        .filter(|&i| grid.ball_query(i, 0.8).unwrap().len() + 1 >= 10)
        .collect();
    for &i in &core {
        for &j in &core {
            let pi = order.iter().position(|&k| k == i).unwrap();
            let pj = order.iter().position(|&k| k == j).unwrap();
            assert_eq!(a[i] == a[j], b[pi] == b[pj]);
        }
    }
}

#[test]
fn rand_index_matches_brute_force() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let gt: Vec<u32> = (0..200).map(|_| r.random_range(0..4)).collect();
        let pred: Vec<u32> = gt
            .iter()
            .map(|&g| {
                if r.random_bool(0.8) {
                    g
                } else {
                    r.random_range(0..5)
                }
            })
            .collect();
        assert_eq!(rand_index(&pred, &gt), brute_rand_index(&pred, &gt));
    }
}

#[test]
fn rand_index_sampling_agrees_on_large_inputs() {
    let mut r = rng(11);
    let gt: Vec<u32> = (0..2000).map(|_| r.random_range(0..6)).collect();
    let pred: Vec<u32> = gt
        .iter()
        .map(|&g| {
            if r.random_bool(0.7) {
                g
            } else {
                r.random_range(0..6)
            }
        })
        .collect();
    let exact = rand_index(&pred, &gt);
    assert!((exact - rand_index_sampled(&pred, &gt, 200_000, 3)).abs() < 0.01);
}

fn random_rotation(r: &mut rand_chacha::ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    let axis = Vector3::new(
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
        r.random_range(-1.0..1.0),
    );
    let angle = r.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner()
}

#[test]
fn kabsch_recovers_random_transforms() {
    let mut r = rng(21);
    for _ in 0..100 {
        let src = random_points(&mut r, 100, -5.0, 5.0);
        let truth = RigidTransform::new(
            random_rotation(&mut r),
            random_points(&mut r, 1, -3.0, 3.0)[0],
        );
        let dst: Vec<Point> = src.iter().map(|p| truth.apply(p)).collect();
        let fit = kabsch_align(&src, &dst, None).unwrap();
        assert!(!fit.degenerate);
        assert!((fit.transform.rotation - truth.rotation).norm() < 1e-9);
        assert!((fit.transform.translation - truth.translation).norm() < 1e-9);
    }
}

#[test]
fn kabsch_beats_perturbed_transforms() {
    let mut r = rng(22);
    let src = random_points(&mut r, 30, -2.0, 2.0);
    let dst: Vec<Point> = src
        .iter()
        .map(|p| p + Point::new(0.5, -0.2, 0.1) + random_points(&mut r, 1, -0.1, 0.1)[0])
        .collect();
    let cost = |t: &RigidTransform| -> f64 {
        src.iter()
            .zip(&dst)
            .map(|(s, d)| (t.apply(s) - d).norm_squared())
            .sum()
    };
    let best = cost(&kabsch_align(&src, &dst, None).unwrap().transform);
    for _ in 0..200 {
        let other = RigidTransform::new(
            random_rotation(&mut r),
            random_points(&mut r, 1, -1.0, 1.0)[0],
        );
        assert!(best <= cost(&other));
    }
}

#[test]
fn icp_recovers_small_motions_on_random_clouds() {
    let cfg = IcpConfig::default();
    let mut r = rng(5);
    let points = random_points(&mut r, 500, -10.0, 10.0);
    let src = PointCloud::new(points.clone(), 0).unwrap();
    let same = icp_ego_motion(&src, &src, &cfg).unwrap();
    assert_eq!(same.iterations, 1);
    assert!((same.transform.rotation - nalgebra::Matrix3::identity()).norm() < 1e-9);

    let yaw = 5f64.to_radians();
    let truth = RigidTransform::from_yaw(yaw, Point::zeros());
    let dst = PointCloud::new(points.iter().map(|p| truth.apply(p)).collect(), 1).unwrap();
    let fit = icp_ego_motion(&src, &dst, &cfg).unwrap().transform;
    assert!((fit.angle() - yaw).abs() < 1e-4);

    let dense: Vec<Point> = (0..20)
        .flat_map(|i| {
            (0..20).map(move |j| {
                Point::new(i as f64 * 0.5, j as f64 * 0.5, ((i * j) % 7) as f64 * 0.3)
            })
        })
        .collect();
    let shifted: Vec<Point> = dense
        .iter()
        .map(|p| p + Point::new(0.1, 0.0, 0.0))
        .collect();
    let fit = icp_ego_motion(
        &PointCloud::new(dense, 0).unwrap(),
        &PointCloud::new(shifted, 1).unwrap(),
        &cfg,
    )
    .unwrap()
    .transform;
    assert!((fit.translation - Point::new(0.1, 0.0, 0.0)).norm() < 1e-6);
}

#[test]
fn icp_ignores_point_order() {
    let cfg = IcpConfig::default();
    let mut r = rng(6);
    let points = random_points(&mut r, 300, -8.0, 8.0);
    let truth = RigidTransform::from_yaw(0.03, Point::new(0.2, -0.1, 0.0));
    let moved: Vec<Point> = points.iter().map(|p| truth.apply(p)).collect();
    let reversed: Vec<Point> = moved.iter().rev().copied().collect();
    let a = icp_ego_motion(
        &PointCloud::new(points.clone(), 0).unwrap(),
        &PointCloud::new(moved, 1).unwrap(),
        &cfg,
    )
    .unwrap();
    let b = icp_ego_motion(
        &PointCloud::new(points, 0).unwrap(),
        &PointCloud::new(reversed, 1).unwrap(),
        &cfg,
    )
    .unwrap();
    assert!((a.transform.rotation - b.transform.rotation).norm() < 1e-9);
    assert!((a.transform.translation - b.transform.translation).norm() < 1e-9);
}

#[test]
fn hand_encoded_fixture_decodes() {
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/three_labeled.sfpc"
    );
    let cloud = read_frame(path).unwrap();
    assert_eq!(cloud.len(), 3);
    assert_eq!(cloud.gt_labels(), Some(&[0, 1, 1][..]));
    assert!(cloud.gt_flow().is_none());
    assert_eq!(cloud.points()[1], Point::new(1.0, 2.0, 3.0));
    assert_eq!(cloud.points()[2], Point::new(-1.5, 0.25, 4.0));
}

#[test]
fn generated_movers_are_rigid() {
    for seed in 0..5 {
        let s = generate_pair(&SceneSpec {
            seed,
            ..SceneSpec::default()
        });
        let src = s.pair.source.points();
        let dst = s.pair.target.points();
        for m in &s.movers {
            let a: Vec<Point> = m.indices.iter().map(|&i| src[i]).collect();
            let b: Vec<Point> = m.indices.iter().map(|&i| dst[i]).collect();
            let expected = SceneSpec::default().ego_motion.compose(&m.motion);
            let fit = kabsch_align(&a, &b, None).unwrap().transform;
            assert!((fit.rotation - expected.rotation).norm() < 1e-9);
            assert!((fit.translation - expected.translation).norm() < 1e-9);
        }
    }
}

#[test]
fn detector_finds_movers_on_default_scenes() {
    let cfg = CoarseConfig::default();
    for seed in 0..10 {
        let s = generate_pair(&SceneSpec {
            seed,
            ..SceneSpec::default()
        });
        let hint = icp_ego_motion(&s.pair.source, &s.pair.target, &IcpConfig::default())
            .unwrap()
            .transform;
        let pair = s.pair.clone().with_hint(hint);
        let mask = raycast_dynamic_mask(&pair, cfg.occupancy_cell, cfg.ratio_threshold).unwrap();
        let labels = s.pair.source.gt_labels().unwrap();
        let (mut mover_hits, mut movers, mut bg_hits, mut bg) = (0, 0, 0, 0);
        for (flag, &l) in mask.flags.iter().zip(labels) {
            if l > 0 {
                movers += 1;
                mover_hits += *flag as usize;
            } else {
                bg += 1;
                bg_hits += *flag as usize;
            }
        }
        assert!(
            mover_hits as f64 >= 0.9 * movers as f64,
            "seed {seed}: {mover_hits}/{movers}"
        );
        assert!(
            bg_hits as f64 <= 0.05 * bg as f64,
            "seed {seed}: {bg_hits}/{bg}"
        );
    }
}
