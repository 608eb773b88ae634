//! Invariants checked over generated inputs.

mod common;

use common::*;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use sceneflow::coarse::{dbscan, temporal_refine, ClusterSet, FrameClusters};
use sceneflow::losses::{chamfer_loss, rigid_loss_labeled};
use sceneflow::metrics::{epe_accumulate, rand_index, seg_metrics};
use sceneflow::network::forward;
use sceneflow::rigid::kabsch_align;
use sceneflow::scene::{decode_frame, encode_frame};
use sceneflow::spatial::VoxelGrid;
use sceneflow::{Point, PointCloud, RigidTransform};

fn point() -> impl Strategy<Value = Point> {
    (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Point::new(x, y, z))
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(point(), min..max)
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64, point()).prop_map(|(a, b, c, t)| {
        RigidTransform::new(Rotation3::from_euler_angles(a, b, c).into_inner(), t)
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn network_is_permutation_equivariant((points, order) in cloud(2, 24).prop_flat_map(|p| { let n = p.len(); (Just(p), permutation(n)) }), seed in 0u64..100) {
        let (params, _, _) = small_network(seed, 2);
        let shuffled: Vec<Point> = order.iter().map(|&i| points[i]).collect();
        let run = |pts: &[Point]| {
            let grid = VoxelGrid::build(pts, params.config.voxel_size).unwrap();
            let (flow, logits, _) = forward(&params, &PointCloud::new(pts.to_vec(), 0).unwrap(), &grid).unwrap();
            (flow.to_array(), logits.logits)
        };
        let (f0, l0) = run(&points);
        let (f1, l1) = run(&shuffled);
        for (new, &old) in order.iter().enumerate() {
            for c in 0..3 {
                prop_assert!((f1[[new, c]] - f0[[old, c]]).abs() < 1e-9);
            }
            for c in 0..l0.ncols() {
                prop_assert!((l1[[new, c]] - l0[[old, c]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn segmentation_metrics_ignore_label_names(gt in prop::collection::vec(0u32..4, 1..80), noise in prop::collection::vec(0u32..5, 80), perm in permutation(5)) {
        let pred: Vec<u32> = gt.iter().zip(&noise).map(|(&g, &n)| if n < 3 { g } else { n }).collect();
        // rename predicted instance ids while keeping background at zero
        let renamed: Vec<u32> = pred.iter().map(|&l| if l == 0 { 0 } else { 1 + perm.iter().position(|&k| k == l as usize).unwrap() as u32 }).collect();
        prop_assert_eq!(rand_index(&pred, &gt), rand_index(&renamed, &gt));
        let a = seg_metrics(&pred, &gt).unwrap();
        let b = seg_metrics(&renamed, &gt).unwrap();
        prop_assert!((a.ri - b.ri).abs() < 1e-12);
        prop_assert!((a.recall - b.recall).abs() < 1e-12);
        prop_assert!((a.precision - b.precision).abs() < 1e-12);
    }

    #[test]
    fn chamfer_scales_quadratically(a in cloud(1, 30), b in cloud(1, 30)) {
        let (base, _) = chamfer_loss(&a, &b).unwrap();
        let double = |v: &[Point]| v.iter().map(|p| p * 2.0).collect::<Vec<_>>();
        let (scaled, _) = chamfer_loss(&double(&a), &double(&b)).unwrap();
        prop_assert!((scaled - 4.0 * base).abs() <= 1e-9 * (1.0 + base));
    }

    #[test]
    fn rigid_loss_is_zero_for_rigid_segments(points in cloud(6, 40), motions in prop::collection::vec(transform(), 3), labels in prop::collection::vec(0u32..3, 40)) {
        let labels = &labels[..points.len()];
        let flow: Vec<Point> = points.iter().zip(labels).map(|(p, &l)| motions[l as usize].apply(p) - p).collect();
        let (loss, _) = rigid_loss_labeled(&points, labels, 3, &flow).unwrap();
        prop_assert!(loss < 1e-9);
    }

    #[test]
    fn rigid_loss_ignores_a_global_motion(points in cloud(6, 40), flow in cloud(40, 41), labels in prop::collection::vec(0u32..3, 40), g in transform()) {
        let n = points.len();
        let labels = &labels[..n];
        let flow = &flow[..n];
        let (before, _) = rigid_loss_labeled(&points, labels, 3, flow).unwrap();
        let moved: Vec<Point> = points.iter().map(|p| g.apply(p)).collect();
        let moved_flow: Vec<Point> = points.iter().zip(flow).map(|(p, f)| g.apply(&(p + f)) - g.apply(p)).collect();
        let (after, _) = rigid_loss_labeled(&moved, labels, 3, &moved_flow).unwrap();
        prop_assert!((before - after).abs() <= 1e-7 * (1.0 + before));
    }

    #[test]
    fn kabsch_is_optimal(src in cloud(4, 30), noise in cloud(30, 31), other in transform()) {
        let dst: Vec<Point> = src.iter().zip(&noise).map(|(p, n)| p + Vector3::new(1.0, 0.5, -0.3) + n * 0.05).collect();
        let cost = |t: &RigidTransform| -> f64 { src.iter().zip(&dst).map(|(s, d)| (t.apply(s) - d).norm_squared()).sum() };
        let fit = kabsch_align(&src, &dst, None).unwrap().transform;
        prop_assert!(fit.orthonormality_error() < 1e-9);
        prop_assert!((fit.rotation.determinant() - 1.0).abs() < 1e-9);
        prop_assert!(cost(&fit) <= cost(&other) + 1e-9);
    }

    #[test]
    fn dbscan_is_deterministic_on_cores((points, order) in cloud(5, 60).prop_flat_map(|p| { let n = p.len(); (Just(p), permutation(n)) })) {
        let (eps, min_pts) = (1.5, 3);
        let shuffled: Vec<Point> = order.iter().map(|&i| points[i]).collect();
        let a = dbscan(&points, eps, min_pts);
        let b = dbscan(&shuffled, eps, min_pts);
        prop_assert_eq!(a.iter().filter(|&&l| l < 0).count(), b.iter().filter(|&&l| l < 0).count());
        let grid = VoxelGrid::build(&points, eps).unwrap();
        let core: Vec<usize> = (0..points.len()).filter(|&i| grid.ball_query(i, eps).unwrap().len() + 1 >= min_pts).collect();
        let pos: Vec<usize> = (0..points.len()).map(|i| order.iter().position(|&k| k == i).unwrap()).collect();
        for &i in &core {
            for &j in &core {
                prop_assert_eq!(a[i] == a[j], b[pos[i]] == b[pos[j]]);
            }
        }
    }

    #[test]
    fn temporal_refinement_only_removes(curr in cloud(5, 50), prev in cloud(5, 50), radius in 0.1..3.0f64) {
        let cluster = |pts: &[Point]| {
            let labels = dbscan(pts, 2.0, 2);
            ClusterSet { assignments: labels.iter().map(|&l| if l < 0 { -1 } else { l + 1 }).collect(), eps: 2.0, min_pts: 2 }
        };
        let c = cluster(&curr);
        let p = cluster(&prev);
        let refined = temporal_refine(Some(FrameClusters { points: &prev, clusters: &p }), FrameClusters { points: &curr, clusters: &c }, None, radius);
        let before = c.clustered_indices();
        for i in refined.clustered_indices() {
            prop_assert!(before.contains(&i));
        }
        for id in 1..=refined.num_clusters() as i32 {
            prop_assert!(refined.members(id).len() >= 2);
        }
    }

    #[test]
    fn epe_is_translation_equivariant(gt in cloud(1, 40), pred in cloud(40, 41), labels in prop::collection::vec(0u32..3, 40), shift in point()) {
        let n = gt.len();
        let pred = &pred[..n];
        let labels = &labels[..n];
        let shifted = |v: &[Point]| v.iter().map(|p| p + shift).collect::<Vec<_>>();
        let a = epe_accumulate(pred, &gt, labels).unwrap().report();
        let b = epe_accumulate(&shifted(pred), &shifted(&gt), labels).unwrap().report();
        prop_assert!((a.three_way - b.three_way).abs() < 1e-9);
        prop_assert!((a.bs - b.bs).abs() < 1e-9);
    }

    #[test]
    fn sfpc_round_trip_is_exact_after_f32_rounding(points in cloud(1, 40), flow in cloud(40, 41), labels in prop::collection::vec(0u32..9, 40)) {
        let n = points.len();
        let round = |v: &[Point]| v.iter().map(|p| p.map(|c| c as f32 as f64)).collect::<Vec<_>>();
        let cloud = PointCloud::new(points.clone(), 3)
            .and_then(|c| c.with_labels(labels[..n].to_vec()))
            .and_then(|c| c.with_flow(flow[..n].to_vec()))
            .unwrap();
        let back = decode_frame(&encode_frame(&cloud), 3).unwrap();
        prop_assert_eq!(back.points(), &round(&points)[..]);
        prop_assert_eq!(back.gt_flow().unwrap(), &round(&flow[..n])[..]);
        prop_assert_eq!(back.gt_labels().unwrap(), &labels[..n]);
    }
}
