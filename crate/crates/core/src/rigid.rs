//! Closed-form weighted rigid alignment and point-to-point ICP.

use nalgebra::{Matrix3, Rotation3, Vector3};
use thiserror::Error;

use crate::scene::{FlowField, FlowKind, Point, PointCloud};
use crate::spatial::VoxelGrid;

#[derive(Debug, Error, PartialEq)]
pub enum RigidError {
    #[error("alignment needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("point lists differ in length: {src} vs {dst}")]
    LengthMismatch { src: usize, dst: usize },
    #[error("weights must be finite, nonnegative and not all zero")]
    BadWeights,
}

/// `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, t: Vector3<f64>) -> Self {
        Self::new(
            *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            t,
        )
    }

    pub fn apply(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    /// `self` after `other`: x -> self(other(x)).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    /// Max deviation of RᵀR from I and of det R from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.amax().max((self.rotation.determinant() - 1.0).abs())
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0)
            .clamp(-1.0, 1.0)
            .acos()
    }
}

/// Result of a closed-form alignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub transform: RigidTransform,
    /// Cross-covariance rank below 2: the rotation is not fully determined and
    /// the undetermined part was left at identity.
    pub degenerate: bool,
}

const RANK_TOL: f64 = 1e-12;

/// Weighted least-squares rigid fit minimizing `sum w_i |R src_i + t - dst_i|^2`.
pub fn kabsch_align(
    src: &[Point],
    dst: &[Point],
    weights: Option<&[f64]>,
) -> Result<Alignment, RigidError> {
    if src.len() != dst.len() {
        return Err(RigidError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(RigidError::TooFewPoints {
            needed: 3,
            got: src.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != src.len() {
            return Err(RigidError::LengthMismatch {
                src: src.len(),
                dst: w.len(),
            });
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(RigidError::BadWeights);
        }
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..src.len()).map(weight).sum();
    if !(total > 0.0) {
        return Err(RigidError::BadWeights);
    }

    let mut src_c = Vector3::zeros();
    let mut dst_c = Vector3::zeros();
    for i in 0..src.len() {
        src_c += weight(i) * src[i];
        dst_c += weight(i) * dst[i];
    }
    src_c /= total;
    dst_c /= total;

    let mut h = Matrix3::zeros();
    for i in 0..src.len() {
        h += weight(i) * (src[i] - src_c) * (dst[i] - dst_c).transpose();
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let sv = svd.singular_values;
    let smax = sv.max();
    let rank = sv
        .iter()
        .filter(|s| **s > RANK_TOL * smax.max(1e-300))
        .count();

    let rotation = if rank >= 2 {
        // flip the axis of the smallest singular value if the fit would reflect
        let d = (v_t.transpose() * u.transpose()).determinant().signum();
        let mut diag = Vector3::new(1.0, 1.0, 1.0);
        diag[sv.imin()] = d;
        v_t.transpose() * Matrix3::from_diagonal(&diag) * u.transpose()
    } else if rank == 1 {
        // only the dominant direction is constrained: take the minimal rotation
        // sending it onto its image
        let (imax, _) = sv.argmax();
        let a = u.column(imax).into_owned();
        let b = v_t.row(imax).transpose().into_owned();
        Rotation3::rotation_between(&a, &b)
            .map(|r| *r.matrix())
            .unwrap_or_else(|| {
                *Rotation3::from_axis_angle(&orthogonal_axis(&a), std::f64::consts::PI).matrix()
            })
    } else {
        Matrix3::identity()
    };
    let translation = dst_c - rotation * src_c;
    Ok(Alignment {
        transform: RigidTransform::new(rotation, translation),
        degenerate: rank < 2,
    })
}

fn orthogonal_axis(a: &Vector3<f64>) -> nalgebra::Unit<Vector3<f64>> {
    let probe = if a.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    nalgebra::Unit::new_normalize(a.cross(&probe))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop when the mean correspondence distance changes by less than this (meters).
    pub tol: f64,
    /// Correspondences farther than this multiple of the median are rejected.
    pub reject_factor: f64,
    /// Voxel size of the nearest-neighbor grid over the destination cloud.
    pub grid_cell: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-6,
            reject_factor: 3.0,
            grid_cell: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub iterations: usize,
    pub converged: bool,
    /// Mean distance of the retained correspondences under the final transform.
    pub mean_residual: f64,
}

pub const ICP_MIN_POINTS: usize = 10;

/// Point-to-point ICP from the identity.
pub fn icp_ego_motion(
    src: &PointCloud,
    dst: &PointCloud,
    cfg: &IcpConfig,
) -> Result<IcpResult, RigidError> {
    icp_from(src.points(), dst.points(), RigidTransform::identity(), cfg)
}

/// Point-to-point ICP with an explicit initial guess. Each iteration re-matches
/// every source point to its nearest destination point, drops matches beyond
/// `reject_factor` times the median distance and refits with [`kabsch_align`].
pub fn icp_from(
    src: &[Point],
    dst: &[Point],
    init: RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpResult, RigidError> {
    if src.len() < ICP_MIN_POINTS || dst.len() < ICP_MIN_POINTS {
        return Err(RigidError::TooFewPoints {
            needed: ICP_MIN_POINTS,
            got: src.len().min(dst.len()),
        });
    }
    let grid = VoxelGrid::build(dst, cfg.grid_cell).expect("positive grid cell");
    let mut transform = init;
    let mut prev_mean = f64::INFINITY;
    let mut mean = f64::INFINITY;
    let mut matched_src = Vec::with_capacity(src.len());
    let mut matched_dst = Vec::with_capacity(src.len());
    let mut dists = Vec::with_capacity(src.len());
    for iter in 1..=cfg.max_iters {
        let matches: Vec<(usize, f64)> = src
            .iter()
            .map(|p| {
                let (j, d2) = grid.nearest_to(&transform.apply(p)).expect("nonempty grid");
                (j, d2.sqrt())
            })
            .collect();
        dists.clear();
        dists.extend(matches.iter().map(|m| m.1));
        dists.sort_unstable_by(f64::total_cmp);
        let median = dists[dists.len() / 2];
        let cutoff = cfg.reject_factor * median;

        matched_src.clear();
        matched_dst.clear();
        let mut sum = 0.0;
        for (i, &(j, d)) in matches.iter().enumerate() {
            if d <= cutoff {
                matched_src.push(src[i]);
                matched_dst.push(dst[j]);
                sum += d;
            }
        }
        mean = sum / matched_src.len() as f64;
        if matched_src.len() < 3 {
            break;
        }
        if mean == 0.0 || (prev_mean - mean).abs() < cfg.tol {
            return Ok(IcpResult {
                transform,
                iterations: iter,
                converged: true,
                mean_residual: mean,
            });
        }
        prev_mean = mean;
        transform = kabsch_align(&matched_src, &matched_dst, None)?.transform;
    }
    Ok(IcpResult {
        transform,
        iterations: cfg.max_iters,
        converged: false,
        mean_residual: mean,
    })
}

/// Flow induced on `cloud` by `transform`: `(R p + t) - p`.
pub fn ego_flow(cloud: &PointCloud, transform: &RigidTransform) -> FlowField {
    FlowField::new(
        cloud
            .points()
            .iter()
            .map(|p| transform.apply(p) - p)
            .collect(),
        FlowKind::Ego,
    )
}
