//! Seeded synthetic frame pairs with exact ground-truth flow and instance ids.
//!
//! A scene is a ground plane, vertical wall segments away from the road and
//! box-shaped movers driving along two opposite lanes. The second frame applies
//! each mover's motion and then the ego motion to every point; Gaussian noise
//! is added to the second frame only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rigid::RigidTransform;
use crate::scene::{FramePair, Point, PointCloud};

pub const GROUND_Z: f64 = -1.7;
/// Lanes occupy `LANE_INNER <= |y| <= LANE_OUTER`; +y lane drives toward +x.
pub const LANE_INNER: f64 = 1.5;
pub const LANE_OUTER: f64 = 4.0;
/// Walls stand at `|y| >= WALL_MIN_Y`.
pub const WALL_MIN_Y: f64 = 6.0;
const WALL_FRACTION: f64 = 0.3;
const MOVER_CLEARANCE: f64 = 0.5;
const MOVER_HEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_background: usize,
    pub n_movers: usize,
    pub points_per_mover: usize,
    /// Mover displacement per frame, meters.
    pub mover_speed_range: (f64, f64),
    pub ego_motion: RigidTransform,
    pub noise_sigma: f64,
    /// Half-width of the square scene, meters.
    pub extent: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_background: 2000,
            n_movers: 4,
            points_per_mover: 64,
            mover_speed_range: (1.5, 2.5),
            ego_motion: RigidTransform::from_yaw(0.005, Point::new(0.1, 0.02, 0.0)),
            noise_sigma: 0.0,
            extent: 16.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        let (lo, hi) = self.mover_speed_range;
        if !(self.noise_sigma >= 0.0) {
            return Err("noise_sigma must be nonnegative".into());
        }
        if !(lo >= 0.0 && hi >= lo) {
            return Err("mover_speed_range must satisfy 0 <= lo <= hi".into());
        }
        if !(self.extent > WALL_MIN_Y + 1.0) {
            return Err(format!("extent must exceed {}", WALL_MIN_Y + 1.0));
        }
        Ok(())
    }
}

/// Per-mover ground truth. Movers translate along their lane.
#[derive(Debug, Clone, PartialEq)]
pub struct MoverTruth {
    pub label: u32,
    /// Motion of the mover in the first frame's coordinates, before ego motion.
    pub motion: RigidTransform,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    /// Source carries gt labels and flow; the pair has no ego hint.
    pub pair: FramePair,
    pub movers: Vec<MoverTruth>,
}

fn sample_ground(rng: &mut ChaCha8Rng, n: usize, extent: f64, out: &mut Vec<Point>) {
    for _ in 0..n {
        out.push(Point::new(
            rng.random_range(-extent..extent),
            rng.random_range(-extent..extent),
            GROUND_Z,
        ));
    }
}

fn sample_walls(rng: &mut ChaCha8Rng, n: usize, extent: f64, out: &mut Vec<Point>) {
    let n_walls = 6;
    let walls: Vec<(f64, f64, f64, f64)> = (0..n_walls)
        .map(|w| {
            let side = if w % 2 == 0 { 1.0 } else { -1.0 };
            let y = side * rng.random_range(WALL_MIN_Y..extent - 0.5);
            let len = rng.random_range(3.0..6.0);
            let x0 = rng.random_range(-extent..extent - len);
            let h = rng.random_range(2.0..4.0);
            (x0, len, y, h)
        })
        .collect();
    for k in 0..n {
        let (x0, len, y, h) = walls[k % n_walls];
        out.push(Point::new(
            x0 + rng.random_range(0.0..len),
            y,
            GROUND_Z + rng.random_range(0.0..h),
        ));
    }
}

/// Uniform samples on the five faces of an axis-aligned box other than its bottom.
fn sample_box(rng: &mut ChaCha8Rng, center: Point, size: (f64, f64, f64), n: usize) -> Vec<Point> {
    let (lx, ly, lz) = size;
    let faces = [ly * lz, ly * lz, lx * lz, lx * lz, lx * ly];
    let total: f64 = faces.iter().sum();
    let z0 = center.z - lz / 2.0;
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            while face < 4 && pick >= faces[face] {
                pick -= faces[face];
                face += 1;
            }
            let u = rng.random_range(-0.5..0.5);
            let v = rng.random_range(-0.5..0.5);
            let w = rng.random_range(0.0..1.0);
            let local = match face {
                0 => Point::new(-lx / 2.0, u * ly, w * lz),
                1 => Point::new(lx / 2.0, u * ly, w * lz),
                2 => Point::new(u * lx, -ly / 2.0, w * lz),
                3 => Point::new(u * lx, ly / 2.0, w * lz),
                _ => Point::new(u * lx, v * ly, lz),
            };
            Point::new(center.x + local.x, center.y + local.y, z0 + local.z)
        })
        .collect()
}

struct Placement {
    center: Point,
    size: (f64, f64, f64),
    motion: RigidTransform,
    lane: f64,
    reach: (f64, f64),
}

fn place_movers(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Vec<Placement> {
    let mut placed: Vec<Placement> = Vec::new();
    let x_limit = (spec.extent - WALL_MIN_Y).max(4.0);
    for k in 0..spec.n_movers {
        let lane = if k % 2 == 0 { 1.0 } else { -1.0 };
        let size = (
            rng.random_range(0.8..1.2),
            rng.random_range(0.7..1.0),
            MOVER_HEIGHT,
        );
        let (lo, hi) = spec.mover_speed_range;
        let speed = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        let half_w = size.1 / 2.0;
        let y = lane * rng.random_range(LANE_INNER + half_w..LANE_OUTER - half_w);
        let z = GROUND_Z + MOVER_CLEARANCE + size.2 / 2.0;
        // keep the swept footprints of same-lane movers apart; give up after a few tries
        let mut center = Point::new(0.0, y, z);
        let mut reach = (0.0, 0.0);
        for _ in 0..50 {
            let x = rng.random_range(-x_limit..x_limit);
            let end = x + lane * speed;
            reach = (x.min(end) - size.0, x.max(end) + size.0);
            center.x = x;
            let clear = placed
                .iter()
                .filter(|p| p.lane == lane)
                .all(|p| reach.1 < p.reach.0 || reach.0 > p.reach.1);
            if clear {
                break;
            }
        }
        let motion = RigidTransform::from_translation(Point::new(lane * speed, 0.0, 0.0));
        placed.push(Placement {
            center,
            size,
            motion,
            lane,
            reach,
        });
    }
    placed
}

/// Deterministic scene pair for `spec`.
pub fn generate_pair(spec: &SceneSpec) -> SyntheticPair {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_walls = (spec.n_background as f64 * WALL_FRACTION).round() as usize;
    let mut source = Vec::with_capacity(spec.n_background + spec.n_movers * spec.points_per_mover);
    sample_ground(
        &mut rng,
        spec.n_background - n_walls,
        spec.extent,
        &mut source,
    );
    sample_walls(&mut rng, n_walls, spec.extent, &mut source);
    let mut labels = vec![0u32; source.len()];
    let mut moved: Vec<Point> = source.clone();

    let mut movers = Vec::with_capacity(spec.n_movers);
    for (k, pl) in place_movers(&mut rng, spec).into_iter().enumerate() {
        let pts = sample_box(&mut rng, pl.center, pl.size, spec.points_per_mover);
        let start = source.len();
        for p in pts {
            moved.push(pl.motion.apply(&p));
            source.push(p);
            labels.push(k as u32 + 1);
        }
        movers.push(MoverTruth {
            label: k as u32 + 1,
            motion: pl.motion,
            indices: (start..source.len()).collect(),
        });
    }

    let clean: Vec<Point> = moved.iter().map(|p| spec.ego_motion.apply(p)).collect();
    let flow: Vec<Point> = clean.iter().zip(&source).map(|(t, s)| t - s).collect();
    let target: Vec<Point> = if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        clean
            .iter()
            .map(|p| {
                p + Point::new(
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                )
            })
            .collect()
    } else {
        clean
    };

    let src = PointCloud::new(source, 0)
        .and_then(|c| c.with_labels(labels))
        .and_then(|c| c.with_flow(flow))
        .expect("generated values are finite and consistent");
    let dst = PointCloud::new(target, 1).expect("generated values are finite");
    SyntheticPair {
        pair: FramePair::new(src, dst).expect("consecutive frames"),
        movers,
    }
}

/// `count` pairs with seeds `base.seed, base.seed + 1, ...`.
pub fn generate_dataset(base: &SceneSpec, count: usize) -> Vec<SyntheticPair> {
    (0..count)
        .map(|i| {
            generate_pair(&SceneSpec {
                seed: base.seed.wrapping_add(i as u64),
                ..*base
            })
        })
        .collect()
}
