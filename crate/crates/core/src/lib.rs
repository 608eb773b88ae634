//! Self-supervised joint scene flow and instance segmentation on LiDAR point clouds.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coarse;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod rigid;
pub mod scene;
pub mod spatial;
pub mod synth;
pub mod trainer;

pub use scene::{FlowField, FlowKind, FramePair, MaskLogits, Point, PointCloud, RigidTransform};
