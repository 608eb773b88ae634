//! Point encoder, voxel/point GRU refinement, feature fusion and the flow and
//! mask heads, with a hand-written backward pass.
//!
//! All weights are stored `(out, in)` and applied to row-major batches, so a
//! layer is `Y = X Wᵀ + b`.

mod checkpoint;
mod gru;

use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
};
pub(crate) use gru::sigmoid;
pub use gru::{gru_backward, gru_forward, GruCache, GruWeights};

use crate::scene::{FlowField, FlowKind, MaskLogits, PointCloud};
use crate::spatial::VoxelGrid;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("trace does not match the parameters or upstream gradients: {0}")]
    TraceMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature width `d`.
    pub hidden: usize,
    /// GRU refinement iterations `K`.
    pub iterations: usize,
    /// Mask channels `C`; channel 0 is background.
    pub channels: usize,
    /// Voxel size in meters.
    pub voxel_size: f64,
    /// Positions are multiplied by this before the encoder.
    pub input_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            iterations: 4,
            channels: 32,
            voxel_size: 0.3,
            input_scale: 0.1,
        }
    }
}

/// Every learnable tensor. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub enc_w1: Array2<f64>,
    pub enc_b1: Array2<f64>,
    pub enc_w2: Array2<f64>,
    pub enc_b2: Array2<f64>,
    pub gru_v: GruWeights,
    pub gru_p: GruWeights,
    pub fuse_w: Array2<f64>,
    pub fuse_b: Array2<f64>,
    pub flow_w: Array2<f64>,
    pub flow_b: Array2<f64>,
    pub seg_w: Array2<f64>,
    pub seg_b: Array2<f64>,
}

pub type ParamGradients = ModelParams;

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.hidden;
        let c = config.channels;
        Self {
            config,
            enc_w1: Array2::zeros((d, 3)),
            enc_b1: Array2::zeros((1, d)),
            enc_w2: Array2::zeros((d, d)),
            enc_b2: Array2::zeros((1, d)),
            gru_v: GruWeights::zeros(d),
            gru_p: GruWeights::zeros(d),
            fuse_w: Array2::zeros((d, 2 * d)),
            fuse_b: Array2::zeros((1, d)),
            flow_w: Array2::zeros((3, d)),
            flow_b: Array2::zeros((1, 3)),
            seg_w: Array2::zeros((c, d)),
            seg_b: Array2::zeros((1, c)),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` per tensor, drawn in `tensors()` order,
    /// except the flow head, which starts at zero so the initial residual is zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, NetworkError> {
        if config.hidden == 0 || config.channels < 2 {
            return Err(NetworkError::ShapeMismatch(
                "need hidden >= 1 and channels >= 2".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let d = config.hidden;
        for (name, t) in p.tensors_mut() {
            let fan_in = match name.as_str() {
                "enc_w1" | "enc_b1" => 3,
                "fuse_w" | "fuse_b" => 2 * d,
                _ => d,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            t.mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
        p.flow_w.fill(0.0);
        p.flow_b.fill(0.0);
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("enc_w1".into(), &self.enc_w1),
            ("enc_b1".into(), &self.enc_b1),
            ("enc_w2".into(), &self.enc_w2),
            ("enc_b2".into(), &self.enc_b2),
        ];
        for (prefix, g) in [("gru_v", &self.gru_v), ("gru_p", &self.gru_p)] {
            for (field, t) in gru::GRU_FIELDS.iter().zip(g.fields()) {
                out.push((format!("{prefix}.{field}"), t));
            }
        }
        out.extend([
            ("fuse_w".into(), &self.fuse_w),
            ("fuse_b".into(), &self.fuse_b),
            ("flow_w".into(), &self.flow_w),
            ("flow_b".into(), &self.flow_b),
            ("seg_w".into(), &self.seg_w),
            ("seg_b".into(), &self.seg_b),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("enc_w1".into(), &mut self.enc_w1),
            ("enc_b1".into(), &mut self.enc_b1),
            ("enc_w2".into(), &mut self.enc_w2),
            ("enc_b2".into(), &mut self.enc_b2),
        ];
        for (prefix, g) in [("gru_v", &mut self.gru_v), ("gru_p", &mut self.gru_p)] {
            for (field, t) in gru::GRU_FIELDS.iter().zip(g.fields_mut()) {
                out.push((format!("{prefix}.{field}"), t));
            }
        }
        out.extend([
            ("fuse_w".into(), &mut self.fuse_w),
            ("fuse_b".into(), &mut self.fuse_b),
            ("flow_w".into(), &mut self.flow_w),
            ("flow_b".into(), &mut self.flow_b),
            ("seg_w".into(), &mut self.seg_w),
            ("seg_b".into(), &mut self.seg_b),
        ]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        let src = other.tensors();
        for ((_, dst), (_, g)) in self.tensors_mut().into_iter().zip(src) {
            dst.scaled_add(alpha, g);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub inputs: Array2<f64>,
    pub enc_h1: Array2<f64>,
    /// `f^0 .. f^K`, each `N x d`.
    pub features: Vec<Array2<f64>>,
    pub voxel_of: Vec<usize>,
    pub voxel_counts: Vec<usize>,
    pub gru_v: Vec<GruCache>,
    pub gru_p: Vec<GruCache>,
    pub shared: Array2<f64>,
}

impl ForwardTrace {
    pub fn num_points(&self) -> usize {
        self.inputs.nrows()
    }

    /// Re-applies the heads to the recorded shared features.
    pub fn replay_heads(&self, params: &ModelParams) -> (Array2<f64>, Array2<f64>) {
        heads(params, &self.shared)
    }
}

fn heads(params: &ModelParams, shared: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let flow = shared.dot(&params.flow_w.t()) + &params.flow_b;
    let logits = shared.dot(&params.seg_w.t()) + &params.seg_b;
    (flow, logits)
}

fn mean_pool(f: &Array2<f64>, voxel_of: &[usize], counts: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((counts.len(), f.ncols()));
    for (i, &v) in voxel_of.iter().enumerate() {
        let mut row = out.row_mut(v);
        row += &f.row(i);
    }
    for (v, &c) in counts.iter().enumerate() {
        out.row_mut(v).mapv_inplace(|x| x / c as f64);
    }
    out
}

fn gather(h: &Array2<f64>, voxel_of: &[usize]) -> Array2<f64> {
    h.select(Axis(0), voxel_of)
}

/// Voxel id per point (voxels numbered in ascending cell-key order) and sizes.
pub fn voxel_assignment(grid: &VoxelGrid) -> (Vec<usize>, Vec<usize>) {
    let mut voxel_of = vec![0; grid.len()];
    let mut counts = Vec::with_capacity(grid.num_cells());
    for (v, (_, ids)) in grid.sorted_cells().into_iter().enumerate() {
        for &i in ids {
            voxel_of[i] = v;
        }
        counts.push(ids.len());
    }
    (voxel_of, counts)
}

/// Runs the network on `cloud`, whose voxelization at the model's voxel size is `grid`.
pub fn forward(
    params: &ModelParams,
    cloud: &PointCloud,
    grid: &VoxelGrid,
) -> Result<(FlowField, MaskLogits, ForwardTrace), NetworkError> {
    let cfg = params.config;
    if grid.len() != cloud.len() {
        return Err(NetworkError::ShapeMismatch(format!(
            "grid has {} points, cloud has {}",
            grid.len(),
            cloud.len()
        )));
    }
    if grid.cell_size() != cfg.voxel_size {
        return Err(NetworkError::ShapeMismatch(format!(
            "grid cell {} differs from model voxel size {}",
            grid.cell_size(),
            cfg.voxel_size
        )));
    }
    let n = cloud.len();
    let d = cfg.hidden;
    let mut inputs = Array2::zeros((n, 3));
    for (i, p) in cloud.points().iter().enumerate() {
        for a in 0..3 {
            inputs[(i, a)] = p[a] * cfg.input_scale;
        }
    }
    let enc_h1 = (inputs.dot(&params.enc_w1.t()) + &params.enc_b1).mapv(f64::tanh);
    let f0 = (enc_h1.dot(&params.enc_w2.t()) + &params.enc_b2).mapv(f64::tanh);

    let (voxel_of, voxel_counts) = voxel_assignment(grid);
    let mut hv = Array2::zeros((voxel_counts.len(), d));
    let mut features = vec![f0];
    let mut gru_v = Vec::with_capacity(cfg.iterations);
    let mut gru_p = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let f = features.last().expect("f0 present");
        let pooled = mean_pool(f, &voxel_of, &voxel_counts);
        let (hv_next, cv) = gru_forward(&params.gru_v, &hv, &pooled);
        let (f_next, cp) = gru_forward(&params.gru_p, f, &gather(&hv_next, &voxel_of));
        hv = hv_next;
        features.push(f_next);
        gru_v.push(cv);
        gru_p.push(cp);
    }
    let cat = concatenate![Axis(1), features[0], features[cfg.iterations]];
    let shared = (cat.dot(&params.fuse_w.t()) + &params.fuse_b).mapv(f64::tanh);
    let (flow, logits) = heads(params, &shared);
    let trace = ForwardTrace {
        inputs,
        enc_h1,
        features,
        voxel_of,
        voxel_counts,
        gru_v,
        gru_p,
        shared,
    };
    let logits = MaskLogits::new(logits).map_err(|e| NetworkError::ShapeMismatch(e.to_string()))?;
    Ok((
        FlowField::from_array(&flow, FlowKind::Residual),
        logits,
        trace,
    ))
}

fn tanh_back(dy: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    dy * &y.mapv(|v| 1.0 - v * v)
}

fn bias_grad(da: &Array2<f64>) -> Array2<f64> {
    da.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Exact parameter gradients given upstream gradients on the residual flow and logits.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    grad_flow: &Array2<f64>,
    grad_logits: &Array2<f64>,
) -> Result<ParamGradients, NetworkError> {
    let cfg = params.config;
    let n = trace.num_points();
    let d = cfg.hidden;
    if grad_flow.dim() != (n, 3) || grad_logits.dim() != (n, cfg.channels) {
        return Err(NetworkError::TraceMismatch(format!(
            "upstream gradients {:?} and {:?} for {} points",
            grad_flow.dim(),
            grad_logits.dim(),
            n
        )));
    }
    if trace.features.len() != cfg.iterations + 1 || trace.shared.ncols() != d {
        return Err(NetworkError::TraceMismatch(
            "trace was recorded with a different model".into(),
        ));
    }
    let mut g = ModelParams::zeros(cfg);

    g.flow_w = grad_flow.t().dot(&trace.shared);
    g.flow_b = bias_grad(grad_flow);
    g.seg_w = grad_logits.t().dot(&trace.shared);
    g.seg_b = bias_grad(grad_logits);
    let ds = grad_flow.dot(&params.flow_w) + grad_logits.dot(&params.seg_w);

    let da_fuse = tanh_back(&ds, &trace.shared);
    let f0 = &trace.features[0];
    let fk = &trace.features[cfg.iterations];
    let cat = concatenate![Axis(1), *f0, *fk];
    g.fuse_w = da_fuse.t().dot(&cat);
    g.fuse_b = bias_grad(&da_fuse);
    let dcat = da_fuse.dot(&params.fuse_w);
    let df0_direct = dcat.slice(s![.., ..d]).to_owned();
    let mut df = dcat.slice(s![.., d..]).to_owned();

    let nv = trace.voxel_counts.len();
    let mut dhv: Array2<f64> = Array2::zeros((nv, d));
    for k in (0..cfg.iterations).rev() {
        let (df_prev, dg) = gru_backward(&params.gru_p, &trace.gru_p[k], &df, &mut g.gru_p);
        for (i, &v) in trace.voxel_of.iter().enumerate() {
            let mut row = dhv.row_mut(v);
            row += &dg.row(i);
        }
        let (dhv_prev, dpooled) = gru_backward(&params.gru_v, &trace.gru_v[k], &dhv, &mut g.gru_v);
        df = df_prev;
        for (i, &v) in trace.voxel_of.iter().enumerate() {
            let c = trace.voxel_counts[v] as f64;
            let mut row = df.row_mut(i);
            row.scaled_add(1.0 / c, &dpooled.row(v));
        }
        dhv = dhv_prev;
    }
    df += &df0_direct;

    let da2 = tanh_back(&df, f0);
    g.enc_w2 = da2.t().dot(&trace.enc_h1);
    g.enc_b2 = bias_grad(&da2);
    let da1 = tanh_back(&da2.dot(&params.enc_w2), &trace.enc_h1);
    g.enc_w1 = da1.t().dot(&trace.inputs);
    g.enc_b1 = bias_grad(&da1);
    Ok(g)
}

/// Per-point argmax labels; ties go to the lower channel.
pub fn predict_labels(logits: &MaskLogits) -> Vec<u32> {
    logits.argmax_labels()
}
