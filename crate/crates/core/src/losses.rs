//! Training losses with analytic gradients: Chamfer alignment, balanced focal
//! background/foreground separation, rigid consistency, spatial mask
//! consistency and distant-object mask dissimilarity.

use ndarray::Array2;
use thiserror::Error;

use crate::network::predict_labels;
use crate::rigid::kabsch_align;
use crate::scene::{MaskLogits, Point};
use crate::spatial::{NeighborQueryConfig, VoxelGrid};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty cloud")]
    EmptyCloud,
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), LossError> {
    if got != expected {
        return Err(LossError::LengthMismatch {
            what,
            got,
            expected,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cd: f64,
    pub lambda_bf: f64,
    pub lambda_rigid: f64,
    pub lambda_smc: f64,
    pub lambda_dom: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub focal_beta: f64,
    pub w_knn: f64,
    pub w_ball: f64,
    /// Minimum separation (meters) of point pairs pushed apart by the DOM term.
    pub dom_delta: f64,
    pub dom_max_pairs: usize,
    /// DOM value when no qualifying pair exists.
    pub l_min: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cd: 1.0,
            lambda_bf: 1.0,
            lambda_rigid: 1.0,
            lambda_smc: 0.1,
            lambda_dom: 0.1,
            focal_alpha: 1.0,
            focal_gamma: 2.0,
            focal_beta: 0.6,
            w_knn: 0.5,
            w_ball: 0.5,
            dom_delta: 2.0,
            dom_max_pairs: 4096,
            l_min: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let lambdas = [
            self.lambda_cd,
            self.lambda_bf,
            self.lambda_rigid,
            self.lambda_smc,
            self.lambda_dom,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err("loss weights must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.focal_beta) {
            return Err("focal beta must lie in [0, 1]".into());
        }
        if !(self.focal_gamma >= 0.0) {
            return Err("focal gamma must be nonnegative".into());
        }
        if !(self.dom_delta > 0.0) {
            return Err("DOM distance must be positive".into());
        }
        Ok(())
    }

    /// Only the Chamfer term enabled.
    pub fn chamfer_only() -> Self {
        Self {
            lambda_bf: 0.0,
            lambda_rigid: 0.0,
            lambda_smc: 0.0,
            lambda_dom: 0.0,
            ..Self::default()
        }
    }
}

/// Symmetric Chamfer distance, the average of both directed mean squared
/// nearest-neighbor distances. Returns the value and its gradient w.r.t. `warped`.
pub fn chamfer_loss(warped: &[Point], target: &[Point]) -> Result<(f64, Vec<Point>), LossError> {
    if target.is_empty() {
        return Err(LossError::EmptyCloud);
    }
    let grid = VoxelGrid::build(target, 1.0).expect("positive cell");
    chamfer_loss_indexed(warped, &grid)
}

/// [`chamfer_loss`] against a prebuilt index of the target.
pub fn chamfer_loss_indexed(
    warped: &[Point],
    target: &VoxelGrid,
) -> Result<(f64, Vec<Point>), LossError> {
    if warped.is_empty() || target.is_empty() {
        return Err(LossError::EmptyCloud);
    }
    let tp = target.points();
    let nw = warped.len() as f64;
    let nt = tp.len() as f64;
    let mut grad = vec![Point::zeros(); warped.len()];
    let mut fwd = 0.0;
    for (i, w) in warped.iter().enumerate() {
        let (j, d2) = target.nearest_to(w).expect("nonempty");
        fwd += d2;
        grad[i] += (w - tp[j]) / nw;
    }
    let wgrid = VoxelGrid::build(warped, target.cell_size()).expect("positive cell");
    let mut bwd = 0.0;
    for t in tp {
        let (i, d2) = wgrid.nearest_to(t).expect("nonempty");
        bwd += d2;
        grad[i] += (warped[i] - t) / nt;
    }
    Ok((0.5 * (fwd / nw + bwd / nt), grad))
}

const PROB_EPS: f64 = 1e-12;

/// `F(p) = -alpha (1-p)^gamma ln p` on the clamped probability, with its derivative.
fn focal(p: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let q = 1.0 - clamped;
    let value = -alpha * q.powf(gamma) * clamped.ln();
    if clamped != p {
        return (value, 0.0);
    }
    let mut deriv = -alpha * q.powf(gamma) / clamped;
    if gamma != 0.0 {
        deriv += alpha * gamma * q.powf(gamma - 1.0) * clamped.ln();
    }
    (value, deriv)
}

/// Balanced focal loss on the background channel against foreground targets
/// `y = [label > 0]`. Only channel 0 receives gradient.
pub fn bf_loss(
    logits: &MaskLogits,
    pseudo: &[u32],
    w: &LossWeights,
) -> Result<(f64, Array2<f64>), LossError> {
    let n = logits.rows();
    check_len("pseudo-labels", pseudo.len(), n)?;
    let mut grad = Array2::zeros(logits.logits.dim());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut value = 0.0;
    for (i, &label) in pseudo.iter().enumerate() {
        let m0 = logits.logits[(i, 0)];
        let p_bg = crate::network::sigmoid(m0);
        let dp_bg = p_bg * (1.0 - p_bg);
        let (v, dv_dm) = if label > 0 {
            let (f, df) = focal(1.0 - p_bg, w.focal_alpha, w.focal_gamma);
            (w.focal_beta * f, -w.focal_beta * df * dp_bg)
        } else {
            let (f, df) = focal(p_bg, w.focal_alpha, w.focal_gamma);
            ((1.0 - w.focal_beta) * f, (1.0 - w.focal_beta) * df * dp_bg)
        };
        value += v;
        grad[(i, 0)] = dv_dm / n as f64;
    }
    Ok((value / n as f64, grad))
}

/// Rigid consistency: for each foreground channel with at least three argmax
/// members, the residual norm of the best rigid fit between the points and
/// their warped positions, scaled by `1 / (N C)`. The fitted motion is held
/// fixed when differentiating; returns the gradient w.r.t. `flow`.
pub fn rigid_loss(
    points: &[Point],
    logits: &MaskLogits,
    flow: &[Point],
) -> Result<(f64, Vec<Point>), LossError> {
    let n = points.len();
    check_len("logits", logits.rows(), n)?;
    check_len("flow", flow.len(), n)?;
    let labels = predict_labels(logits);
    rigid_loss_labeled(points, &labels, logits.channels(), flow)
}

/// [`rigid_loss`] with precomputed argmax labels.
pub fn rigid_loss_labeled(
    points: &[Point],
    labels: &[u32],
    channels: usize,
    flow: &[Point],
) -> Result<(f64, Vec<Point>), LossError> {
    let n = points.len();
    check_len("labels", labels.len(), n)?;
    check_len("flow", flow.len(), n)?;
    let mut grad = vec![Point::zeros(); n];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / (n * channels) as f64;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); channels];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 && (l as usize) < channels {
            members[l as usize].push(i);
        }
    }
    let mut value = 0.0;
    for idx in members.iter().filter(|m| m.len() >= 3) {
        let src: Vec<Point> = idx.iter().map(|&i| points[i]).collect();
        let dst: Vec<Point> = idx.iter().map(|&i| points[i] + flow[i]).collect();
        let fit = kabsch_align(&src, &dst, None)
            .expect("three or more points")
            .transform;
        let resid: Vec<Point> = src
            .iter()
            .zip(&dst)
            .map(|(s, d)| fit.apply(s) - d)
            .collect();
        let norm = resid.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt();
        value += norm * scale;
        if norm > 0.0 {
            for (&i, r) in idx.iter().zip(&resid) {
                grad[i] = -r * (scale / norm);
            }
        }
    }
    Ok((value, grad))
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Pulls a gradient on softmax probabilities back to the logits.
pub fn softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for i in 0..probs.nrows() {
        let s = probs.row(i);
        let g = grad_probs.row(i);
        let dot = s.dot(&g);
        for c in 0..probs.ncols() {
            out[(i, c)] = s[c] * (g[c] - dot);
        }
    }
    out
}

/// KNN and ball neighborhoods of a fixed cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub knn: Vec<Vec<usize>>,
    pub ball: Vec<Vec<usize>>,
}

impl NeighborGraph {
    /// KNN lists drop neighbors farther than `knn_max_dist`; `k` is capped at `N - 1`.
    pub fn build(points: &[Point], cfg: &NeighborQueryConfig) -> Self {
        let n = points.len();
        if n == 0 {
            return Self {
                knn: Vec::new(),
                ball: Vec::new(),
            };
        }
        let grid = VoxelGrid::build(points, cfg.radius.max(0.1)).expect("positive cell");
        let k = cfg.k.min(n - 1);
        let max2 = cfg.knn_max_dist * cfg.knn_max_dist;
        let knn = (0..n)
            .map(|i| {
                grid.k_nearest_to(&points[i], k, Some(i))
                    .into_iter()
                    .filter(|(_, d2)| *d2 <= max2)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        let ball = (0..n)
            .map(|i| grid.ball_around(&points[i], cfg.radius, Some(i)))
            .collect();
        Self { knn, ball }
    }
}

/// Spatial mask consistency on softmax probabilities over KNN and ball neighbors.
pub fn smc_loss(
    graph: &NeighborGraph,
    logits: &MaskLogits,
    w: &LossWeights,
) -> Result<(f64, Array2<f64>), LossError> {
    let n = logits.rows();
    check_len("neighbor graph", graph.knn.len(), n)?;
    let probs = softmax_rows(&logits.logits);
    let mut gp: Array2<f64> = Array2::zeros(probs.dim());
    if n == 0 {
        return Ok((0.0, gp));
    }
    let mut value = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        for (weight, list) in [(w.w_knn, &graph.knn[i]), (w.w_ball, &graph.ball[i])] {
            if weight == 0.0 {
                continue;
            }
            for &j in list {
                let diff = &probs.row(i) - &probs.row(j);
                value += weight * diff.dot(&diff) * inv_n;
                let g = diff * (2.0 * weight * inv_n);
                let mut gi = gp.row_mut(i);
                gi += &g;
                let mut gj = gp.row_mut(j);
                gj -= &g;
            }
        }
    }
    Ok((value, softmax_backward(&probs, &gp)))
}

/// Foreground pairs farther apart than `delta`, in lexicographic order, thinned
/// to at most `max_pairs` by a fixed stride.
pub fn dom_pairs(
    points: &[Point],
    labels: &[u32],
    delta: f64,
    max_pairs: usize,
) -> Vec<(usize, usize)> {
    let fg: Vec<usize> = (0..points.len()).filter(|&i| labels[i] > 0).collect();
    let d2 = delta * delta;
    let visit = |f: &mut dyn FnMut(usize, usize) -> bool| {
        for (a, &i) in fg.iter().enumerate() {
            for &j in &fg[a + 1..] {
                if (points[i] - points[j]).norm_squared() > d2 && !f(i, j) {
                    return;
                }
            }
        }
    };
    let mut total = 0usize;
    visit(&mut |_, _| {
        total += 1;
        true
    });
    let mut out = Vec::with_capacity(total.min(max_pairs));
    if total <= max_pairs {
        visit(&mut |i, j| {
            out.push((i, j));
            true
        });
        return out;
    }
    // entry m of the thinned list is pair floor(m * total / max_pairs)
    let mut pos = 0usize;
    let mut next = 0usize;
    visit(&mut |i, j| {
        if pos == next {
            out.push((i, j));
            next = out.len() * total / max_pairs;
        }
        pos += 1;
        out.len() < max_pairs
    });
    out
}

/// Mean cosine similarity of softmax rows over distant foreground pairs, or
/// `l_min` with zero gradient when there is no such pair.
pub fn dom_loss(
    points: &[Point],
    logits: &MaskLogits,
    delta: f64,
    max_pairs: usize,
    w: &LossWeights,
) -> Result<(f64, Array2<f64>), LossError> {
    let n = points.len();
    check_len("logits", logits.rows(), n)?;
    let labels = predict_labels(logits);
    let pairs = dom_pairs(points, &labels, delta, max_pairs);
    let mut grad = Array2::zeros(logits.logits.dim());
    if pairs.is_empty() {
        return Ok((w.l_min, grad));
    }
    let probs = softmax_rows(&logits.logits);
    let norms: Vec<f64> = probs.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let inv = 1.0 / pairs.len() as f64;
    let mut gp: Array2<f64> = Array2::zeros(probs.dim());
    let mut value = 0.0;
    for &(i, j) in &pairs {
        let (si, sj) = (probs.row(i), probs.row(j));
        let nn = norms[i] * norms[j];
        let cos = si.dot(&sj) / nn;
        value += cos * inv;
        let gi = (&sj / nn - &si * (cos / (norms[i] * norms[i]))) * inv;
        let gj = (&si / nn - &sj * (cos / (norms[j] * norms[j]))) * inv;
        let mut row = gp.row_mut(i);
        row += &gi;
        let mut row = gp.row_mut(j);
        row += &gj;
    }
    grad = softmax_backward(&probs, &gp);
    Ok((value, grad))
}

/// Per-pair constants the losses need.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub source: Vec<Point>,
    pub target: VoxelGrid,
    pub pseudo: Vec<u32>,
    pub graph: NeighborGraph,
}

impl LossContext {
    pub fn new(
        source: &[Point],
        target: &[Point],
        pseudo: Vec<u32>,
        neighbors: &NeighborQueryConfig,
    ) -> Result<Self, LossError> {
        if source.is_empty() || target.is_empty() {
            return Err(LossError::EmptyCloud);
        }
        check_len("pseudo-labels", pseudo.len(), source.len())?;
        Ok(Self {
            source: source.to_vec(),
            target: VoxelGrid::build(target, 1.0).expect("positive cell"),
            pseudo,
            graph: NeighborGraph::build(source, neighbors),
        })
    }
}

/// Unweighted term values; disabled terms are not evaluated and read 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub cd: f64,
    pub bf: f64,
    pub rigid: f64,
    pub smc: f64,
    pub dom: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub grad_flow: Vec<Point>,
    pub grad_logits: Array2<f64>,
}

/// Weighted sum of the enabled terms and of their gradients.
pub fn total_loss(
    ctx: &LossContext,
    total_flow: &[Point],
    logits: &MaskLogits,
    w: &LossWeights,
) -> Result<LossOutput, LossError> {
    let n = ctx.source.len();
    check_len("flow", total_flow.len(), n)?;
    check_len("logits", logits.rows(), n)?;
    let mut terms = LossTerms::default();
    let mut grad_flow = vec![Point::zeros(); n];
    let mut grad_logits = Array2::zeros(logits.logits.dim());
    let add_flow = |dst: &mut Vec<Point>, g: &[Point], lambda: f64| {
        for (d, v) in dst.iter_mut().zip(g) {
            *d += v * lambda;
        }
    };

    if w.lambda_cd > 0.0 {
        let warped: Vec<Point> = ctx
            .source
            .iter()
            .zip(total_flow)
            .map(|(p, f)| p + f)
            .collect();
        let (v, g) = chamfer_loss_indexed(&warped, &ctx.target)?;
        terms.cd = v;
        terms.total += w.lambda_cd * v;
        add_flow(&mut grad_flow, &g, w.lambda_cd);
    }
    if w.lambda_bf > 0.0 {
        let (v, g) = bf_loss(logits, &ctx.pseudo, w)?;
        terms.bf = v;
        terms.total += w.lambda_bf * v;
        grad_logits.scaled_add(w.lambda_bf, &g);
    }
    if w.lambda_rigid > 0.0 {
        let (v, g) = rigid_loss(&ctx.source, logits, total_flow)?;
        terms.rigid = v;
        terms.total += w.lambda_rigid * v;
        add_flow(&mut grad_flow, &g, w.lambda_rigid);
    }
    if w.lambda_smc > 0.0 {
        let (v, g) = smc_loss(&ctx.graph, logits, w)?;
        terms.smc = v;
        terms.total += w.lambda_smc * v;
        grad_logits.scaled_add(w.lambda_smc, &g);
    }
    if w.lambda_dom > 0.0 {
        let (v, g) = dom_loss(&ctx.source, logits, w.dom_delta, w.dom_max_pairs, w)?;
        terms.dom = v;
        terms.total += w.lambda_dom * v;
        grad_logits.scaled_add(w.lambda_dom, &g);
    }
    Ok(LossOutput {
        terms,
        grad_flow,
        grad_logits,
    })
}
