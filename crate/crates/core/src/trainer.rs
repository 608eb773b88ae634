//! Training and inference pipeline.
//!
//! Each pair is prepared once: an ego-motion hint from ICP on the full clouds,
//! coarse pseudo-labels, and the ego flow from ICP restricted to the static
//! source points. Epochs then run forward, loss and backward per pair in a
//! fixed order with plain gradient descent.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse::{label_pair, label_sequence, CoarseConfig, CoarseError, CoarseOutput};
use crate::losses::{total_loss, LossContext, LossError, LossTerms, LossWeights};
use crate::metrics::{
    epe_3way_accumulate, seg_metrics_min_size, EpeAccumulator, EpeReport, MetricsError, SegReport,
};
use crate::network::{backward, forward, predict_labels, ModelConfig, ModelParams, NetworkError};
use crate::rigid::{ego_flow, icp_ego_motion, icp_from, IcpConfig, RigidError, RigidTransform};
use crate::scene::{FlowField, FlowKind, FramePair, MaskLogits, Point, SceneError};
use crate::spatial::{NeighborQueryConfig, VoxelGrid};

/// Total loss above which training stops.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training pairs")]
    NoPairs,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("loss diverged to {loss} at epoch {epoch}, pair {pair}")]
    DivergenceDetected {
        epoch: usize,
        pair: usize,
        loss: f64,
    },
    #[error(transparent)]
    Coarse(#[from] CoarseError),
    #[error(transparent)]
    Rigid(#[from] RigidError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Reshuffle the pair order each epoch with a seeded generator.
    pub shuffle: bool,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub coarse: CoarseConfig,
    pub neighbors: NeighborQueryConfig,
    pub icp: IcpConfig,
    /// Half-width of the square evaluation crop, meters.
    pub eval_half_extent: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.05,
            seed: 0,
            shuffle: false,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            coarse: CoarseConfig::default(),
            neighbors: NeighborQueryConfig::default(),
            icp: IcpConfig::default(),
            eval_half_extent: 50.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs must be at least 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig(
                "learning rate must be finite and nonnegative".into(),
            ));
        }
        if self.model.hidden == 0 || self.model.channels < 2 || !(self.model.voxel_size > 0.0) {
            return Err(TrainError::InvalidConfig(
                "model needs hidden >= 1, channels >= 2, voxel_size > 0".into(),
            ));
        }
        self.weights.validate().map_err(TrainError::InvalidConfig)
    }
}

/// Per-pair quantities computed once before training.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    /// The pair with its ICP ego hint attached.
    pub pair: FramePair,
    pub coarse: CoarseOutput,
    /// Ego motion fitted on the static source points.
    pub ego: RigidTransform,
    pub ego_flow: FlowField,
    pub grid: VoxelGrid,
    pub context: LossContext,
}

fn ego_hint(pair: &FramePair, cfg: &TrainConfig) -> Result<RigidTransform, TrainError> {
    match pair.ego_pose_hint {
        Some(h) => Ok(h),
        None => Ok(icp_ego_motion(&pair.source, &pair.target, &cfg.icp)?.transform),
    }
}

fn static_ego(
    pair: &FramePair,
    coarse: &CoarseOutput,
    hint: RigidTransform,
    cfg: &TrainConfig,
) -> Result<RigidTransform, TrainError> {
    let statics: Vec<Point> = pair
        .source
        .points()
        .iter()
        .zip(&coarse.mask.flags)
        .filter(|(_, dynamic)| !**dynamic)
        .map(|(p, _)| *p)
        .collect();
    match icp_from(&statics, pair.target.points(), hint, &cfg.icp) {
        Ok(r) => Ok(r.transform),
        // too few static points to refit: keep the full-cloud estimate
        Err(RigidError::TooFewPoints { .. }) => Ok(hint),
        Err(e) => Err(e.into()),
    }
}

fn finish_prepare(
    pair: FramePair,
    coarse: CoarseOutput,
    cfg: &TrainConfig,
) -> Result<PreparedPair, TrainError> {
    let hint = pair.ego_pose_hint.unwrap_or_else(RigidTransform::identity);
    let ego = static_ego(&pair, &coarse, hint, cfg)?;
    let ego_flow = ego_flow(&pair.source, &ego);
    let grid = VoxelGrid::build(pair.source.points(), cfg.model.voxel_size)
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let context = LossContext::new(
        pair.source.points(),
        pair.target.points(),
        coarse.pseudo.labels.clone(),
        &cfg.neighbors,
    )?;
    Ok(PreparedPair {
        pair,
        coarse,
        ego,
        ego_flow,
        grid,
        context,
    })
}

/// Prepares an independent pair (no temporal consensus).
pub fn prepare_pair(pair: &FramePair, cfg: &TrainConfig) -> Result<PreparedPair, TrainError> {
    let hinted = pair.clone().with_hint(ego_hint(pair, cfg)?);
    let coarse = label_pair(&hinted, &cfg.coarse)?;
    finish_prepare(hinted, coarse, cfg)
}

/// Prepares the pairs of one chained sequence, refining clusters over time.
pub fn prepare_sequence(
    pairs: &[FramePair],
    cfg: &TrainConfig,
) -> Result<Vec<PreparedPair>, TrainError> {
    let hinted: Vec<FramePair> = pairs
        .iter()
        .map(|p| Ok(p.clone().with_hint(ego_hint(p, cfg)?)))
        .collect::<Result<_, TrainError>>()?;
    let coarse = label_sequence(&hinted, &cfg.coarse)?;
    hinted
        .into_iter()
        .zip(coarse)
        .map(|(p, c)| finish_prepare(p, c, cfg))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Per-pair terms averaged over the epoch, measured before each update.
    pub terms: LossTerms,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub curve: Vec<EpochLoss>,
}

/// Runs gradient descent over prepared pairs.
pub fn train_prepared(
    prepared: &[PreparedPair],
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if prepared.is_empty() {
        return Err(TrainError::NoPairs);
    }
    let mut params = ModelParams::init(cfg.model, cfg.seed)?;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sum = LossTerms::default();
        for &k in &order {
            let pp = &prepared[k];
            let (residual, logits, trace) = forward(&params, &pp.pair.source, &pp.grid)?;
            let total = FlowField::compose(&pp.ego_flow, &residual)?;
            let out = total_loss(&pp.context, &total.vectors, &logits, &cfg.weights)?;
            if !(out.terms.total <= DIVERGENCE_LIMIT) {
                return Err(TrainError::DivergenceDetected {
                    epoch,
                    pair: k,
                    loss: out.terms.total,
                });
            }
            accumulate_terms(&mut sum, &out.terms);
            let grad_flow = FlowField::new(out.grad_flow, FlowKind::Residual).to_array();
            let grads = backward(&params, &trace, &grad_flow, &out.grad_logits)?;
            params.add_scaled(-cfg.learning_rate, &grads);
        }
        scale_terms(&mut sum, 1.0 / prepared.len() as f64);
        curve.push(EpochLoss { epoch, terms: sum });
    }
    Ok(TrainOutput { params, curve })
}

/// Prepares every pair independently, then trains.
pub fn train(pairs: &[FramePair], cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::NoPairs);
    }
    let prepared = pairs
        .iter()
        .map(|p| prepare_pair(p, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    train_prepared(&prepared, cfg)
}

fn accumulate_terms(acc: &mut LossTerms, t: &LossTerms) {
    acc.total += t.total;
    acc.cd += t.cd;
    acc.bf += t.bf;
    acc.rigid += t.rigid;
    acc.smc += t.smc;
    acc.dom += t.dom;
}

fn scale_terms(acc: &mut LossTerms, s: f64) {
    acc.total *= s;
    acc.cd *= s;
    acc.bf *= s;
    acc.rigid *= s;
    acc.smc *= s;
    acc.dom *= s;
}

pub const LOSS_CSV_HEADER: &str = "epoch,loss_total,loss_cd,loss_bf,loss_rigid,loss_smc,loss_dom";

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for e in curve {
        let t = &e.terms;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.epoch, t.total, t.cd, t.bf, t.rigid, t.smc, t.dom
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub ego_transform: RigidTransform,
    pub ego: FlowField,
    pub residual: FlowField,
    /// `ego + residual`, element by element.
    pub total: FlowField,
    pub logits: MaskLogits,
    pub labels: Vec<u32>,
}

/// Predicts flow and instance labels for a prepared pair.
pub fn infer_prepared(params: &ModelParams, pp: &PreparedPair) -> Result<Inference, TrainError> {
    let (residual, logits, _) = forward(params, &pp.pair.source, &pp.grid)?;
    let total = FlowField::compose(&pp.ego_flow, &residual)?;
    let labels = predict_labels(&logits);
    Ok(Inference {
        ego_transform: pp.ego,
        ego: pp.ego_flow.clone(),
        residual,
        total,
        logits,
        labels,
    })
}

/// Full inference on a raw pair: coarse split, ICP ego flow, network residual and logits.
pub fn infer(
    params: &ModelParams,
    pair: &FramePair,
    cfg: &TrainConfig,
) -> Result<Inference, TrainError> {
    let cfg = TrainConfig {
        model: params.config,
        ..*cfg
    };
    infer_prepared(params, &prepare_pair(pair, &cfg)?)
}

/// Held-out evaluation: pooled three-way EPE and frame-averaged segmentation
/// scores over ground-truth instances of at least `min_instance_points` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeldOutReport {
    pub epe: EpeReport,
    pub seg: SegReport,
}

pub fn evaluate_flows(
    prepared: &[PreparedPair],
    predictions: &[(FlowField, Vec<u32>)],
    cfg: &TrainConfig,
    min_instance_points: usize,
) -> Result<HeldOutReport, TrainError> {
    let mut acc = EpeAccumulator::default();
    let mut segs = Vec::with_capacity(prepared.len());
    for (pp, (flow, labels)) in prepared.iter().zip(predictions) {
        acc.merge(&epe_3way_accumulate(
            flow,
            &pp.pair.source,
            cfg.eval_half_extent,
        )?);
        let gt = pp
            .pair
            .source
            .gt_labels()
            .ok_or(MetricsError::MissingGroundTruth("labels"))?;
        segs.push(seg_metrics_min_size(labels, gt, min_instance_points)?);
    }
    Ok(HeldOutReport {
        epe: acc.report(),
        seg: SegReport::mean(&segs),
    })
}

/// Evaluates a trained model on prepared held-out pairs.
pub fn evaluate_model(
    params: &ModelParams,
    prepared: &[PreparedPair],
    cfg: &TrainConfig,
    min_instance_points: usize,
) -> Result<HeldOutReport, TrainError> {
    let preds = prepared
        .iter()
        .map(|pp| infer_prepared(params, pp).map(|i| (i.total, i.labels)))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_flows(prepared, &preds, cfg, min_instance_points)
}

/// Evaluates the ego-flow-only predictor (zero residual, all background).
pub fn evaluate_ego_only(
    prepared: &[PreparedPair],
    cfg: &TrainConfig,
) -> Result<HeldOutReport, TrainError> {
    let preds: Vec<(FlowField, Vec<u32>)> = prepared
        .iter()
        .map(|pp| {
            let total = FlowField::new(pp.ego_flow.vectors.clone(), FlowKind::Total);
            (total, vec![0; pp.pair.source.len()])
        })
        .collect();
    evaluate_flows(prepared, &preds, cfg, 0)
}

/// The five cumulative loss configurations: Chamfer, then +BF, +Rigid, +SMC, +DOM.
pub fn ablation_rows(base: &LossWeights) -> Vec<(String, LossWeights)> {
    let names = [
        "cd",
        "cd+bf",
        "cd+bf+rigid",
        "cd+bf+rigid+smc",
        "cd+bf+rigid+smc+dom",
    ];
    (0..5)
        .map(|row| {
            let on = |k: usize, v: f64| if row >= k { v } else { 0.0 };
            let w = LossWeights {
                lambda_cd: base.lambda_cd,
                lambda_bf: on(1, base.lambda_bf),
                lambda_rigid: on(2, base.lambda_rigid),
                lambda_smc: on(3, base.lambda_smc),
                lambda_dom: on(4, base.lambda_dom),
                ..*base
            };
            (names[row].to_string(), w)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub id: usize,
    pub losses: String,
    pub weights: LossWeights,
    pub report: HeldOutReport,
    pub final_loss: f64,
}

/// Trains each cumulative loss configuration on `train` and evaluates on `held_out`.
pub fn ablate(
    train_set: &[PreparedPair],
    held_out: &[PreparedPair],
    cfg: &TrainConfig,
    min_instance_points: usize,
) -> Result<Vec<AblationRow>, TrainError> {
    ablation_rows(&cfg.weights)
        .into_iter()
        .enumerate()
        .map(|(i, (losses, weights))| {
            let run_cfg = TrainConfig { weights, ..*cfg };
            let out = train_prepared(train_set, &run_cfg)?;
            let report = evaluate_model(&out.params, held_out, &run_cfg, min_instance_points)?;
            Ok(AblationRow {
                id: i + 1,
                losses,
                weights,
                report,
                final_loss: out.curve.last().map_or(0.0, |e| e.terms.total),
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("id,losses,bs,fs,fd,three_way,recall,ri\n");
    for r in rows {
        let e = &r.report.epe;
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4}",
            r.id, r.losses, e.bs, e.fs, e.fd, e.three_way, r.report.seg.recall, r.report.seg.ri
        );
    }
    s
}
