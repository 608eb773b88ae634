//! Flow and segmentation evaluation.
//!
//! Flow error is split into background-static (BS), foreground-static (FS) and
//! foreground-dynamic (FD) points using ground truth. Segmentation instances
//! are matched greedily by descending IoU with a 0.5 threshold.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{crop_to_eval_region, FlowField, Point, PointCloud};

/// Ground-truth speed (meters per frame) above which a foreground point is dynamic.
pub const DYNAMIC_THRESHOLD: f64 = 0.05;
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("missing ground truth {0}")]
    MissingGroundTruth(&'static str),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpeReport {
    pub bs: f64,
    pub fs: f64,
    pub fd: f64,
    pub three_way: f64,
    pub bs_count: usize,
    pub fs_count: usize,
    pub fd_count: usize,
    pub bs_empty: bool,
    pub fs_empty: bool,
    pub fd_empty: bool,
}

/// Point-weighted sums across any number of frames.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpeAccumulator {
    sums: [f64; 3],
    counts: [usize; 3],
}

impl EpeAccumulator {
    pub fn add(&mut self, pred: &Point, gt: &Point, gt_label: u32) {
        let class = if gt_label == 0 {
            0
        } else if gt.norm() > DYNAMIC_THRESHOLD {
            2
        } else {
            1
        };
        self.sums[class] += (pred - gt).norm();
        self.counts[class] += 1;
    }

    pub fn merge(&mut self, other: &EpeAccumulator) {
        for c in 0..3 {
            self.sums[c] += other.sums[c];
            self.counts[c] += other.counts[c];
        }
    }

    pub fn report(&self) -> EpeReport {
        let mean = |c: usize| {
            if self.counts[c] == 0 {
                0.0
            } else {
                self.sums[c] / self.counts[c] as f64
            }
        };
        let (bs, fs, fd) = (mean(0), mean(1), mean(2));
        EpeReport {
            bs,
            fs,
            fd,
            three_way: (bs + fs + fd) / 3.0,
            bs_count: self.counts[0],
            fs_count: self.counts[1],
            fd_count: self.counts[2],
            bs_empty: self.counts[0] == 0,
            fs_empty: self.counts[1] == 0,
            fd_empty: self.counts[2] == 0,
        }
    }
}

/// Accumulates the per-class errors of one frame, uncropped.
pub fn epe_accumulate(
    pred: &[Point],
    gt_flow: &[Point],
    gt_labels: &[u32],
) -> Result<EpeAccumulator, MetricsError> {
    check_len("ground-truth flow", gt_flow.len(), pred.len())?;
    check_len("ground-truth labels", gt_labels.len(), pred.len())?;
    let mut acc = EpeAccumulator::default();
    for ((p, g), &l) in pred.iter().zip(gt_flow).zip(gt_labels) {
        acc.add(p, g, l);
    }
    Ok(acc)
}

/// Three-way EPE of `pred` against the ground truth carried by `source`,
/// restricted to the square evaluation region of half-width `eval_half_extent`.
pub fn epe_3way(
    pred: &FlowField,
    source: &PointCloud,
    eval_half_extent: f64,
) -> Result<EpeReport, MetricsError> {
    Ok(epe_3way_accumulate(pred, source, eval_half_extent)?.report())
}

pub fn epe_3way_accumulate(
    pred: &FlowField,
    source: &PointCloud,
    eval_half_extent: f64,
) -> Result<EpeAccumulator, MetricsError> {
    check_len("predicted flow", pred.len(), source.len())?;
    let gt_flow = source
        .gt_flow()
        .ok_or(MetricsError::MissingGroundTruth("flow"))?;
    let gt_labels = source
        .gt_labels()
        .ok_or(MetricsError::MissingGroundTruth("labels"))?;
    let (_, kept) = crop_to_eval_region(source, eval_half_extent);
    let mut acc = EpeAccumulator::default();
    for i in kept {
        acc.add(&pred.vectors[i], &gt_flow[i], gt_labels[i]);
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub ap: f64,
    pub pq: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub miou: f64,
    pub ri: f64,
}

impl SegReport {
    pub fn mean(reports: &[SegReport]) -> SegReport {
        let n = reports.len().max(1) as f64;
        let mut out = SegReport::default();
        for r in reports {
            out.ap += r.ap / n;
            out.pq += r.pq / n;
            out.f1 += r.f1 / n;
            out.precision += r.precision / n;
            out.recall += r.recall / n;
            out.miou += r.miou / n;
            out.ri += r.ri / n;
        }
        out
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), MetricsError> {
    if got != expected {
        return Err(MetricsError::LengthMismatch {
            what,
            got,
            expected,
        });
    }
    Ok(())
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Rand index via the contingency table; exact and linear in N.
pub fn rand_index(pred: &[u32], gt: &[u32]) -> f64 {
    let n = pred.len() as u64;
    if n < 2 {
        return 1.0;
    }
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        *joint.entry((p, g)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(g).or_default() += 1;
    }
    let both: u64 = joint.values().map(|&c| choose2(c)).sum();
    let same_pred: u64 = rows.values().map(|&c| choose2(c)).sum();
    let same_gt: u64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    // agreeing pairs = together in both + apart in both
    let agree = total + 2 * both - same_pred - same_gt;
    agree as f64 / total as f64
}

/// Rand index estimated from `samples` uniformly drawn distinct pairs.
pub fn rand_index_sampled(pred: &[u32], gt: &[u32], samples: usize, seed: u64) -> f64 {
    let n = pred.len();
    if n < 2 || samples == 0 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0usize;
    for _ in 0..samples {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        if (pred[i] == pred[j]) == (gt[i] == gt[j]) {
            agree += 1;
        }
    }
    agree as f64 / samples as f64
}

/// A matched (prediction, ground truth) instance pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceMatch {
    pub pred: u32,
    pub gt: u32,
    pub iou: f64,
}

struct Overlaps {
    pred_sizes: BTreeMap<u32, usize>,
    gt_sizes: BTreeMap<u32, usize>,
    inter: BTreeMap<(u32, u32), usize>,
}

impl Overlaps {
    fn new(pred: &[u32], gt: &[u32]) -> Self {
        let mut o = Overlaps {
            pred_sizes: BTreeMap::new(),
            gt_sizes: BTreeMap::new(),
            inter: BTreeMap::new(),
        };
        for (&p, &g) in pred.iter().zip(gt) {
            if p > 0 {
                *o.pred_sizes.entry(p).or_default() += 1;
            }
            if g > 0 {
                *o.gt_sizes.entry(g).or_default() += 1;
            }
            if p > 0 && g > 0 {
                *o.inter.entry((p, g)).or_default() += 1;
            }
        }
        o
    }

    fn iou(&self, p: u32, g: u32) -> f64 {
        let i = self.inter.get(&(p, g)).copied().unwrap_or(0);
        let u = self.pred_sizes[&p] + self.gt_sizes[&g] - i;
        i as f64 / u as f64
    }
}

/// Greedy one-to-one matching by descending IoU, keeping pairs with IoU >= 0.5.
/// Ties are broken by prediction id, then ground-truth id.
pub fn match_instances(pred: &[u32], gt: &[u32]) -> Vec<InstanceMatch> {
    let o = Overlaps::new(pred, gt);
    greedy(&o)
}

fn greedy(o: &Overlaps) -> Vec<InstanceMatch> {
    let mut candidates: Vec<InstanceMatch> = o
        .inter
        .keys()
        .map(|&(p, g)| InstanceMatch {
            pred: p,
            gt: g,
            iou: o.iou(p, g),
        })
        .filter(|m| m.iou >= MATCH_IOU)
        .collect();
    candidates.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.pred.cmp(&b.pred))
            .then(a.gt.cmp(&b.gt))
    });
    let mut used_p = Vec::new();
    let mut used_g = Vec::new();
    let mut out = Vec::new();
    for m in candidates {
        if used_p.contains(&m.pred) || used_g.contains(&m.gt) {
            continue;
        }
        used_p.push(m.pred);
        used_g.push(m.gt);
        out.push(m);
    }
    out
}

/// `num / den`; an empty denominator scores 1 only when the other side is empty too.
fn ratio_or_empty(num: usize, den: usize, other: usize) -> f64 {
    if den == 0 {
        if other == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// Average precision with predictions ranked by their best IoU against any
/// ground-truth instance; a prediction counts as a hit when it is matched.
fn average_precision(o: &Overlaps, matches: &[InstanceMatch]) -> f64 {
    let n_gt = o.gt_sizes.len();
    let n_pred = o.pred_sizes.len();
    if n_gt == 0 {
        return if n_pred == 0 { 1.0 } else { 0.0 };
    }
    let mut ranked: Vec<(f64, bool, u32)> = o
        .pred_sizes
        .keys()
        .map(|&p| {
            if let Some(m) = matches.iter().find(|m| m.pred == p) {
                (m.iou, true, p)
            } else {
                let best = o.gt_sizes.keys().map(|&g| o.iou(p, g)).fold(0.0, f64::max);
                (best, false, p)
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    for (k, &(_, hit, _)) in ranked.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // all-point interpolation: precision envelope integrated over recall steps
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..curve.len() {
        let (recall, _) = curve[k];
        if recall > prev_recall {
            let envelope = curve[k..].iter().map(|c| c.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    ap
}

/// All seven segmentation scores. Label 0 is background on both sides.
pub fn seg_metrics(pred: &[u32], gt: &[u32]) -> Result<SegReport, MetricsError> {
    check_len("predicted labels", pred.len(), gt.len())?;
    let o = Overlaps::new(pred, gt);
    let matches = greedy(&o);
    let tp = matches.len();
    let n_pred = o.pred_sizes.len();
    let n_gt = o.gt_sizes.len();
    let fp = n_pred - tp;
    let fn_ = n_gt - tp;

    let precision = ratio_or_empty(tp, n_pred, n_gt);
    let recall = ratio_or_empty(tp, n_gt, n_pred);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let iou_sum: f64 = matches.iter().map(|m| m.iou).sum();
    let pq_den = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
    let pq = if pq_den == 0.0 { 1.0 } else { iou_sum / pq_den };

    let mut ious: Vec<f64> = matches.iter().map(|m| m.iou).collect();
    let bg_inter = pred
        .iter()
        .zip(gt)
        .filter(|(&p, &g)| p == 0 && g == 0)
        .count();
    let bg_union = pred
        .iter()
        .zip(gt)
        .filter(|(&p, &g)| p == 0 || g == 0)
        .count();
    if bg_union > 0 {
        ious.push(bg_inter as f64 / bg_union as f64);
    }
    let miou = if ious.is_empty() {
        1.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    };

    Ok(SegReport {
        ap: average_precision(&o, &matches),
        pq,
        f1,
        precision,
        recall,
        miou,
        ri: rand_index(pred, gt),
    })
}

/// [`seg_metrics`] after dropping every point of ground-truth instances smaller
/// than `min_points` (background is always kept).
pub fn seg_metrics_min_size(
    pred: &[u32],
    gt: &[u32],
    min_points: usize,
) -> Result<SegReport, MetricsError> {
    check_len("predicted labels", pred.len(), gt.len())?;
    let mut sizes: HashMap<u32, usize> = HashMap::new();
    for &g in gt {
        *sizes.entry(g).or_default() += 1;
    }
    let keep: Vec<usize> = (0..gt.len())
        .filter(|&i| gt[i] == 0 || sizes[&gt[i]] >= min_points)
        .collect();
    let p: Vec<u32> = keep.iter().map(|&i| pred[i]).collect();
    let g: Vec<u32> = keep.iter().map(|&i| gt[i]).collect();
    seg_metrics(&p, &g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_index: i64,
    pub epe: EpeReport,
    pub seg: SegReport,
}

/// Pooled EPE, frame-averaged segmentation scores and the per-frame breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epe: EpeReport,
    pub seg: SegReport,
    pub frames: Vec<FrameMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// One evaluated frame: the source cloud with ground truth, predicted total
/// flow and predicted instance labels.
pub struct EvalFrame<'a> {
    pub source: &'a PointCloud,
    pub flow: &'a FlowField,
    pub labels: &'a [u32],
}

pub fn evaluate(
    frames: &[EvalFrame<'_>],
    eval_half_extent: f64,
) -> Result<EvalReport, MetricsError> {
    let mut pooled = EpeAccumulator::default();
    let mut per_frame = Vec::with_capacity(frames.len());
    for f in frames {
        let acc = epe_3way_accumulate(f.flow, f.source, eval_half_extent)?;
        pooled.merge(&acc);
        let gt = f
            .source
            .gt_labels()
            .ok_or(MetricsError::MissingGroundTruth("labels"))?;
        per_frame.push(FrameMetrics {
            frame_index: f.source.frame_index,
            epe: acc.report(),
            seg: seg_metrics(f.labels, gt)?,
        });
    }
    let seg = SegReport::mean(&per_frame.iter().map(|f| f.seg).collect::<Vec<_>>());
    Ok(EvalReport {
        epe: pooled.report(),
        seg,
        frames: per_frame,
    })
}
