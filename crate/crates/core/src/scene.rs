//! Frames, flow fields, mask logits and the SFPC point-cloud file format.
//!
//! SFPC layout (little-endian):
//!
//! ```text
//! "SFPC" | u32 version (=1) | u32 N | u8 flags
//! N x 3 f32 xyz
//! [N x u32 labels]      if flags & 0b01
//! [N x 3 f32 flow]      if flags & 0b10
//! ```
//!
//! Files ending in `.csv` are read as `x,y,z[,label]` rows instead.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array2;
use thiserror::Error;

pub type Point = Vector3<f64>;

pub const SFPC_MAGIC: &[u8; 4] = b"SFPC";
pub const SFPC_VERSION: u32 = 1;
pub const FLAG_LABELS: u8 = 0b01;
pub const FLAG_FLOW: u8 = 0b10;
const HEADER_LEN: usize = 4 + 4 + 4 + 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("bad magic bytes at offset 0")]
    BadMagic,
    #[error("unsupported version {version} at offset 4")]
    UnsupportedVersion { version: u32 },
    #[error("file truncated: needed {needed} bytes at offset {offset}, have {available}")]
    TruncatedFile {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("non-finite coordinate at byte offset {offset}")]
    NonFiniteCoordinate { offset: usize },
    #[error("malformed csv row {row}: {reason}")]
    BadCsv { row: usize, reason: String },
    #[error("cloud must contain at least one point")]
    EmptyCloud,
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("consecutive frames expected, got {source_index} -> {target_index}")]
    NonConsecutive {
        source_index: i64,
        target_index: i64,
    },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One LiDAR sweep in its sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    pub frame_index: i64,
    gt_labels: Option<Vec<u32>>,
    gt_flow: Option<Vec<Point>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_index: i64) -> Result<Self, SceneError> {
        if points.is_empty() {
            return Err(SceneError::EmptyCloud);
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(SceneError::NonFiniteCoordinate { offset: i * 3 });
            }
        }
        Ok(Self {
            points,
            frame_index,
            gt_labels: None,
            gt_flow: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self, SceneError> {
        if labels.len() != self.len() {
            return Err(SceneError::LengthMismatch {
                what: "gt_labels",
                got: labels.len(),
                expected: self.len(),
            });
        }
        self.gt_labels = Some(labels);
        Ok(self)
    }

    pub fn with_flow(mut self, flow: Vec<Point>) -> Result<Self, SceneError> {
        if flow.len() != self.len() {
            return Err(SceneError::LengthMismatch {
                what: "gt_flow",
                got: flow.len(),
                expected: self.len(),
            });
        }
        if flow.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(SceneError::NonFiniteCoordinate { offset: 0 });
        }
        self.gt_flow = Some(flow);
        Ok(self)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn gt_labels(&self) -> Option<&[u32]> {
        self.gt_labels.as_deref()
    }

    pub fn gt_flow(&self) -> Option<&[Point]> {
        self.gt_flow.as_deref()
    }

    /// Copy of the cloud restricted to `indices`, carrying ground truth along.
    pub fn select(&self, indices: &[usize]) -> Option<Self> {
        if indices.is_empty() {
            return None;
        }
        Some(Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            frame_index: self.frame_index,
            gt_labels: self
                .gt_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            gt_flow: self
                .gt_flow
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i]).collect()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Ego,
    Residual,
    Total,
}

/// Per-point motion in meters per frame interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vectors: Vec<Point>,
    pub kind: FlowKind,
}

impl FlowField {
    pub fn new(vectors: Vec<Point>, kind: FlowKind) -> Self {
        Self { vectors, kind }
    }

    pub fn zeros(n: usize, kind: FlowKind) -> Self {
        Self::new(vec![Point::zeros(); n], kind)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `ego + residual`, evaluated element-wise in that order.
    pub fn compose(ego: &FlowField, residual: &FlowField) -> Result<FlowField, SceneError> {
        if ego.len() != residual.len() {
            return Err(SceneError::LengthMismatch {
                what: "residual flow",
                got: residual.len(),
                expected: ego.len(),
            });
        }
        let vectors = ego
            .vectors
            .iter()
            .zip(&residual.vectors)
            .map(|(e, r)| e + r)
            .collect();
        Ok(FlowField::new(vectors, FlowKind::Total))
    }

    pub fn to_array(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), 3));
        for (i, v) in self.vectors.iter().enumerate() {
            for k in 0..3 {
                out[[i, k]] = v[k];
            }
        }
        out
    }

    pub fn from_array(arr: &Array2<f64>, kind: FlowKind) -> Self {
        let vectors = arr
            .rows()
            .into_iter()
            .map(|r| Point::new(r[0], r[1], r[2]))
            .collect();
        Self::new(vectors, kind)
    }
}

/// N x C raw class scores. Channel 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    pub logits: Array2<f64>,
}

impl MaskLogits {
    pub fn new(logits: Array2<f64>) -> Result<Self, SceneError> {
        if logits.ncols() < 2 {
            return Err(SceneError::LengthMismatch {
                what: "logit channels",
                got: logits.ncols(),
                expected: 2,
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(SceneError::NonFiniteCoordinate { offset: 0 });
        }
        Ok(Self { logits })
    }

    pub fn rows(&self) -> usize {
        self.logits.nrows()
    }

    pub fn channels(&self) -> usize {
        self.logits.ncols()
    }

    /// Argmax per row; ties go to the lower channel.
    pub fn argmax_labels(&self) -> Vec<u32> {
        self.logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Rigid transform hint used to pre-align the source frame.
pub use crate::rigid::RigidTransform;

#[derive(Debug, Clone)]
pub struct FramePair {
    pub source: PointCloud,
    pub target: PointCloud,
    pub ego_pose_hint: Option<RigidTransform>,
}

impl FramePair {
    pub fn new(source: PointCloud, target: PointCloud) -> Result<Self, SceneError> {
        if source.frame_index + 1 != target.frame_index {
            return Err(SceneError::NonConsecutive {
                source_index: source.frame_index,
                target_index: target.frame_index,
            });
        }
        Ok(Self {
            source,
            target,
            ego_pose_hint: None,
        })
    }

    pub fn with_hint(mut self, hint: RigidTransform) -> Self {
        self.ego_pose_hint = Some(hint);
        self
    }
}

pub fn encode_frame(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let mut flags = 0u8;
    if cloud.gt_labels.is_some() {
        flags |= FLAG_LABELS;
    }
    if cloud.gt_flow.is_some() {
        flags |= FLAG_FLOW;
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + n * 12 * 2 + n * 4);
    buf.extend_from_slice(SFPC_MAGIC);
    buf.extend_from_slice(&SFPC_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.push(flags);
    let push_vec = |buf: &mut Vec<u8>, v: &Point| {
        for c in v.iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    };
    for p in &cloud.points {
        push_vec(&mut buf, p);
    }
    if let Some(labels) = &cloud.gt_labels {
        for l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    if let Some(flow) = &cloud.gt_flow {
        for v in flow {
            push_vec(&mut buf, v);
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], SceneError> {
        let available = self.bytes.len() - self.offset;
        if available < len {
            return Err(SceneError::TruncatedFile {
                offset: self.offset,
                needed: len,
                available,
            });
        }
        let s = &self.bytes[self.offset..self.offset + len];
        self.offset += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, SceneError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn vec3(&mut self) -> Result<Point, SceneError> {
        let mut v = Point::zeros();
        for k in 0..3 {
            let at = self.offset;
            let c = f32::from_le_bytes(self.take(4)?.try_into().unwrap());
            if !c.is_finite() {
                return Err(SceneError::NonFiniteCoordinate { offset: at });
            }
            v[k] = c as f64;
        }
        Ok(v)
    }
}

/// Decodes an SFPC byte buffer. The frame index is not stored in the file.
pub fn decode_frame(bytes: &[u8], frame_index: i64) -> Result<PointCloud, SceneError> {
    if bytes.len() < 4 {
        return Err(SceneError::TruncatedFile {
            offset: 0,
            needed: 4,
            available: bytes.len(),
        });
    }
    if &bytes[..4] != SFPC_MAGIC {
        return Err(SceneError::BadMagic);
    }
    let mut r = Reader { bytes, offset: 4 };
    let version = r.u32()?;
    if version != SFPC_VERSION {
        return Err(SceneError::UnsupportedVersion { version });
    }
    let n = r.u32()? as usize;
    let flags = r.take(1)?[0];
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push(r.vec3()?);
    }
    let labels = if flags & FLAG_LABELS != 0 {
        let mut l = Vec::with_capacity(n);
        for _ in 0..n {
            l.push(r.u32()?);
        }
        Some(l)
    } else {
        None
    };
    let flow = if flags & FLAG_FLOW != 0 {
        let mut f = Vec::with_capacity(n);
        for _ in 0..n {
            f.push(r.vec3()?);
        }
        Some(f)
    } else {
        None
    };
    let mut cloud = PointCloud::new(points, frame_index)?;
    cloud.gt_labels = labels;
    cloud.gt_flow = flow;
    Ok(cloud)
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

/// Reads an SFPC file, or a `x,y,z[,label]` CSV when the extension is `.csv`.
///
/// The frame index is parsed from a trailing integer in the file stem
/// (`frame_000012.sfpc` -> 12), defaulting to 0.
pub fn read_frame(path: impl AsRef<Path>) -> Result<PointCloud, SceneError> {
    let path = path.as_ref();
    let frame_index = frame_index_from_path(path);
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        return read_csv_frame(path, frame_index);
    }
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_frame(&bytes, frame_index)
}

pub fn write_frame(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    fs::write(path, encode_frame(cloud)).map_err(|e| io_err(path, e))
}

fn frame_index_from_path(path: &Path) -> i64 {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().unwrap_or(0)
}

fn read_csv_frame(path: &Path, frame_index: i64) -> Result<PointCloud, SceneError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| SceneError::BadCsv {
            row: 0,
            reason: e.to_string(),
        })?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut any_label = false;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| SceneError::BadCsv {
            row,
            reason: e.to_string(),
        })?;
        if rec.len() != 3 && rec.len() != 4 {
            return Err(SceneError::BadCsv {
                row,
                reason: format!("expected 3 or 4 fields, got {}", rec.len()),
            });
        }
        let parse = |k: usize| -> Result<f64, SceneError> {
            rec[k].parse::<f64>().map_err(|e| SceneError::BadCsv {
                row,
                reason: e.to_string(),
            })
        };
        let p = Point::new(parse(0)?, parse(1)?, parse(2)?);
        if !p.iter().all(|c| c.is_finite()) {
            return Err(SceneError::NonFiniteCoordinate { offset: row });
        }
        points.push(p);
        if rec.len() == 4 {
            any_label = true;
            labels.push(rec[3].parse::<u32>().map_err(|e| SceneError::BadCsv {
                row,
                reason: e.to_string(),
            })?);
        } else {
            labels.push(0);
        }
    }
    let cloud = PointCloud::new(points, frame_index)?;
    if any_label {
        cloud.with_labels(labels)
    } else {
        Ok(cloud)
    }
}

/// Keeps points with `|x| <= half_extent` and `|y| <= half_extent`.
///
/// Returns `None` for the cloud when nothing survives; the index map is
/// always returned and sends kept positions to original indices.
pub fn crop_to_eval_region(
    cloud: &PointCloud,
    half_extent: f64,
) -> (Option<PointCloud>, Vec<usize>) {
    assert!(half_extent > 0.0, "half_extent must be positive");
    let kept: Vec<usize> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.x.abs() <= half_extent && p.y.abs() <= half_extent)
        .map(|(i, _)| i)
        .collect();
    (cloud.select(&kept), kept)
}
