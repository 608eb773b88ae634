//! SFCK checkpoints: named little-endian f64 tensors.
//!
//! Layout: `"SFCK"`, u32 version, u32 tensor count, then per tensor a u32 name
//! length, the UTF-8 name, u32 rank, `rank` u32 dims and the f64 data. The
//! first tensor, `meta`, holds the model hyperparameters.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

use super::{ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("unexpected tensor {found}, wanted {expected}")]
    UnexpectedTensor { expected: String, found: String },
    #[error("tensor {name} has shape {got:?}, wanted {expected:?}")]
    BadShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("invalid hyperparameters in meta tensor")]
    BadMeta,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Array2<f64>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn meta_tensor(cfg: &ModelConfig) -> Array2<f64> {
    Array2::from_shape_vec(
        (1, 5),
        vec![
            cfg.hidden as f64,
            cfg.iterations as f64,
            cfg.channels as f64,
            cfg.voxel_size,
            cfg.input_scale,
        ],
    )
    .expect("static shape")
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32 + 1).to_le_bytes());
    push_tensor(&mut out, "meta", &meta_tensor(&params.config));
    for (name, t) in tensors {
        push_tensor(&mut out, &name, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), CheckpointError> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_owned();
        let rank = self.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(self.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = self.take(
            count
                .checked_mul(8)
                .ok_or(CheckpointError::Truncated(self.pos))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, dims, data))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let _count = r.u32()?;
    let (name, dims, meta) = r.tensor()?;
    if name != "meta" {
        return Err(CheckpointError::UnexpectedTensor {
            expected: "meta".into(),
            found: name,
        });
    }
    if dims != [1, 5] || meta[..3].iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
        return Err(CheckpointError::BadMeta);
    }
    let config = ModelConfig {
        hidden: meta[0] as usize,
        iterations: meta[1] as usize,
        channels: meta[2] as usize,
        voxel_size: meta[3],
        input_scale: meta[4],
    };
    if config.hidden == 0 || config.channels < 2 || !(config.voxel_size > 0.0) {
        return Err(CheckpointError::BadMeta);
    }
    let mut params = ModelParams::zeros(config);
    for (expected, slot) in params.tensors_mut() {
        let (name, dims, data) = r.tensor()?;
        if name != expected {
            return Err(CheckpointError::UnexpectedTensor {
                expected,
                found: name,
            });
        }
        let want = vec![slot.nrows(), slot.ncols()];
        if dims != want {
            return Err(CheckpointError::BadShape {
                name,
                got: dims,
                expected: want,
            });
        }
        *slot = Array2::from_shape_vec((want[0], want[1]), data).expect("checked shape");
    }
    Ok(params)
}

pub fn save_checkpoint(
    params: &ModelParams,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(params)).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, CheckpointError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
