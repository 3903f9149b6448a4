//! Model checkpoints.
//!
//! ```text
//! "GRVC" | header length (u64 LE) | JSON header | f64 LE tensors
//! ```
//!
//! The header holds the format version, the training configuration, per-GP
//! kernel metadata and a tensor directory (`name`, `offset` in bytes from the
//! start of the tensor block, `shape`, `dtype`). Tensors are stored in
//! directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GroveError, Result};
use crate::gplvm::{GroveModel, LatentState, TrainConfig};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::numerics::Matrix;
use crate::svgp::{SparseGp, VariationalCov, VariationalMode};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GRVC";
pub const CHECKPOINT_VERSION: u32 = 1;

const GP_TENSORS: [&str; 6] = [
    "inducing",
    "var_mean",
    "var_chol",
    "log_lengthscale",
    "log_noise",
    "mean_const",
];

/// Every tensor a checkpoint must contain, in storage order.
pub fn tensor_names() -> Vec<String> {
    let mut names = vec!["latent_x".to_string()];
    for prefix in ["img", "txt"] {
        names.extend(GP_TENSORS.iter().map(|t| format!("{prefix}_{t}")));
    }
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<u64>,
    pub dtype: String,
}

impl TensorEntry {
    fn len(&self) -> Option<u64> {
        self.shape.iter().try_fold(1u64, |a, b| a.checked_mul(*b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpMeta {
    pub kernel: KernelFamily,
    pub log_output_scale: f64,
    pub variational_mode: VariationalMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: TrainConfig,
    pub image: GpMeta,
    pub text: GpMeta,
    pub tensors: Vec<TensorEntry>,
}

fn gp_tensors(gp: &SparseGp) -> Vec<(Vec<u64>, Vec<f64>)> {
    let (m, q) = gp.inducing.shape();
    let d = gp.out_dims();
    let chol = match &gp.var_cov {
        VariationalCov::Full(ls) => (
            vec![d as u64, m as u64, m as u64],
            ls.iter().flat_map(|l| l.as_slice().iter().copied()).collect(),
        ),
        VariationalCov::Diagonal(diag) => (vec![d as u64, m as u64], diag.as_slice().to_vec()),
    };
    vec![
        (vec![m as u64, q as u64], gp.inducing.as_slice().to_vec()),
        (vec![m as u64, d as u64], gp.var_mean.as_slice().to_vec()),
        chol,
        (vec![1], vec![gp.kernel.log_lengthscale]),
        (vec![1], vec![gp.log_noise]),
        (vec![1], vec![gp.mean]),
    ]
}

fn gp_meta(gp: &SparseGp) -> GpMeta {
    GpMeta {
        kernel: gp.kernel.family,
        log_output_scale: gp.kernel.log_output_scale,
        variational_mode: gp.mode(),
    }
}

/// Serializes `model` to the checkpoint byte layout.
pub fn encode_checkpoint(model: &GroveModel) -> Vec<u8> {
    let x = &model.latent.x;
    let mut tensors = vec![(vec![x.rows() as u64, x.cols() as u64], x.as_slice().to_vec())];
    tensors.extend(gp_tensors(&model.gp_image));
    tensors.extend(gp_tensors(&model.gp_text));

    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, (shape, data)) in tensor_names().into_iter().zip(&tensors) {
        entries.push(TensorEntry {
            name,
            offset,
            shape: shape.clone(),
            dtype: "f64".into(),
        });
        offset += 8 * data.len() as u64;
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        image: gp_meta(&model.gp_image),
        text: gp_meta(&model.gp_text),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &GroveModel, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| GroveError::io(path, e))
}

struct Payload<'a> {
    path: &'a Path,
    header: &'a CheckpointHeader,
    bytes: &'a [u8],
}

impl Payload<'_> {
    fn bad(&self, reason: String) -> GroveError {
        GroveError::BadHeader {
            path: self.path.to_path_buf(),
            reason,
        }
    }

    fn tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let e = self
            .header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| self.bad(format!("tensor directory has no {name}")))?;
        let start = e.offset as usize;
        let len = e.len().ok_or_else(|| self.bad(format!("{name}: shape overflows")))? as usize;
        let data = self.bytes[start..start + 8 * len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((e.shape.iter().map(|s| *s as usize).collect(), data))
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let (shape, data) = self.tensor(name)?;
        if shape.len() != 2 {
            return Err(GroveError::ShapeMismatch(format!("{name}: expected 2-d tensor, got shape {shape:?}")));
        }
        Matrix::from_vec(shape[0], shape[1], data)
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        let (shape, data) = self.tensor(name)?;
        if data.len() != 1 {
            return Err(GroveError::ShapeMismatch(format!("{name}: expected a scalar, got shape {shape:?}")));
        }
        Ok(data[0])
    }

    fn gp(&self, prefix: &str, meta: &GpMeta) -> Result<SparseGp> {
        let inducing = self.matrix(&format!("{prefix}_inducing"))?;
        let var_mean = self.matrix(&format!("{prefix}_var_mean"))?;
        let (shape, data) = self.tensor(&format!("{prefix}_var_chol"))?;
        let var_cov = match (meta.variational_mode, shape.as_slice()) {
            (VariationalMode::Full, &[d, m, m2]) if m == m2 => VariationalCov::Full(
                (0..d)
                    .map(|k| Matrix::from_vec(m, m, data[k * m * m..(k + 1) * m * m].to_vec()))
                    .collect::<Result<_>>()?,
            ),
            (VariationalMode::Diagonal, &[d, m]) => VariationalCov::Diagonal(Matrix::from_vec(d, m, data)?),
            (mode, s) => {
                return Err(GroveError::ShapeMismatch(format!(
                    "{prefix}_var_chol: shape {s:?} does not fit {mode} covariance"
                )))
            }
        };
        let kernel = KernelSpec {
            family: meta.kernel,
            log_lengthscale: self.scalar(&format!("{prefix}_log_lengthscale"))?,
            log_output_scale: meta.log_output_scale,
        };
        let gp = SparseGp {
            kernel,
            mean: self.scalar(&format!("{prefix}_mean_const"))?,
            log_noise: self.scalar(&format!("{prefix}_log_noise"))?,
            inducing,
            var_mean,
            var_cov,
        };
        gp.validate()?;
        Ok(gp)
    }
}

/// Parses a checkpoint image; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<GroveModel> {
    let path_s = || path.to_path_buf();
    let truncated = |expected: u64| GroveError::TruncatedPayload {
        path: path_s(),
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(GroveError::BadMagic {
            path: path_s(),
            found: magic,
        });
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let payload_start = 12u64
        .checked_add(header_len)
        .ok_or_else(|| truncated(u64::MAX))?;
    if (bytes.len() as u64) < payload_start {
        return Err(truncated(payload_start));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..payload_start as usize]).map_err(|e| GroveError::BadHeader {
            path: path_s(),
            reason: e.to_string(),
        })?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(GroveError::BadVersion {
            path: path_s(),
            found: header.format_version.min(u16::MAX as u32) as u16,
        });
    }
    let payload = &bytes[payload_start as usize..];
    let mut end = 0u64;
    for e in &header.tensors {
        if e.dtype != "f64" {
            return Err(GroveError::BadHeader {
                path: path_s(),
                reason: format!("{}: dtype {:?}, expected f64", e.name, e.dtype),
            });
        }
        let stop = e
            .len()
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(e.offset))
            .ok_or_else(|| GroveError::BadHeader {
                path: path_s(),
                reason: format!("{}: byte range overflows", e.name),
            })?;
        end = end.max(stop);
    }
    if (payload.len() as u64) < end {
        return Err(truncated(payload_start + end));
    }
    let p = Payload {
        path,
        header: &header,
        bytes: payload,
    };
    for name in tensor_names() {
        p.tensor(&name)?;
    }
    let x = p.matrix("latent_x")?;
    let gp_image = p.gp("img", &header.image)?;
    let gp_text = p.gp("txt", &header.text)?;
    GroveModel::new(LatentState { x }, gp_image, gp_text, header.config.clone())
}

pub fn load_checkpoint(path: &Path) -> Result<GroveModel> {
    let bytes = fs::read(path).map_err(|e| GroveError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
