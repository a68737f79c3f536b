//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      16 bytes  "remission-ckpt\r\n"
//! version    u32
//! digest     u32 length + UTF-8 bytes
//! header     u32 length + JSON {model, epoch, metrics}
//! tensors    u32 count, then per tensor:
//!              u32 name length + UTF-8 name
//!              u32 rank, rank x u64 dims
//!              f32 data
//! checksum   32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::models::{self, ModelConfig, Network};
use remission_nn::{ParamId, Tensor};

pub const MAGIC: &[u8; 16] = b"remission-ckpt\r\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("version mismatch: checkpoint has {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },
}

/// Validation metrics stored with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SavedMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_digest: String,
    pub model: ModelConfig,
    /// Zero-based epoch the weights come from.
    pub epoch: usize,
    pub metrics: SavedMetrics,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    metrics: SavedMetrics,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, epoch: usize, metrics: SavedMetrics, config_digest: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_digest: config_digest.to_string(),
            model: net.config.clone(),
            epoch,
            metrics,
            tensors: net.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuild the network and load the stored weights into it.
    pub fn network(&self) -> Result<Network<f32>, CheckpointError> {
        let corrupt = |m: String| CheckpointError::CorruptCheckpoint(m);
        let mut net = models::build::<f32>(&self.model, 0).map_err(|e| corrupt(e.to_string()))?;
        if net.params.len() != self.tensors.len() {
            return Err(corrupt(format!("{} tensors stored, architecture has {}", self.tensors.len(), net.params.len())));
        }
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let id = ParamId(i);
            if net.params.name(id) != name || net.params.get(id).shape() != t.shape() {
                return Err(corrupt(format!("tensor {i} is {name} {:?}, expected {} {:?}", t.shape(), net.params.name(id), net.params.get(id).shape())));
            }
            *net.params.get_mut(id) = t.clone();
        }
        Ok(net)
    }

    /// `VersionMismatch` carrying both digests when this checkpoint was made
    /// under a different pipeline config.
    pub fn check_digest(&self, expected: &str) -> Result<(), CheckpointError> {
        if self.config_digest != expected {
            return Err(CheckpointError::VersionMismatch { found: self.config_digest.clone(), expected: expected.to_string() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        put_str(&mut out, &self.config_digest);
        let header = Header { model: self.model.clone(), epoch: self.epoch, metrics: self.metrics };
        put_str(&mut out, &serde_json::to_string(&header).expect("serializable header"));
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::CorruptCheckpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..16] != MAGIC {
            return Err(corrupt("missing magic header or file too short"));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(corrupt("checksum does not match contents"));
        }
        let mut r = Reader { buf: body, pos: 16 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: format!("format {version}"), expected: format!("format {FORMAT_VERSION}") });
        }
        let config_digest = r.string()?;
        let header: Header = serde_json::from_str(&r.string()?).map_err(|e| corrupt(&format!("header: {e}")))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(corrupt("tensor rank out of range"));
            }
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor too large"))?;
            let raw = r.take(count.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::from_vec(dims, data).map_err(|e| corrupt(&e.to_string()))?));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after tensors"));
        }
        Ok(Self { format_version: version, config_digest, model: header.model, epoch: header.epoch, metrics: header.metrics, tensors })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| CheckpointError::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::CorruptCheckpoint("invalid UTF-8".into()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Checkpoint::from_bytes(&bytes)
}
