//! Self-describing checkpoint container: a magic tag, a schema version, a
//! JSON header and the raw little-endian `f32` parameter data.

use std::path::Path;

use gridsr_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, TilingMode};
use crate::grid::GridSpec;
use super::Model;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GRIDSRCK";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tiling_mode: TilingMode,
    seed: u64,
    data_fingerprint: String,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    diverged_at: Option<usize>,
    #[serde(default)]
    grids: Option<(GridSpec, GridSpec)>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tiling_mode: TilingMode,
    pub seed: u64,
    pub data_fingerprint: String,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Epoch at which training diverged; the parameters are the last good ones.
    pub diverged_at: Option<usize>,
    /// LR and HR grids of the training data.
    pub grids: Option<(GridSpec, GridSpec)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, tiling_mode: TilingMode, seed: u64, data_fingerprint: impl Into<String>) -> Self {
        Self {
            config: model.config.clone(),
            tiling_mode,
            seed,
            data_fingerprint: data_fingerprint.into(),
            history: Vec::new(),
            best_epoch: None,
            diverged_at: None,
            grids: None,
            params: model.named_values(),
        }
    }

    /// Rebuilds the network and loads the stored values.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::build(self.config.clone(), self.seed)?;
        m.load_values(self.params.clone())?;
        Ok(m)
    }

    /// SHA-256 over parameter names, shapes and data, in store order.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            entries.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
            offset += t.len();
        }
        let header = Header {
            config: self.config.clone(),
            tiling_mode: self.tiling_mode,
            seed: self.seed,
            data_fingerprint: self.data_fingerprint.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            diverged_at: self.diverged_at,
            grids: self.grids,
            params: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let data = &bytes[20 + hlen..];
        let mut params = Vec::with_capacity(header.params.len());
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(4 * e.offset..4 * (e.offset + n))
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {}", e.name)))?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            params.push((e.name, Tensor::new(&e.shape, vals)?));
        }
        Ok(Self {
            config: header.config,
            tiling_mode: header.tiling_mode,
            seed: header.seed,
            data_fingerprint: header.data_fingerprint,
            history: header.history,
            best_epoch: header.best_epoch,
            diverged_at: header.diverged_at,
            grids: header.grids,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
