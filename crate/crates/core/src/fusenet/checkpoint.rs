//! Single-file model archive: magic, little-endian header length, JSON
//! header (config, parameter names and shapes, running-statistic widths),
//! then parameter values and running statistics as little-endian `f64`.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{BnStats, FusionConfig, FusionModel, ModelError};
use crate::nn::{ParamId, Tensor};

const MAGIC: &[u8; 8] = b"SQFCKPT\x01";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: FusionConfig,
    params: Vec<ParamEntry>,
    bn_widths: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl FusionModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = self.store();
        let header = Header {
            config: self.config().clone(),
            params: store
                .ids()
                .map(|id| ParamEntry {
                    name: store.name(id).to_string(),
                    shape: store.get(id).shape().to_vec(),
                })
                .collect(),
            bn_widths: self.bn_stats().iter().map(|s| s.mean.len()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * store.scalar_count());
        out.extend_from_slice(MAGIC);
        out.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
        out.extend_from_slice(&json);
        for id in store.ids() {
            for &v in store.get(id).data() {
                out.write_f64::<LittleEndian>(v).expect("vec write");
            }
        }
        for s in self.bn_stats() {
            for &v in s.mean.iter().chain(&s.var) {
                out.write_f64::<LittleEndian>(v).expect("vec write");
            }
        }
        out
    }

    /// Restores a model. With `expected`, the stored config must equal it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&FusionConfig>) -> Result<Self, ModelError> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
        if &magic != MAGIC {
            return Err(corrupt("not a model checkpoint"));
        }
        let len = cur.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header length"))? as usize;
        let start = cur.position() as usize;
        let json = bytes
            .get(start..start.saturating_add(len))
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
        if let Some(exp) = expected {
            if exp != &header.config {
                return Err(corrupt(format!(
                    "stored config {} does not match the requested {}",
                    header.config.label(),
                    exp.label()
                )));
            }
        }
        let mut model = FusionModel::build(header.config, 0)?;
        if header.params.len() != model.store().len() || header.bn_widths.len() != model.bn.len() {
            return Err(corrupt("parameter layout does not match the config"));
        }
        cur.set_position((start + len) as u64);
        for (i, entry) in header.params.iter().enumerate() {
            let id = ParamId(i);
            if model.store().name(id) != entry.name || model.store().get(id).shape() != entry.shape.as_slice() {
                return Err(corrupt(format!("parameter {} does not match the config", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let mut data = vec![0.0; n];
            cur.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| corrupt("truncated parameter data"))?;
            *model.store_mut().get_mut(id) = Tensor::from_vec(&entry.shape, data);
        }
        for (dst, &width) in model.bn.iter_mut().zip(&header.bn_widths) {
            if dst.mean.len() != width {
                return Err(corrupt("running statistics do not match the config"));
            }
            let mut mean = vec![0.0; width];
            let mut var = vec![0.0; width];
            cur.read_f64_into::<LittleEndian>(&mut mean)
                .and_then(|_| cur.read_f64_into::<LittleEndian>(&mut var))
                .map_err(|_| corrupt("truncated running statistics"))?;
            *dst = BnStats { mean, var };
        }
        if cur.position() as usize != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path, expected: Option<&FusionConfig>) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, expected)
    }
}
