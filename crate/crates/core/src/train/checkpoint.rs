//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DAUN" | u32 version | u64 header_len | header JSON
//! u64 tensor_count
//! per tensor: u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | f64 data[..]
//! ```
//!
//! The header holds the model config, epoch, a metrics snapshot and the Adam
//! step count. Tensors are the parameters, then the norm buffers, then (if
//! present) the Adam moments under `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::adam::{AdamHyper, AdamState};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{build_daunet, Model, ModelConfig};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"DAUN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
    adam: Option<AdamHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    t: u64,
    hyper: AdamHyper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub params: IndexMap<String, Tensor>,
    pub buffers: IndexMap<String, Tensor>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: usize, adam: Option<&AdamState>) -> Self {
        Checkpoint {
            model_config: model.config().clone(),
            epoch,
            metrics: BTreeMap::new(),
            params: model.params().clone(),
            buffers: model.buffers().clone(),
            adam: adam.cloned(),
        }
    }

    /// Copies every stored tensor into `model` after checking names and
    /// shapes; on error the model is left untouched.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        check_set(model.params(), &self.params)?;
        check_set(model.buffers(), &self.buffers)?;
        for (n, t) in &self.params {
            model.params_mut()[n] = t.clone();
        }
        for (n, t) in &self.buffers {
            model.buffers_mut()[n] = t.clone();
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored config.
    pub fn to_model(&self) -> Result<Model> {
        let mut m = build_daunet(&self.model_config, 0)?;
        self.restore_into(&mut m)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model_config.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                t: a.t,
                hyper: a.hyper,
            }),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        tensors.extend(self.params.iter().map(|(n, t)| (n.clone(), t)));
        tensors.extend(self.buffers.iter().map(|(n, t)| (n.clone(), t)));
        if let Some(a) = &self.adam {
            tensors.extend(a.m.iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
            tensors.extend(a.v.iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hlen = r.len("header length")?;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let count = r.len("tensor count")?;
        let mut all: IndexMap<String, Tensor> = IndexMap::new();
        for _ in 0..count {
            let nlen = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "tensor name")?)
                .map_err(|_| CheckpointError::BadTensor("<non-utf8 name>".into()))?
                .to_string();
            let rank = r.u32("tensor rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(CheckpointError::BadTensor(name));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.len("tensor dims")?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some())
                .ok_or_else(|| CheckpointError::BadTensor(name.clone()))?;
            let raw = r.take(numel * 8, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|_| CheckpointError::BadTensor(name.clone()))?;
            if all.insert(name.clone(), t).is_some() {
                return Err(CheckpointError::BadTensor(format!("{name} (duplicate)")));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }

        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, t) in all {
            if let Some(n) = name.strip_prefix("adam.m.") {
                m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix("adam.v.") {
                v.insert(n.to_string(), t);
            } else if name.ends_with(".running_mean") || name.ends_with(".running_var") {
                buffers.insert(name, t);
            } else {
                params.insert(name, t);
            }
        }
        let adam = match header.adam {
            Some(h) => {
                check_set(&params, &m).map_err(inner)?;
                check_set(&params, &v).map_err(inner)?;
                Some(AdamState {
                    hyper: h.hyper,
                    t: h.t,
                    m,
                    v,
                })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(CheckpointError::Header("moments without adam header".into())),
        };
        Ok(Checkpoint {
            model_config: header.model,
            epoch: header.epoch,
            metrics: header.metrics,
            params,
            buffers,
            adam,
        })
    }
}

fn inner(e: Error) -> CheckpointError {
    match e {
        Error::Checkpoint(c) => c,
        other => CheckpointError::Header(other.to_string()),
    }
}

/// `found` must hold exactly the names of `expected` with equal shapes.
fn check_set(expected: &IndexMap<String, Tensor>, found: &IndexMap<String, Tensor>) -> Result<()> {
    for (name, e) in expected {
        let f = found
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if f.dims() != e.dims() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: e.dims().to_vec(),
                found: f.dims().to_vec(),
            }
            .into());
        }
    }
    if let Some(extra) = found.keys().find(|n| !expected.contains_key(*n)) {
        return Err(CheckpointError::Unexpected(extra.clone()).into());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn len(&mut self, what: &'static str) -> std::result::Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Truncated(what))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let cfg = ModelConfig {
            base_channels: 2,
            depth: 2,
            image_size: 16,
            ..ModelConfig::desk()
        };
        build_daunet(&cfg, 3).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let m = tiny();
        let mut c = Checkpoint::from_model(&m, 4, Some(&AdamState::new(m.params(), AdamHyper::default())));
        c.metrics.insert("val_dsc".into(), 0.123456789);
        let b = c.to_bytes();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
        assert_eq!(back.to_model().unwrap(), m);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let b = Checkpoint::from_model(&tiny(), 0, None).to_bytes();
        for cut in (0..b.len()).step_by(97) {
            assert!(matches!(
                Checkpoint::from_bytes(&b[..cut]),
                Err(CheckpointError::Truncated(_))
            ));
        }
    }
}
