//! `.dct` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "DCTNCKPT"
//! version     u32
//! header_len  u64
//! header      JSON {"config": ModelConfig, "metadata": Metadata}
//! count       u32
//! per tensor: name_len u32, name (UTF-8), ndim u32, dims u64 * ndim,
//!             values f64 * prod(dims)
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::ChannelStats;
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::model::{expected_shapes, DctNet};

pub const MAGIC: &[u8; 8] = b"DCTNCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to apply a model to raw data besides its weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Metadata {
    pub channel_names: Vec<String>,
    /// Train-split statistics used to standardise inputs.
    pub normalization: Option<ChannelStats>,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    /// Train/val/test proportions used when the model was trained.
    pub split_ratios: Option<[f64; 3]>,
    pub window_stride: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    metadata: Metadata,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DctNet,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.model.config.clone(),
            metadata: self.metadata.clone(),
        })
        .map_err(|e| Error::Checkpoint(format!("serialising header: {e}")))?;
        let named = self.model.params.named();
        let mut out = Vec::with_capacity(64 + header.len() + 8 * self.model.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".to_string()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {VERSION})"
            )));
        }
        let raw_len = r.u64("header length")?;
        let header_len = r.len(raw_len, "header")?;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;

        let count = r.u32("tensor count")? as usize;
        let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".to_string()))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let extent = r.u64("extent")?;
                shape.push(r.len(extent, &name)?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {name}")))?;
            let raw = r.take(numel * 8, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!(
                "{} unexpected trailing bytes",
                r.remaining()
            )));
        }

        let cfg = header.config;
        for (name, shape) in expected_shapes(&cfg) {
            match tensors.get(&name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        let expected: std::collections::HashSet<String> =
            expected_shapes(&cfg).into_iter().map(|(n, _)| n).collect();
        let mut extra: Vec<&String> = tensors.keys().filter(|k| !expected.contains(*k)).collect();
        extra.sort();
        if let Some(name) = extra.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }

        let mut params = crate::model::init_params(&cfg, 0)
            .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
        params.visit_mut(&mut |name, slot| {
            *slot = tensors.remove(&name).expect("presence checked above");
        });
        let model = DctNet::from_parts(cfg, params)?;
        Ok(Checkpoint {
            model,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks that the stored weights fit `cfg`, naming the first tensor
    /// whose shape differs.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let ours = self.model.params.named();
        for (name, shape) in expected_shapes(cfg) {
            match ours.iter().find(|(n, _)| *n == name) {
                None => return Err(Error::Checkpoint(format!("checkpoint lacks tensor {name}"))),
                Some((_, t)) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?} in the checkpoint but {shape:?} is required",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if ours.len() != expected_shapes(cfg).len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, the configuration needs {}",
                ours.len(),
                expected_shapes(cfg).len()
            )));
        }
        Ok(())
    }

    /// One line per tensor: name, shape, and a few summary statistics.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (name, t) in self.model.params.named() {
            let n = t.numel() as f64;
            let mean = t.sum() / n;
            let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            out.push_str(&format!("{name}\t{:?}\tmean={mean:.6e}\tmax_abs={max:.6e}\n", t.shape()));
        }
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// A length or extent read from the file; none can exceed the bytes left.
    fn len(&self, v: u64, what: &str) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|n| *n <= self.remaining())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what}")))
    }
}
