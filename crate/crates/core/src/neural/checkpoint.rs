//! Checkpoint container.
//!
//! Byte layout:
//!
//! ```text
//! magic        8 bytes  "ADMCKPT1"
//! header_len   u64 little-endian
//! header       header_len bytes of UTF-8 JSON (CheckpointHeader)
//! params       param_count × f32 little-endian
//! adam_m       param_count × f32 little-endian   (only if has_optimizer)
//! adam_v       param_count × f32 little-endian   (only if has_optimizer)
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::params::{ParamStore, TensorInfo};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ADMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    /// "edm", "rff" or "givt"
    pub kind: String,
    pub seed: u64,
    pub step: usize,
    pub diverged: bool,
    /// architecture, process constants and data scale
    pub model: serde_json::Value,
    pub tensors: Vec<TensorInfo>,
    pub param_count: usize,
    pub has_optimizer: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        model: serde_json::Value,
        store: &ParamStore,
        optimizer: Option<&AdamState>,
        seed: u64,
        step: usize,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                kind: kind.to_string(),
                seed,
                step,
                diverged: false,
                model,
                tensors: store.tensors.clone(),
                param_count: store.len(),
                has_optimizer: optimizer.is_some(),
            },
            params: store.values.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let n = self.header.param_count;
        let mut out = Vec::with_capacity(16 + header.len() + 12 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |xs: &[f64]| {
            for &x in xs {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        };
        put(&self.params);
        if let Some(opt) = &self.optimizer {
            put(&opt.m);
            put(&opt.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let n = header.param_count;
        let blocks = if header.has_optimizer { 3 } else { 1 };
        let payload = &bytes[16 + hlen..];
        if payload.len() != 4 * n * blocks {
            return Err(corrupt(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                4 * n * blocks
            )));
        }
        let covered: usize = header.tensors.iter().map(|t| t.len()).sum();
        if covered != n {
            return Err(corrupt("tensor table does not cover the parameters"));
        }
        let read = |i: usize| -> Vec<f64> {
            payload[4 * n * i..4 * n * (i + 1)]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        let params = read(0);
        let optimizer = header.has_optimizer.then(|| AdamState { m: read(1), v: read(2) });
        Ok(Self {
            header,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn store(&self) -> ParamStore {
        ParamStore {
            values: self.params.clone(),
            tensors: self.header.tensors.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::mlp::Mlp;
    use crate::neural::params::LayoutBuilder;
    use crate::numerics::Rng;

    fn sample() -> Checkpoint {
        let mut b = LayoutBuilder::new();
        Mlp::declare(&mut b, "m", &[3, 5, 2], 1.0);
        let store = b.build(&Rng::from_seed(1));
        let mut opt = AdamState::new(store.len());
        opt.m.iter_mut().enumerate().for_each(|(i, m)| *m = (i as f32 * 0.25) as f64);
        Checkpoint::new("rff", serde_json::json!({"width": 5}), &store, Some(&opt), 9, 42)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [4, 20, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut], Path::new("x")),
                Err(Error::CorruptCheckpoint { .. })
            ));
        }
    }
}
