//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0      8 bytes   magic "FDCTCKPT"
//! 8      u32       format version
//! 12     u64       header length in bytes
//! 20     header    UTF-8 JSON: config, tensor directory, optimizer and
//!                  training metadata
//! ...    payload   f32 values, addressed by the directory in elements
//! ```
//!
//! Decoding never trusts the directory: every offset, length and shape is
//! checked against the payload before any slice is taken.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FdctError, Result};
use crate::model::config::FdctConfig;
use crate::model::network::FdctNetwork;
use crate::train::EpochRecord;

pub const MAGIC: &[u8; 8] = b"FDCTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

const MOMENT1: &str = "adamw.m/";
const MOMENT2: &str = "adamw.v/";

/// AdamW moment estimates, aligned with the parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// Where a run stopped, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Batches already consumed inside `epoch`.
    pub batch_in_epoch: usize,
    pub global_step: u64,
    pub shuffle_seed: u64,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: FdctConfig,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<OptimizerState>,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: FdctConfig,
    tensors: Vec<DirEntry>,
    optimizer: Option<OptimizerMeta>,
    training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Checkpoint {
    pub fn from_network(net: &FdctNetwork) -> Self {
        Self {
            config: net.config().clone(),
            params: net
                .params()
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.clone(),
                })
                .collect(),
            optimizer: None,
            training: None,
        }
    }

    /// Rebuilds the network, requiring exactly the parameter set its config implies.
    pub fn to_network(&self) -> Result<FdctNetwork> {
        let mut net = FdctNetwork::new(self.config.clone(), 0)?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    /// Copies parameters into `net` after checking config compatibility and
    /// that names and shapes match one-to-one.
    pub fn load_into(&self, net: &mut FdctNetwork) -> Result<()> {
        if net.config() != &self.config {
            return Err(FdctError::Checkpoint(format!(
                "config mismatch: checkpoint {:?} vs network {:?}",
                self.config,
                net.config()
            )));
        }
        let store = net.params();
        for p in store.iter() {
            let Some(saved) = self.params.iter().find(|a| a.name == p.name) else {
                return Err(FdctError::Checkpoint(format!(
                    "missing parameter {}",
                    p.name
                )));
            };
            if saved.shape != p.shape {
                return Err(FdctError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name, saved.shape, p.shape
                )));
            }
        }
        if let Some(extra) = self.params.iter().find(|a| store.id(&a.name).is_none()) {
            return Err(FdctError::Checkpoint(format!(
                "unexpected parameter {}",
                extra.name
            )));
        }
        if self.params.len() != store.len() {
            return Err(FdctError::Checkpoint("duplicate parameter names".into()));
        }
        if let Some(bad) = self
            .params
            .iter()
            .find(|a| a.data.iter().any(|v| !v.is_finite()))
        {
            return Err(FdctError::Checkpoint(format!(
                "parameter {} holds non-finite values",
                bad.name
            )));
        }
        for saved in &self.params {
            let id = net.params().id(&saved.name).expect("checked above");
            net.params_mut()
                .get_mut(id)
                .data
                .copy_from_slice(&saved.data);
        }
        if let Some(opt) = &self.optimizer {
            let sizes: Vec<usize> = net.params().iter().map(|p| p.numel()).collect();
            let ok = |moments: &[Vec<f32>]| {
                moments.len() == sizes.len()
                    && moments.iter().zip(&sizes).all(|(m, n)| m.len() == *n)
            };
            if !ok(&opt.m) || !ok(&opt.v) {
                return Err(FdctError::Checkpoint(
                    "optimizer moments do not match the parameter set".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&[f32]> = Vec::new();
        let mut offset = 0u64;
        let mut push =
            |name: String, shape: Vec<usize>, data: &[f32], tensors: &mut Vec<DirEntry>| {
                tensors.push(DirEntry {
                    name,
                    shape,
                    offset,
                });
                offset += data.len() as u64;
            };
        for p in &self.params {
            push(p.name.clone(), p.shape.clone(), &p.data, &mut tensors);
            payload.push(&p.data);
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [(MOMENT1, &opt.m), (MOMENT2, &opt.v)] {
                for (i, m) in moments.iter().enumerate() {
                    let name = self
                        .params
                        .get(i)
                        .map(|p| p.name.clone())
                        .unwrap_or_else(|| i.to_string());
                    push(format!("{prefix}{name}"), vec![m.len()], m, &mut tensors);
                    payload.push(m);
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            tensors,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            }),
            training: self.training.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = payload.iter().map(|d| d.len()).sum();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for d in payload {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| FdctError::Checkpoint(m.to_string());
        if bytes.len() < PREAMBLE {
            return Err(bad("file too short"));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(FdctError::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let rest = &bytes[PREAMBLE..];
        if header_len > rest.len() as u64 {
            return Err(bad("header length exceeds file size"));
        }
        let (header_bytes, payload) = rest.split_at(header_len as usize);
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| FdctError::Checkpoint(format!("malformed header: {e}")))?;
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let n_values = (payload.len() / 4) as u64;

        let read = |entry: &DirEntry| -> Result<Vec<f32>> {
            let len = entry
                .shape
                .iter()
                .try_fold(1u64, |acc, d| acc.checked_mul(*d as u64))
                .ok_or_else(|| bad("tensor shape overflows"))?;
            let end = entry
                .offset
                .checked_add(len)
                .ok_or_else(|| bad("tensor extent overflows"))?;
            if end > n_values {
                return Err(FdctError::Checkpoint(format!(
                    "tensor {} extends past the payload",
                    entry.name
                )));
            }
            let start = entry.offset as usize * 4;
            Ok(payload[start..end as usize * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect())
        };

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for entry in &header.tensors {
            let data = read(entry)?;
            if entry.name.starts_with(MOMENT1) {
                m.push(data);
            } else if entry.name.starts_with(MOMENT2) {
                v.push(data);
            } else {
                params.push(NamedArray {
                    name: entry.name.clone(),
                    shape: entry.shape.clone(),
                    data,
                });
            }
        }
        let optimizer = match header.optimizer {
            Some(meta) => Some(OptimizerState {
                step: meta.step,
                beta1: meta.beta1,
                beta2: meta.beta2,
                eps: meta.eps,
                weight_decay: meta.weight_decay,
                m,
                v,
            }),
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(bad("optimizer moments without optimizer metadata")),
        };
        Ok(Self {
            config: header.config,
            params,
            optimizer,
            training: header.training,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| FdctError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| FdctError::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FdctConfig {
        FdctConfig {
            channels: 4,
            osa_layers: 1,
            osa_stage_channels: 2,
            ..FdctConfig::full()
        }
    }

    #[test]
    fn roundtrip_restores_identical_network() {
        let net = FdctNetwork::new(small(), 42).unwrap();
        let mut ck = Checkpoint::from_network(&net);
        ck.optimizer = Some(OptimizerState {
            step: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: net.params().iter().map(|p| vec![0.5; p.numel()]).collect(),
            v: net.params().iter().map(|p| vec![0.25; p.numel()]).collect(),
        });
        ck.training = Some(TrainingState {
            epoch: 2,
            batch_in_epoch: 1,
            global_step: 7,
            shuffle_seed: 9,
            history: Vec::new(),
        });
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_network().unwrap();
        assert_eq!(restored.params(), net.params());
    }

    #[test]
    fn rejects_incompatible_or_incomplete_checkpoints() {
        let net = FdctNetwork::new(small(), 1).unwrap();
        let ck = Checkpoint::from_network(&net);

        let mut other = FdctNetwork::new(
            FdctConfig {
                use_fusion_branch: false,
                ..small()
            },
            1,
        )
        .unwrap();
        assert!(matches!(
            ck.load_into(&mut other),
            Err(FdctError::Checkpoint(_))
        ));

        let mut missing = ck.clone();
        missing.params.pop();
        let err = missing.to_network().unwrap_err().to_string();
        assert!(err.contains("missing parameter"), "{err}");

        let mut extra = ck.clone();
        extra.params.push(NamedArray {
            name: "bogus".into(),
            shape: vec![1],
            data: vec![0.0],
        });
        assert!(extra
            .to_network()
            .unwrap_err()
            .to_string()
            .contains("unexpected"));

        let mut reshaped = ck;
        reshaped.params[0].shape = vec![reshaped.params[0].data.len()];
        assert!(reshaped.to_network().is_err());
    }

    #[test]
    fn rejects_corrupt_bytes() {
        let net = FdctNetwork::new(small(), 1).unwrap();
        let bytes = Checkpoint::from_network(&net).encode();
        assert!(Checkpoint::decode(&bytes[..10]).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 4]).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Checkpoint::decode(&wrong_version)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let mut huge_header = bytes.clone();
        huge_header[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&huge_header).is_err());
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(Checkpoint::decode(&bad_magic).is_err());
    }
}
