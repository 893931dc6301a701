//! Checkpoint container.
//!
//! ```text
//! "COVRCKPT" | u32 version | u64 header_len | header (JSON) | f32 LE tensor data
//! ```
//!
//! The header records the component tag, its configuration, the training
//! step and seed, and an index of `(name, shape)` entries in storage order.
//! Optimizer moments, when present, follow the parameters in the same order
//! (first moments, then second moments).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CovarError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::toyworld::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"COVRCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Covar,
    Refiner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    component: Component,
    config: serde_json::Value,
    train: Option<serde_json::Value>,
    step: u64,
    seed: u64,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Adam moment estimates, indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub component: Component,
    pub config: serde_json::Value,
    pub train: Option<serde_json::Value>,
    pub step: u64,
    pub seed: u64,
    pub params: ParamStore<f32>,
    pub moments: Option<Moments>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: Vec<TensorEntry> = self
            .params
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        let header = Header {
            component: self.component,
            config: self.config.clone(),
            train: self.train.clone(),
            step: self.step,
            seed: self.seed,
            optimizer_step: self.moments.as_ref().map(|m| m.step),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |t: &Tensor<f32>| {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, p) in self.params.iter() {
            put(&p.value);
        }
        if let Some(m) = &self.moments {
            m.m.iter().chain(&m.v).for_each(&mut put);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    /// Parses a container. `template` supplies the expected parameter names
    /// and shapes; any missing, extra or misshaped tensor is an error.
    pub fn from_bytes(bytes: &[u8], template: &ParamStore<f32>) -> Result<Self> {
        let header = read_header(bytes)?;
        let (header, mut off) = header;
        let expected: Vec<TensorEntry> = template
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        if header.tensors.len() != expected.len() {
            return Err(CovarError::Checkpoint(format!(
                "checkpoint holds {} tensors, configuration expects {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for (got, want) in header.tensors.iter().zip(&expected) {
            if got != want {
                return Err(CovarError::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let end = off + 4 * n;
            let raw = bytes
                .get(off..end)
                .ok_or_else(|| CovarError::Checkpoint("truncated tensor data".into()))?;
            off = end;
            Tensor::new(
                shape.to_vec(),
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        };
        let mut params = template.clone();
        for e in &header.tensors {
            let t = take(&e.shape)?;
            params.set(&e.name, t)?;
        }
        let moments = match header.optimizer_step {
            Some(step) => {
                let m = header.tensors.iter().map(|e| take(&e.shape)).collect::<Result<_>>()?;
                let v = header.tensors.iter().map(|e| take(&e.shape)).collect::<Result<_>>()?;
                Some(Moments { step, m, v })
            }
            None => None,
        };
        if off != bytes.len() {
            return Err(CovarError::Checkpoint(format!(
                "{} trailing bytes after tensor data",
                bytes.len() - off
            )));
        }
        Ok(Self {
            component: header.component,
            config: header.config,
            train: header.train,
            step: header.step,
            seed: header.seed,
            params,
            moments,
        })
    }
}

fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CovarError::Checkpoint("missing COVRCKPT magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CovarError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let end = 20 + len;
    let raw = bytes
        .get(20..end)
        .ok_or_else(|| CovarError::Checkpoint("truncated header".into()))?;
    Ok((serde_json::from_slice(raw)?, end))
}

/// Component tag and configuration, without reading tensor data.
pub fn peek(path: &Path) -> Result<(Component, serde_json::Value)> {
    let (h, _) = read_header(&fs::read(path)?)?;
    Ok((h.component, h.config))
}

/// The training configuration recorded in the header, if any.
pub fn peek_train(path: &Path) -> Result<Option<serde_json::Value>> {
    let (h, _) = read_header(&fs::read(path)?)?;
    Ok(h.train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CovarModel, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (ModelConfig, ParamStore<f32>) {
        let cfg = ModelConfig {
            hidden_dim: 16,
            block_pairs: 1,
            frames: 4,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let p = CovarModel::new(cfg.clone())
            .unwrap()
            .init_params(&mut ChaCha8Rng::seed_from_u64(1));
        (cfg, p)
    }

    #[test]
    fn round_trip_with_moments() {
        let (cfg, mut p) = model();
        p.randomize(0.1, &mut ChaCha8Rng::seed_from_u64(2));
        let moments = Moments {
            step: 7,
            m: p.iter().map(|(_, q)| q.value.map(|x| x * 2.0)).collect(),
            v: p.iter().map(|(_, q)| q.value.map(|x| x * x)).collect(),
        };
        let ck = Checkpoint {
            component: Component::Covar,
            config: serde_json::to_value(&cfg).unwrap(),
            train: None,
            step: 7,
            seed: 3,
            params: p.clone(),
            moments: Some(moments.clone()),
        };
        let bytes = ck.to_bytes().unwrap();
        let (_, template) = model();
        let back = Checkpoint::from_bytes(&bytes, &template).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.moments.unwrap(), moments);
        for ((_, a), (_, b)) in back.params.iter().zip(p.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let (cfg, p) = model();
        let ck = Checkpoint {
            component: Component::Covar,
            config: serde_json::to_value(&cfg).unwrap(),
            train: None,
            step: 0,
            seed: 0,
            params: p,
            moments: None,
        };
        let bytes = ck.to_bytes().unwrap();
        let other = CovarModel::new(ModelConfig {
            block_pairs: 2,
            ..cfg
        })
        .unwrap()
        .init_params(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(Checkpoint::from_bytes(&bytes, &other).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], &model().1).is_err());
    }
}
