//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "BAICKPT1"
//! version     u32
//! header_len  u32
//! header      JSON: run configuration, counters, tensor names and shapes
//! params      f32 × Σ|shape|, tensors in header order
//! adam m      same layout
//! adam v      same layout
//! digest      SHA-256 of every preceding byte
//! ```
//!
//! Training runs in `f32`, so storing `f32` is lossless and a restored run
//! continues bit-for-bit. Iteration and epoch counters are all the RNG state
//! there is: every random stream is derived from the seed and those counters.

use std::fs;
use std::path::Path;

use bai_core::nn::ParamStore;
use bai_core::train::{Adam, Trainer};
use bai_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"BAICKPT1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    iteration: u64,
    epoch: u64,
    iters_per_epoch: Option<usize>,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub epoch: u64,
    pub iters_per_epoch: Option<usize>,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
}

fn corrupt(msg: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("invalid checkpoint: {msg}"))
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, t: &Trainer<f32>) -> Self {
        Checkpoint {
            config: config.clone(),
            iteration: t.iteration,
            epoch: t.epoch,
            iters_per_epoch: t.iters_per_epoch,
            params: t.params.clone(),
            adam: t.adam.clone(),
        }
    }

    /// Rebuilds the trainer this checkpoint was taken from.
    pub fn into_trainer(self) -> CliResult<Trainer<f32>> {
        let resolved = self.config.resolve()?;
        if resolved.train.adam != self.adam.config {
            return Err(corrupt("optimizer settings disagree with the stored configuration"));
        }
        Ok(Trainer::restore(
            resolved.train,
            self.params,
            self.adam,
            self.iteration,
            self.epoch,
            self.iters_per_epoch,
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.to_toml_string(),
            iteration: self.iteration,
            epoch: self.epoch,
            iters_per_epoch: self.iters_per_epoch,
            adam_step: self.adam.step,
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 12 * self.params.num_elements() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for store in [&self.params, &self.adam.m, &self.adam.v] {
            for (_, t) in store.iter() {
                for x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        if bytes.len() < 16 + DIGEST_LEN {
            return Err(corrupt("file is truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version} (expected {VERSION})")));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e + DIGEST_LEN <= bytes.len())
            .ok_or_else(|| corrupt("file is truncated"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body_start]).map_err(|e| corrupt(format!("header: {e}")))?;
        let elements: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let expected = body_start + 3 * 4 * elements + DIGEST_LEN;
        if bytes.len() != expected {
            return Err(corrupt(format!(
                "expected {expected} bytes, found {} (file is truncated or padded)",
                bytes.len()
            )));
        }
        let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(content).as_slice() != digest {
            return Err(corrupt("digest mismatch"));
        }
        let config = RunConfig::from_toml_str(&header.config)?;
        let mut floats = content[body_start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut read_store = || -> CliResult<ParamStore<f32>> {
            let mut store = ParamStore::new();
            for entry in &header.tensors {
                let n = entry.shape.iter().product();
                let data: Vec<f32> = floats.by_ref().take(n).collect();
                store
                    .insert(&entry.name, Tensor::new(&entry.shape, data)?)
                    .map_err(|e| corrupt(format!("tensor {}: {e}", entry.name)))?;
            }
            Ok(store)
        };
        let params = read_store()?;
        let m = read_store()?;
        let v = read_store()?;
        let adam_config = config.resolve()?.train.adam;
        Ok(Checkpoint {
            config,
            iteration: header.iteration,
            epoch: header.epoch,
            iters_per_epoch: header.iters_per_epoch,
            params,
            adam: Adam {
                config: adam_config,
                m,
                v,
                step: header.adam_step,
            },
        })
    }

    /// Writes through a temporary file, so an interrupted save never leaves
    /// a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
