//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! | field          | encoding                                    |
//! |----------------|---------------------------------------------|
//! | magic          | `b"GATEFUSE"`                               |
//! | version        | `u32`                                       |
//! | config length  | `u64`, then that many bytes of JSON         |
//! | config digest  | 32-byte SHA-256 of the JSON bytes           |
//! | seed           | `u64`                                       |
//! | tensor count   | `u32`                                       |
//! | each tensor    | name (`u32` length + UTF-8), rows `u64`, cols `u64`, `rows * cols` `f64` values |
//!
//! Parameters are stored as IEEE-754 bit patterns, so a round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use gatefuse::model::{AblationConfig, ModelDims, ModelParams};
use gatefuse::params::ParamStore;
use gatefuse::training::TrainConfig;
use gatefuse::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"GATEFUSE";
pub const VERSION: u32 = 1;

/// Architecture and the training configuration that produced the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub dims: ModelDims,
    pub ablation: AblationConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub seed: u64,
    pub model: ModelParams<f64>,
}

impl Checkpoint {
    pub fn new(model: ModelParams<f64>, train: TrainConfig) -> Self {
        Self {
            config: CheckpointConfig {
                dims: model.dims,
                ablation: model.ablation,
                train: train.clone(),
            },
            seed: train.seed,
            model,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let json = serde_json::to_vec(&self.config).map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(Sha256::digest(&json).as_slice())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let store = &self.model.store;
        w.write_all(&(store.len() as u32).to_le_bytes())?;
        for (name, t) in store.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Parses a checkpoint; `Err` carries a human-readable reason.
    pub fn read_from(mut r: impl Read) -> Result<Self, String> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err("not a gatefuse checkpoint (bad magic bytes)".into());
        }
        let version = u32::from_le_bytes(read_array(&mut r, "version")?);
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version} (expected {VERSION})"));
        }
        let len = u64::from_le_bytes(read_array(&mut r, "config length")?);
        let json = read_vec(&mut r, len, "config")?;
        let digest: [u8; 32] = read_array(&mut r, "config digest")?;
        if Sha256::digest(&json).as_slice() != digest {
            return Err("config digest mismatch".into());
        }
        let config: CheckpointConfig = serde_json::from_slice(&json).map_err(|e| format!("config: {e}"))?;
        let seed = u64::from_le_bytes(read_array(&mut r, "seed")?);
        let count = u32::from_le_bytes(read_array(&mut r, "tensor count")?);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_array(&mut r, "name length")?);
            let name = String::from_utf8(read_vec(&mut r, name_len as u64, "name")?)
                .map_err(|_| "tensor name is not UTF-8".to_string())?;
            let rows = u64::from_le_bytes(read_array(&mut r, "rows")?) as usize;
            let cols = u64::from_le_bytes(read_array(&mut r, "cols")?) as usize;
            let n = rows.checked_mul(cols).ok_or("tensor size overflow")?;
            let bytes = read_vec(&mut r, n as u64 * 8, &name)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(name, Tensor::from_vec(rows, cols, data).map_err(|e| e.to_string())?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
            return Err("trailing bytes after last tensor".into());
        }
        let model = ModelParams::from_store(config.dims, config.ablation, store).map_err(|e| e.to_string())?;
        Ok(Self { config, seed, model })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let file = std::fs::File::create(path).map_err(CliError::io(path))?;
        self.write_to(std::io::BufWriter::new(file)).map_err(CliError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = std::fs::File::open(path).map_err(CliError::io(path))?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|reason| CliError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), String> {
    r.read_exact(buf).map_err(|e| format!("truncated at {what}: {e}"))
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N], String> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

fn read_vec(r: &mut impl Read, len: u64, what: &str) -> Result<Vec<u8>, String> {
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf).map_err(|e| e.to_string())?;
    if buf.len() as u64 != len {
        return Err(format!("truncated at {what}"));
    }
    Ok(buf)
}
