//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `NGEBMCKP` |
//! | 4     | format version (`u32`, currently 1) |
//! | 8     | header length `H` (`u64`) |
//! | H     | UTF-8 JSON header |
//! | rest  | `f64` payload |
//!
//! The header holds the model spec, the tensor names and shapes, the epoch
//! counter, Adam hyperparameters and step count, the sampler RNG state and a
//! free-form `meta` object. The payload is every parameter tensor in header
//! order, then every Adam first moment, then every second moment, each as
//! raw row-major `f64` values. Files with missing or extra payload bytes are
//! rejected.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, Model, ModelSpec, Parameters};

pub const MAGIC: &[u8; 8] = b"NGEBMCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Enough to rebuild a `ChaCha8Rng` at the exact same position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RngHeader {
    seed: u64,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    t: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    spec: ModelSpec,
    epoch: usize,
    tensors: Vec<TensorEntry>,
    adam: AdamHeader,
    rng: RngHeader,
    #[serde(default)]
    meta: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        if self.adam.m.len() != params.len() || self.adam.v.len() != params.len() {
            return Err(Error::InvalidSpec("optimizer state does not match parameters".into()));
        }
        let header = Header {
            spec: self.model.spec.clone(),
            epoch: self.epoch,
            tensors: params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            adam: AdamHeader {
                config: self.adam.config,
                t: self.adam.t,
            },
            rng: RngHeader {
                seed: self.rng.seed,
                stream: self.rng.stream,
                word_pos: self.rng.word_pos.to_string(),
            },
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidSpec(format!("checkpoint header: {e}")))?;
        let n = params.num_values();
        let mut out = Vec::with_capacity(20 + json.len() + 24 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for group in [params.tensors().collect::<Vec<_>>(), self.adam.m.iter().collect(), self.adam.v.iter().collect()] {
            for t in group {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(corrupt(format!("file is {} bytes, shorter than the fixed preamble", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let hend = 20usize
            .checked_add(usize::try_from(hlen).map_err(|_| corrupt("header length overflows"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt(format!("header of {hlen} bytes runs past end of file")))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..hend]).map_err(|e| corrupt(format!("header: {e}")))?;
        let word_pos = header
            .rng
            .word_pos
            .parse::<u128>()
            .map_err(|e| corrupt(format!("rng word position: {e}")))?;

        let sizes: Vec<usize> = header.tensors.iter().map(|t| t.shape.iter().product()).collect();
        let n: usize = sizes.iter().sum();
        let payload = &bytes[hend..];
        let expected = n
            .checked_mul(24)
            .ok_or_else(|| corrupt("tensor sizes overflow"))?;
        if payload.len() != expected {
            return Err(corrupt(format!(
                "payload is {} bytes, expected {expected} (truncated or trailing data at offset {})",
                payload.len(),
                hend + payload.len().min(expected)
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut read_group = || -> Result<Vec<Tensor>> {
            header
                .tensors
                .iter()
                .zip(&sizes)
                .map(|(t, &len)| Ok(Tensor::new(t.shape.clone(), values.by_ref().take(len).collect())?))
                .collect()
        };
        let p = read_group()?;
        let m = read_group()?;
        let v = read_group()?;
        let params = Parameters::new(header.tensors.iter().map(|t| t.name.clone()).zip(p).collect());
        let model = Model::new(header.spec, params).map_err(|e| corrupt(format!("parameters do not fit spec: {e}")))?;
        Ok(Self {
            model,
            adam: AdamState {
                config: header.adam.config,
                m,
                v,
                t: header.adam.t,
            },
            epoch: header.epoch,
            rng: RngState {
                seed: header.rng.seed,
                stream: header.rng.stream,
                word_pos,
            },
            meta: header.meta,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
