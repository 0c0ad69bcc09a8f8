//! Checkpoints: a JSON manifest (config, tensor table, content hash, rng and
//! trainer counters) plus one raw little-endian float blob. Loads verify the
//! hash and the full tensor schema, so resume is bit-exact or loudly fails.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{AdamWState, ParameterStore, RngState, Scalar, Tensor};

use super::model::{parameter_inventory, ModelConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "blob.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParameterStore<T>,
    pub opt: AdamWState<T>,
    pub stage_index: usize,
    pub global_step: u64,
    pub rng_streams: BTreeMap<String, RngState>,
    pub counters: BTreeMap<String, u64>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn fresh(config: ModelConfig, params: ParameterStore<T>) -> Self {
        let opt = AdamWState::new(&params);
        Checkpoint {
            config,
            params,
            opt,
            stage_index: 0,
            global_step: 0,
            rng_streams: BTreeMap::new(),
            counters: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    config: ModelConfig,
    stage_index: usize,
    global_step: u64,
    opt_step: u64,
    rng_streams: BTreeMap<String, RngState>,
    counters: BTreeMap<String, u64>,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
}

fn write_tensor<T: Scalar>(blob: &mut Vec<u8>, t: &Tensor<T>) {
    match T::DTYPE {
        crate::numerics::Dtype::F32 => {
            for v in t.data() {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        crate::numerics::Dtype::F64 => {
            for v in t.data() {
                blob.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
}

fn read_tensor<T: Scalar>(blob: &[u8], entry: &TensorEntry) -> Result<Tensor<T>> {
    let width = T::DTYPE.byte_width();
    let bytes = blob
        .get(entry.offset..entry.offset + entry.len * width)
        .ok_or_else(|| Error::Corrupt { detail: format!("blob too short for `{}`", entry.name) })?;
    let data: Vec<T> = match T::DTYPE {
        crate::numerics::Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
            .collect(),
        crate::numerics::Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| {
                T::from_f64(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ]))
            })
            .collect(),
    };
    Tensor::new(entry.shape.clone(), data)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let width = T::DTYPE.byte_width();
    let mut push = |blob: &mut Vec<u8>, name: String, t: &Tensor<T>| {
        let offset = blob.len();
        write_tensor(blob, t);
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset, len: t.numel() });
        debug_assert_eq!(blob.len(), offset + t.numel() * width);
    };
    for (name, t) in ckpt.params.iter() {
        push(&mut blob, format!("param.{name}"), t);
    }
    for (name, t) in ckpt.opt.m.iter() {
        push(&mut blob, format!("adam_m.{name}"), t);
    }
    for (name, t) in ckpt.opt.v.iter() {
        push(&mut blob, format!("adam_v.{name}"), t);
    }
    let manifest = Manifest {
        version: 1,
        dtype: T::DTYPE.name().to_string(),
        config: ckpt.config.clone(),
        stage_index: ckpt.stage_index,
        global_step: ckpt.global_step,
        opt_step: ckpt.opt.step,
        rng_streams: ckpt.rng_streams.clone(),
        counters: ckpt.counters.clone(),
        tensors,
        blob_sha256: sha256_hex(&blob),
    };
    let mut bf = std::fs::File::create(dir.join(BLOB_FILE))?;
    bf.write_all(&blob)?;
    std::fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let mtext = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&mtext)
        .map_err(|e| Error::Corrupt { detail: format!("manifest: {e}") })?;
    if manifest.dtype != T::DTYPE.name() {
        return Err(Error::Corrupt {
            detail: format!("dtype {} does not match requested {}", manifest.dtype, T::DTYPE.name()),
        });
    }
    let mut blob = Vec::new();
    std::fs::File::open(dir.join(BLOB_FILE))?.read_to_end(&mut blob)?;
    let hash = sha256_hex(&blob);
    if hash != manifest.blob_sha256 {
        return Err(Error::Corrupt {
            detail: format!("blob hash {hash} != manifest {}", manifest.blob_sha256),
        });
    }
    let mut by_name: BTreeMap<&str, &TensorEntry> =
        manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut params = ParameterStore::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, shape, _) in parameter_inventory(&manifest.config) {
        for (prefix, sink) in [("param", None), ("adam_m", Some(0)), ("adam_v", Some(1))] {
            let full = format!("{prefix}.{name}");
            let entry = by_name
                .remove(full.as_str())
                .ok_or_else(|| Error::Schema { name: full.clone() })?;
            if entry.shape != shape {
                return Err(Error::Corrupt { detail: format!("shape mismatch for `{full}`") });
            }
            let tensor = read_tensor::<T>(&blob, entry)?;
            match sink {
                None => params.insert(name.clone(), tensor),
                Some(0) => {
                    m.insert(name.clone(), tensor);
                }
                _ => {
                    v.insert(name.clone(), tensor);
                }
            }
        }
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
        opt: AdamWState { m, v, step: manifest.opt_step },
        stage_index: manifest.stage_index,
        global_step: manifest.global_step,
        rng_streams: manifest.rng_streams,
        counters: manifest.counters,
    })
}
