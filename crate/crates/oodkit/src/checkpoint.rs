//! Model checkpoints.
//!
//! A checkpoint is a directory holding `model.manifest` (TOML: format tag,
//! version, training seed, model configuration and one entry per tensor with
//! name, dtype, shape and byte offset) and `model.bin` (little-endian `f32`
//! values in manifest order).

use std::path::{Path, PathBuf};

use oodkit_core::model::ModelConfig;
use oodkit_core::tensor::{OddPolicy, Tensor};
use oodkit_core::MultiExitModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{create_dir, read_bytes, read_text, write_bytes, Error, Result};

pub const FORMAT: &str = "oodkit-checkpoint";
pub const VERSION: i64 = 1;
pub const MANIFEST_FILE: &str = "model.manifest";
pub const PAYLOAD_FILE: &str = "model.bin";

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    format!("{:x}", h.finalize())
}

/// Serializable mirror of [`ModelConfig`] without the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub input_size: usize,
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub exit_after: [usize; 2],
    pub head_channels: usize,
    pub loss_weights: [f64; 3],
    pub pool_odd: String,
}

impl ModelRecord {
    pub fn from_config(c: &ModelConfig) -> Self {
        ModelRecord {
            input_size: c.input_size,
            conv_channels: c.conv_channels.clone(),
            kernel_size: c.kernel_size,
            hidden: c.hidden,
            num_classes: c.num_classes,
            exit_after: c.exit_after,
            head_channels: c.head_channels,
            loss_weights: c.loss_weights,
            pool_odd: match c.pool_odd {
                OddPolicy::Error => "error",
                OddPolicy::Pad => "pad",
            }
            .into(),
        }
    }

    pub fn to_config(&self, seed: u64) -> Result<ModelConfig> {
        let pool_odd = match self.pool_odd.as_str() {
            "error" => OddPolicy::Error,
            "pad" => OddPolicy::Pad,
            other => return Err(Error::Usage(format!("unknown pool_odd policy {other:?}"))),
        };
        Ok(ModelConfig {
            input_size: self.input_size,
            conv_channels: self.conv_channels.clone(),
            kernel_size: self.kernel_size,
            hidden: self.hidden,
            num_classes: self.num_classes,
            exit_after: self.exit_after,
            head_channels: self.head_channels,
            loss_weights: self.loss_weights,
            pool_odd,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: i64,
    /// Decimal string; seeds use the full `u64` range.
    seed: String,
    payload_bytes: u64,
    model: ModelRecord,
    tensor: Vec<TensorEntry>,
}

/// A model read from or written to disk, with the fingerprint of its files.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub model: MultiExitModel,
    pub fingerprint: String,
}

fn encode(model: &MultiExitModel) -> (String, Vec<u8>) {
    let mut payload = Vec::new();
    let mut tensor = Vec::new();
    for p in model.params() {
        tensor.push(TensorEntry {
            name: p.name.clone(),
            dtype: "f32".into(),
            shape: p.tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in p.tensor.data() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        seed: model.config().seed.to_string(),
        payload_bytes: payload.len() as u64,
        model: ModelRecord::from_config(model.config()),
        tensor,
    };
    let text = toml::to_string(&manifest).expect("checkpoint manifest serializes");
    (text, payload)
}

/// Fingerprint the checkpoint files would have, without writing them.
pub fn fingerprint(model: &MultiExitModel) -> String {
    let (text, payload) = encode(model);
    sha256_hex(&[text.as_bytes(), &payload])
}

pub fn save(model: &MultiExitModel, dir: &Path) -> Result<String> {
    create_dir(dir)?;
    let (text, payload) = encode(model);
    write_bytes(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    write_bytes(&dir.join(PAYLOAD_FILE), &payload)?;
    Ok(sha256_hex(&[text.as_bytes(), &payload]))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = read_text(&manifest_path)?;
    let table: toml::Table = text.parse().map_err(|e| Error::parse(&manifest_path, e))?;
    match table.get("format").and_then(|v| v.as_str()) {
        Some(FORMAT) => {}
        _ => return Err(Error::parse(&manifest_path, format!("not an {FORMAT} manifest"))),
    }
    let version = table
        .get("version")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::parse(&manifest_path, "missing version"))?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::parse(&manifest_path, e))?;
    let seed: u64 = manifest
        .seed
        .parse()
        .map_err(|_| Error::parse(&manifest_path, format!("bad seed {:?}", manifest.seed)))?;
    let config = manifest.model.to_config(seed)?;
    let specs = config.param_specs()?;
    if specs.len() != manifest.tensor.len() {
        return Err(Error::parse(
            &manifest_path,
            format!("{} tensors listed, model has {}", manifest.tensor.len(), specs.len()),
        ));
    }
    let mut offset = 0u64;
    for (spec, entry) in specs.iter().zip(&manifest.tensor) {
        if entry.name != spec.name {
            return Err(Error::parse(
                &manifest_path,
                format!("tensor {:?} listed where {:?} was expected", entry.name, spec.name),
            ));
        }
        if entry.shape != spec.shape {
            return Err(Error::ShapeMismatch {
                name: entry.name.clone(),
                found: entry.shape.clone(),
                expected: spec.shape.clone(),
            });
        }
        if entry.dtype != "f32" {
            return Err(Error::parse(
                &manifest_path,
                format!("unsupported dtype {:?}", entry.dtype),
            ));
        }
        if entry.offset != offset {
            return Err(Error::parse(
                &manifest_path,
                format!("tensor {} has bad offset", entry.name),
            ));
        }
        offset += 4 * spec.shape.iter().product::<usize>() as u64;
    }
    if manifest.payload_bytes != offset {
        return Err(Error::parse(
            &manifest_path,
            "payload_bytes disagrees with tensor shapes",
        ));
    }
    let payload_path = dir.join(PAYLOAD_FILE);
    let payload = read_bytes(&payload_path)?;
    if (payload.len() as u64) < offset {
        return Err(Error::Truncated {
            path: payload_path,
            got: payload.len() as u64,
            expected: offset,
        });
    }
    if payload.len() as u64 > offset {
        return Err(Error::parse(
            &payload_path,
            format!("{} trailing bytes", payload.len() as u64 - offset),
        ));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    let mut at = 0;
    for spec in &specs {
        let n: usize = spec.shape.iter().product();
        let data = payload[at..at + 4 * n]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        at += 4 * n;
        tensors.push(Tensor::new(&spec.shape, data)?);
    }
    let model = MultiExitModel::from_tensors(config, tensors)?;
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        model,
        fingerprint: sha256_hex(&[text.as_bytes(), &payload]),
    })
}
