// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor container format shared by model and mean-bank files.
//!
//! The file at the given path is a UTF-8 JSON manifest:
//!
//! ```json
//! { "magic": "MECHUQ-MODEL-v1", "blob": "m.mdl.blob", "config": { ... },
//!   "tensors": [ { "name": "tok_embed", "shape": [32, 64], "offset": 0, "length": 16384 } ] }
//! ```
//!
//! `blob` names a sibling file holding the little-endian `f64` data of every
//! tensor, concatenated in manifest order; `offset` and `length` are in bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;

use super::{ModelBundle, ModelConfig, Tensor};

pub const MODEL_MAGIC: &str = "MECHUQ-MODEL-v1";
pub const MEANS_MAGIC: &str = "MECHUQ-MEANS-v1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn blob_path(manifest: &Path, blob: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new("")).join(blob)
}

/// Write a manifest at `path` plus its blob. `header` must be a JSON object;
/// its fields are merged into the manifest.
pub(crate) fn write_container(
    path: &Path,
    magic: &str,
    header: serde_json::Value,
    tensors: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?
        .to_string_lossy()
        .into_owned();
    let blob_name = format!("{file_name}.blob");
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, shape, data) in tensors {
        let offset = blob.len() as u64;
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(Entry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            length: (data.len() * 8) as u64,
        });
    }
    let mut manifest = match header {
        serde_json::Value::Object(m) => m,
        _ => return Err(Error::invalid("container header must be a JSON object")),
    };
    manifest.insert("magic".into(), magic.into());
    manifest.insert("blob".into(), blob_name.clone().into());
    manifest.insert("tensors".into(), serde_json::to_value(&entries)?);
    write_atomic(&blob_path(path, &blob_name), &blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Read a container written by [`write_container`], returning the manifest
/// and the tensors in manifest order.
pub(crate) fn read_container(
    path: &Path,
    magic: &str,
) -> Result<(serde_json::Value, Vec<(String, Vec<usize>, Vec<f64>)>)> {
    let text = std::fs::read_to_string(path)?;
    let manifest: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
        Error::format(format!(
            "{}: manifest is not valid JSON ({e})",
            path.display()
        ))
    })?;
    match manifest.get("magic").and_then(|m| m.as_str()) {
        Some(m) if m == magic => {}
        Some(m) => {
            return Err(Error::format(format!(
                "bad magic {m:?}, expected {magic:?}"
            )))
        }
        None => {
            return Err(Error::format(format!(
                "manifest has no magic, expected {magic:?}"
            )))
        }
    }
    let blob_name = manifest
        .get("blob")
        .and_then(|b| b.as_str())
        .ok_or_else(|| Error::format("manifest has no blob file name"))?;
    if blob_name.contains('/') || blob_name.contains('\\') {
        return Err(Error::format("blob must name a sibling file"));
    }
    let entries: Vec<Entry> = serde_json::from_value(
        manifest
            .get("tensors")
            .cloned()
            .ok_or_else(|| Error::format("manifest has no tensor list"))?,
    )?;
    let blob = std::fs::read(blob_path(path, blob_name))?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let count: usize = e.shape.iter().product();
        if e.shape.is_empty() || (count * 8) as u64 != e.length {
            return Err(Error::format(format!(
                "tensor {}: shape {:?} needs {} bytes but manifest length is {}",
                e.name,
                e.shape,
                count * 8,
                e.length
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= blob.len() as u64)
            .ok_or_else(|| {
                Error::format(format!(
                    "tensor {}: bytes {}..{} exceed blob of {} bytes (truncated?)",
                    e.name,
                    e.offset,
                    e.offset.saturating_add(e.length),
                    blob.len()
                ))
            })?;
        let data = blob[e.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((e.name, e.shape, data));
    }
    Ok((manifest, out))
}

/// Save a model as manifest + blob (see the module docs).
pub fn save_model(model: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let tensors: Vec<_> = model
        .config
        .tensor_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let data = model.tensor(&name).data.clone();
            (name, shape, data)
        })
        .collect();
    let header = serde_json::json!({ "config": model.config });
    write_container(path.as_ref(), MODEL_MAGIC, header, &tensors)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let (manifest, tensors) = read_container(path.as_ref(), MODEL_MAGIC)?;
    let config: ModelConfig = serde_json::from_value(
        manifest
            .get("config")
            .cloned()
            .ok_or_else(|| Error::format("model manifest has no config"))?,
    )?;
    let mut map = BTreeMap::new();
    for (name, shape, data) in tensors {
        if map.contains_key(&name) {
            return Err(Error::format(format!("tensor {name} listed twice")));
        }
        map.insert(name, Tensor::new(shape, data)?);
    }
    ModelBundle::new(config, map)
}

impl ModelBundle {
    /// SHA-256 over the config and every tensor's bytes in canonical order.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, _) in self.config.tensor_shapes() {
            h.update(name.as_bytes());
            for v in &self.tensor(&name).data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
