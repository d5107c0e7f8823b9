//! Checkpoint format: a `manifest.json` listing every tensor by name with its
//! shape and byte offset, next to a single `params.bin` blob of little-endian
//! `f32` values in manifest order. Saving the same tensors twice produces
//! byte-identical files.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::tensor::ParamTensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT: &str = "demoguide-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<ManifestEntry>,
}

/// Writes `tensors` to `dir` under the names given.
pub fn save_checkpoint(dir: &Path, tensors: &[(String, &ParamTensor<f32>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for (name, t) in tensors {
        if seen.insert(name.as_str(), ()).is_some() {
            return Err(Error::Usage(format!("duplicate checkpoint tensor name {name:?}")));
        }
        let expected: usize = t.shape.iter().product();
        if expected != t.values.len() {
            return Err(Error::Usage(format!(
                "tensor {name:?} has {} values but shape {:?}",
                t.values.len(),
                t.shape
            )));
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset: blob.len() as u64,
        });
        for v in &t.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(BLOB_FILE), &blob)?;
    let manifest = Manifest { format: FORMAT.to_string(), tensors: entries };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), &json)?;
    Ok(())
}

/// Fills `tensors` from the checkpoint in `dir`. The requested names must
/// match the manifest exactly (no missing and no extra tensors) and shapes
/// must agree; values are restored bit for bit and gradients cleared.
pub fn load_checkpoint(dir: &Path, tensors: &mut [(String, &mut ParamTensor<f32>)]) -> Result<()> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
        .map_err(|e| Error::format(&manifest_path, format!("invalid manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported checkpoint format {:?}", manifest.format),
        ));
    }

    let mut by_name: HashMap<&str, &ManifestEntry> = HashMap::new();
    for e in &manifest.tensors {
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::format(&manifest_path, format!("duplicate tensor {:?}", e.name)));
        }
    }
    for (name, _) in tensors.iter() {
        if !by_name.contains_key(name.as_str()) {
            return Err(Error::format(&manifest_path, format!("missing tensor {name:?}")));
        }
    }
    if by_name.len() != tensors.len() {
        let wanted: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        let extra: Vec<&str> = manifest
            .tensors
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| !wanted.contains(n))
            .collect();
        return Err(Error::format(
            &manifest_path,
            format!("checkpoint contains unexpected tensors {extra:?}"),
        ));
    }

    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path)?;
    for (name, t) in tensors.iter_mut() {
        let entry = by_name[name.as_str()];
        if entry.shape != t.shape {
            return Err(Error::format(
                &manifest_path,
                format!("tensor {name:?} has shape {:?}, expected {:?}", entry.shape, t.shape),
            ));
        }
        let len: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + len * 4;
        if end > blob.len() {
            return Err(Error::format(
                &blob_path,
                format!("tensor {name:?} extends past end of blob"),
            ));
        }
        for (i, chunk) in blob[start..end].chunks_exact(4).enumerate() {
            t.values[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        t.zero_grad();
    }
    Ok(())
}
