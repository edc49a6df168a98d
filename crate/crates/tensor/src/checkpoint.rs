//! Flat checkpoint format: a JSON manifest mapping parameter names to shapes
//! and byte offsets, next to a blob of little-endian `f64` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Params, Result, Tensor, TensorError};

pub const FORMAT: &str = "da3-params/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub total_bytes: usize,
    pub params: Vec<ManifestEntry>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TensorError {
    TensorError::Checkpoint(format!("{}: {e}", path.display()))
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
pub fn save_checkpoint(params: &Params, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let blob_name = format!("{stem}.bin");
    let mut blob = Vec::with_capacity(params.num_scalars() * 8);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: blob_name.clone(),
        total_bytes: blob.len(),
        params: entries,
    };
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &blob).map_err(|e| io_err(&blob_path, e))?;
    let manifest_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&manifest_path, e))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Reads a manifest and its blob back into a [`Params`].
pub fn load_checkpoint(manifest_path: &Path) -> Result<Params> {
    let text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| io_err(manifest_path, e))?;
    if manifest.format != FORMAT {
        return Err(io_err(
            manifest_path,
            format!("unsupported format `{}`", manifest.format),
        ));
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
    if blob.len() != manifest.total_bytes {
        return Err(io_err(
            &blob_path,
            format!("expected {} bytes, found {}", manifest.total_bytes, blob.len()),
        ));
    }
    let mut params = Params::new();
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * 8;
        if end > blob.len() {
            return Err(io_err(&blob_path, format!("`{}` runs past end of blob", entry.name)));
        }
        let data = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok(params)
}
