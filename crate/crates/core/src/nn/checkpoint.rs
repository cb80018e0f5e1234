//! Parameter checkpoints.
//!
//! A checkpoint is a directory holding `index.json` and one blob of raw
//! little-endian `f64` values. The index maps each parameter name to
//! `{shape, dtype, file, offset}` where `offset` is in bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const BLOB_FILE: &str = "params.f64";
const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub offset: u64,
}

pub fn save_params(dir: &Path, params: &[(String, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = BTreeMap::new();
    let mut blob = Vec::new();
    for (name, t) in params {
        if index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        index.insert(
            name.clone(),
            IndexEntry {
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                file: BLOB_FILE.into(),
                offset: blob.len() as u64,
            },
        );
        blob.extend(t.to_le_bytes());
    }
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let index_path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index).expect("index serialises");
    fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))
}

pub fn load_params(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: BTreeMap<String, IndexEntry> =
        serde_json::from_str(&text).map_err(|e| Error::format(&index_path, e.to_string()))?;

    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for (name, entry) in index {
        if entry.dtype != DTYPE {
            return Err(Error::format(&index_path, format!("{name}: unsupported dtype {}", entry.dtype)));
        }
        if !blobs.contains_key(&entry.file) {
            let p = dir.join(&entry.file);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            blobs.insert(entry.file.clone(), bytes);
        }
        let bytes = &blobs[&entry.file];
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > bytes.len() {
            return Err(Error::format(
                dir.join(&entry.file),
                format!("{name} needs bytes {start}..{end}, file has {}", bytes.len()),
            ));
        }
        let data =
            bytes[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
        out.insert(name, Tensor::new(entry.shape, data)?);
    }
    Ok(out)
}

/// Copies loaded tensors into `targets`, matching by name and shape.
pub fn restore_into(loaded: &BTreeMap<String, Tensor>, names: &[String], targets: Vec<&mut Tensor>) -> Result<()> {
    if names.len() != targets.len() {
        return Err(Error::Contract("name list and parameter list differ in length".into()));
    }
    for (name, target) in names.iter().zip(targets) {
        let src = loaded.get(name).ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {name}")))?;
        if src.shape() != target.shape() {
            return Err(Error::dim(
                "restore",
                format!("{name}: checkpoint {:?} vs model {:?}", src.shape(), target.shape()),
            ));
        }
        *target = src.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0e300]).unwrap();
        let b = Tensor::vector(vec![0.1, 0.2, 0.3]);
        save_params(dir.path(), &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let loaded = load_params(dir.path()).unwrap();
        assert_eq!(loaded["a"].to_le_bytes(), a.to_le_bytes());
        assert_eq!(loaded["b"], b);
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
        save_params(dir.path(), &[("a".into(), &a)]).unwrap();
        let p = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(load_params(dir.path()), Err(Error::Format { .. })));
    }
}
