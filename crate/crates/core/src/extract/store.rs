//! On-disk activation tensors: `<stem>.f64` holds little-endian f64 values
//! in `N × h × w × C` row-major order; `<stem>.json` is the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::{ActivationKey, ActivationSet, ExtractError};

pub const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub image_order: Vec<PathBuf>,
    pub model_id: String,
    pub layer: String,
    pub set_key: String,
    pub preprocessing_hash: String,
}

fn store_err(path: &Path, message: impl Into<String>) -> ExtractError {
    ExtractError::Store {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("f64"), stem.with_extension("json"))
}

/// Write the tensor and its manifest. The manifest is written last via an
/// atomic rename, so a present manifest implies a complete tensor file.
pub fn write_activation_store(
    stem: &Path,
    set: &ActivationSet,
    preprocessing_hash: &str,
) -> Result<StoreManifest, ExtractError> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let (data_path, manifest_path) = paths(stem);
    let mut bytes = Vec::with_capacity(set.tensors.len() * 8);
    for v in set.tensors.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let dir = data_path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp_data = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp_data, &bytes)?;
    tmp_data
        .persist(&data_path)
        .map_err(|e| ExtractError::from(e.error))?;
    let manifest = StoreManifest {
        shape: set.tensors.shape().to_vec(),
        dtype: DTYPE.into(),
        image_order: set.image_order.clone(),
        model_id: set.key.model_id.clone(),
        layer: set.key.layer.clone(),
        set_key: set.key.set.to_string(),
        preprocessing_hash: preprocessing_hash.to_string(),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| store_err(&manifest_path, e.to_string()))?;
    std::io::Write::write_all(&mut tmp, &json)?;
    tmp.persist(&manifest_path)
        .map_err(|e| ExtractError::from(e.error))?;
    Ok(manifest)
}

pub fn read_manifest(stem: &Path) -> Result<StoreManifest, ExtractError> {
    let (_, manifest_path) = paths(stem);
    let bytes = fs::read(&manifest_path)?;
    serde_json::from_slice(&bytes).map_err(|e| store_err(&manifest_path, e.to_string()))
}

pub fn read_activation_store(stem: &Path) -> Result<(ActivationSet, StoreManifest), ExtractError> {
    let manifest = read_manifest(stem)?;
    let (data_path, _) = paths(stem);
    if manifest.dtype != DTYPE {
        return Err(store_err(
            &data_path,
            format!("unsupported dtype {}", manifest.dtype),
        ));
    }
    let [n, h, w, c] = manifest.shape[..] else {
        return Err(store_err(&data_path, "shape must have 4 dimensions"));
    };
    if manifest.image_order.len() != n {
        return Err(store_err(&data_path, "image_order length does not match N"));
    }
    let bytes = fs::read(&data_path)?;
    if bytes.len() != n * h * w * c * 8 {
        return Err(store_err(
            &data_path,
            format!(
                "expected {} bytes, found {}",
                n * h * w * c * 8,
                bytes.len()
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(store_err(&data_path, "non-finite activation"));
    }
    let tensors = Array4::from_shape_vec((n, h, w, c), values)
        .map_err(|e| store_err(&data_path, e.to_string()))?;
    let set_key = manifest
        .set_key
        .parse()
        .map_err(|e: crate::catalog::CatalogError| store_err(&data_path, e.to_string()))?;
    let key = ActivationKey {
        set: set_key,
        model_id: manifest.model_id.clone(),
        layer: manifest.layer.clone(),
    };
    Ok((
        ActivationSet {
            key,
            tensors,
            image_order: manifest.image_order.clone(),
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{SetKey, Source};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = Array4::from_shape_fn((3, 2, 2, 5), |(n, y, x, c)| {
            (n * 1000 + y * 100 + x * 10 + c) as f64 / 7.0
        });
        let set = ActivationSet {
            key: ActivationKey {
                set: SetKey::concept("striped", Source::Real),
                model_id: "toy-cnn".into(),
                layer: "conv2".into(),
            },
            tensors,
            image_order: vec!["a.png".into(), "b.png".into(), "c.png".into()],
        };
        let stem = dir.path().join("acts/striped");
        write_activation_store(&stem, &set, "abc").unwrap();
        let (back, manifest) = read_activation_store(&stem).unwrap();
        assert_eq!(back, set);
        assert_eq!(manifest.preprocessing_hash, "abc");
        assert_eq!(manifest.shape, vec![3, 2, 2, 5]);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let set = ActivationSet {
            key: ActivationKey {
                set: SetKey::class("zebra"),
                model_id: "m".into(),
                layer: "l".into(),
            },
            tensors: Array4::zeros((1, 1, 1, 2)),
            image_order: vec!["x.png".into()],
        };
        let stem = dir.path().join("s");
        write_activation_store(&stem, &set, "h").unwrap();
        fs::write(stem.with_extension("f64"), [0u8; 8]).unwrap();
        assert!(read_activation_store(&stem).is_err());
    }
}
