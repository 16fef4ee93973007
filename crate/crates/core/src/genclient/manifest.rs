//! Append-only JSONL manifest, rewritten through a temporary file and an
//! atomic rename on every append.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::GenError;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub filename: String,
    pub prompt: String,
    pub provider: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
}

#[derive(Debug)]
pub struct Manifest {
    path: PathBuf,
    records: Vec<ManifestRecord>,
    text: String,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>, GenError> {
    Ok(Manifest::open(dir)?.records)
}

impl Manifest {
    pub fn open(dir: &Path) -> Result<Self, GenError> {
        let path = dir.join(MANIFEST_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| GenError::Manifest {
                    path: path.clone(),
                    message: format!("line {}: {e}", i + 1),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            path,
            records,
            text,
        })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    /// File names recorded in the manifest that also exist on disk.
    pub fn completed_files(&self, dir: &Path) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| dir.join(&r.filename).is_file())
            .map(|r| r.filename.clone())
            .collect()
    }

    pub fn append(&mut self, record: ManifestRecord) -> Result<(), GenError> {
        let line = serde_json::to_string(&record).map_err(|e| GenError::Manifest {
            path: self.path.clone(),
            message: e.to_string(),
        })?;
        let mut text = self.text.clone();
        text.push_str(&line);
        text.push('\n');
        super::write_atomic(&self.path, text.as_bytes())?;
        self.text = text;
        self.records.push(record);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::open(dir.path()).unwrap();
        let rec = ManifestRecord {
            filename: "gen_0001.png".into(),
            prompt: "p".into(),
            provider: "mock".into(),
            seed: 3,
            source_image: None,
        };
        m.append(rec.clone()).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), vec![rec]);
        assert!(m.completed_files(dir.path()).is_empty());
        std::fs::write(dir.path().join("gen_0001.png"), b"x").unwrap();
        assert_eq!(m.completed_files(dir.path()).len(), 1);
    }

    #[test]
    fn corrupt_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), "{not json}\n").unwrap();
        assert!(matches!(
            Manifest::open(dir.path()),
            Err(GenError::Manifest { .. })
        ));
    }
}
