//! JSON-lines manifests: one `{id, feature_path, target_text, duration_frames}`
//! object per utterance. Relative feature paths resolve against the manifest's
//! directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurizer::{read_features, FeatureError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: duplicate id {id}")]
    DuplicateId { path: String, id: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: String,
    pub target_text: String,
    pub duration_frames: usize,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let file = fs::File::open(path).map_err(|source| ManifestError::Io { path: shown.clone(), source })?;
        let mut entries: Vec<ManifestEntry> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| ManifestError::Io { path: shown.clone(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line).map_err(|err| ManifestError::Parse {
                path: shown.clone(),
                line: i + 1,
                message: err.to_string(),
            })?;
            if !seen.insert(e.id.clone()) {
                return Err(ManifestError::DuplicateId { path: shown, id: e.id });
            }
            entries.push(e);
        }
        Ok(Self { path: path.to_path_buf(), entries })
    }

    pub fn write(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), ManifestError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let io = |source| ManifestError::Io { path: shown.clone(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let mut out = Vec::new();
        for e in entries {
            serde_json::to_writer(&mut out, e).expect("entry serializes");
            out.push(b'\n');
        }
        fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io)
    }

    pub fn feature_path(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.feature_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn load_features(&self, entry: &ManifestEntry) -> Result<Array2<f64>, ManifestError> {
        Ok(read_features(&self.feature_path(entry))?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
