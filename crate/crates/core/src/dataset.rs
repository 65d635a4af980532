//! JSON-lines dataset manifests: one `{"path", "label", "split"}` object per
//! line, paths relative to the manifest's directory.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::Label;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("{path:?} listed twice (splits {first} and {second})")]
    Duplicate { path: String, first: Split, second: Split },
    #[error("manifest entry {0:?} does not exist")]
    Missing(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}, expected train or test")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Rejects duplicate paths, including a path placed in both splits.
    pub fn validate_entries(entries: &[ManifestEntry]) -> Result<(), DatasetError> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for e in entries {
            if let Some(&first) = seen.get(e.path.as_str()) {
                return Err(DatasetError::Duplicate {
                    path: e.path.clone(),
                    first,
                    second: e.split,
                });
            }
            seen.insert(&e.path, e.split);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<ManifestEntry>(l).map_err(|e| DatasetError::Parse {
                    line: i + 1,
                    detail: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::validate_entries(&entries)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self { root, entries };
        for e in &manifest.entries {
            let p = manifest.resolve(e);
            if !p.is_file() {
                return Err(DatasetError::Missing(p));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}
