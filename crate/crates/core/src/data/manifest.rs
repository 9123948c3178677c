//! JSON Lines dataset manifests.
//!
//! On disk each line is `{path, label, generator, split, content_hash}`.
//! Paths below the manifest's directory are stored relative to it; in memory
//! every path is resolved.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Generator id used for real rows.
pub const REAL_GENERATOR: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Real = 0, fake = 1.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: Label,
    pub generator: String,
    pub split: Split,
    pub content_hash: String,
}

impl ManifestRow {
    /// Builds a row by hashing the file at `path`.
    pub fn from_file(path: &Path, label: Label, generator: &str, split: Split) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            label,
            generator: generator.to_string(),
            split,
            content_hash: sha256_hex(&bytes),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let m = Self { rows };
        m.validate()?;
        Ok(m)
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<ManifestRow> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Concatenates manifests; the result must still have unique paths.
    pub fn merge(parts: &[&DatasetManifest]) -> Result<Self> {
        Self::new(parts.iter().flat_map(|m| m.rows.iter().cloned()).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(&row.path) {
                return Err(Error::Manifest(format!("duplicate path {}", row.path.display())));
            }
            match row.label {
                Label::Fake if row.generator.is_empty() || row.generator == REAL_GENERATOR => {
                    return Err(Error::Manifest(format!(
                        "fake row {} has no generator id",
                        row.path.display()
                    )));
                }
                Label::Real if row.generator != REAL_GENERATOR => {
                    return Err(Error::Manifest(format!(
                        "real row {} carries generator `{}`",
                        row.path.display(),
                        row.generator
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Re-hashes every file and reports rows whose bytes changed.
    pub fn verify_hashes(&self) -> Result<()> {
        for row in &self.rows {
            let bytes = fs::read(&row.path).map_err(|e| Error::io(&row.path, e))?;
            if sha256_hex(&bytes) != row.content_hash {
                return Err(Error::Manifest(format!(
                    "content hash mismatch for {}",
                    row.path.display()
                )));
            }
        }
        Ok(())
    }

    /// Sorted distinct fake generator ids.
    pub fn generators(&self) -> Vec<String> {
        let mut g: Vec<String> = self
            .rows
            .iter()
            .filter(|r| r.label == Label::Fake)
            .map(|r| r.generator.clone())
            .collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn to_jsonl(&self, base: &Path) -> Result<String> {
        let mut out = String::new();
        for row in &self.rows {
            let mut r = row.clone();
            if let Ok(rel) = row.path.strip_prefix(base) {
                r.path = rel.to_path_buf();
            }
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, base: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut row: ManifestRow =
                serde_json::from_str(line).map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?;
            if row.path.is_relative() {
                row.path = base.join(&row.path);
            }
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl(&manifest_base(path))?;
        anl_nn::checkpoint::write_atomic(path, text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, &manifest_base(path))
    }
}

fn manifest_base(path: &Path) -> PathBuf {
    let parent = path.parent().unwrap_or(Path::new("."));
    let parent = if parent.as_os_str().is_empty() {
        Path::new(".")
    } else {
        parent
    };
    std::path::absolute(parent).unwrap_or_else(|_| parent.to_path_buf())
}
