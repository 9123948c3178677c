//! Per-run JSON records and completion checks.
//!
//! `<out>/<command>.run.json` is written with status `running` before any
//! work starts and rewritten as `complete` or `failed` at the end, so an
//! interrupted run is never mistaken for a finished one. A run is skipped
//! when its record is complete, the resolved config is identical and every
//! listed artifact still hashes to the recorded digest.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anl::data::manifest::sha256_hex;
use anl_nn::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        let data = fs::read(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }

    fn is_intact(&self) -> bool {
        fs::read(&self.path).is_ok_and(|d| d.len() as u64 == self.bytes && sha256_hex(&d) == self.sha256)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Every setting after layering, defaults included.
    pub config: Value,
    pub seed: Option<u64>,
    /// All numerical kernels are single-threaded with seeded RNG streams, so
    /// every run is deterministic.
    pub deterministic: bool,
    pub git_describe: String,
    pub started_unix: u64,
    pub wall_time_s: f64,
    pub status: Status,
    pub artifacts: Vec<Artifact>,
    pub summary: Value,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn path(out: &Path, command: &str) -> PathBuf {
        out.join(format!("{command}.run.json"))
    }

    pub fn load(out: &Path, command: &str) -> Option<Self> {
        let text = fs::read_to_string(Self::path(out, command)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Complete, same config, artifacts unchanged.
    pub fn satisfies(&self, config: &Value) -> bool {
        self.status == Status::Complete && &self.config == config && self.artifacts.iter().all(Artifact::is_intact)
    }

    pub fn write(&self, out: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        write_atomic(&Self::path(out, &self.command), text.as_bytes())
    }
}

/// `git describe` of the source tree this binary was built from.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}
