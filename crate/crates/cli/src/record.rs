//! `run.json`: everything needed to rerun a command bit for bit, plus the
//! digests of the deterministic outputs it produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Surgery};
use crate::error::CliError;

pub const RUN_FILE: &str = "run.json";

/// A subcommand with its input paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    GenData,
    Pretrain {
        data: PathBuf,
    },
    Adapt {
        from: PathBuf,
        surgery: Vec<Surgery>,
    },
    Finetune {
        data: PathBuf,
        from: Option<PathBuf>,
    },
    Eval {
        from: Option<PathBuf>,
        data: Option<PathBuf>,
        cand: Option<PathBuf>,
        reference: Option<PathBuf>,
    },
    Bench,
    DumpMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub task: Task,
    pub seed: u64,
    pub workers: usize,
    /// `git describe` of the source tree, or the crate version outside git.
    pub version: String,
    pub config: ExperimentConfig,
    /// SHA-256 of each deterministic output, keyed by path relative to the
    /// output directory.
    pub outputs: BTreeMap<String, String>,
}

pub fn describe_version() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Digests of `files` (relative to `out`).
pub fn digests(out: &Path, files: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    files.iter().map(|f| Ok((f.clone(), file_digest(&out.join(f))?))).collect()
}

impl RunRecord {
    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        let path = out.join(RUN_FILE);
        let text = serde_json::to_string_pretty(self).expect("run record serializes");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(path.display(), e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut rec: Self = serde_json::from_value(value.clone())
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        rec.config = ExperimentConfig::from_value(value["config"].clone())?;
        Ok(rec)
    }
}
