use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const MANIFEST_FORMAT: u32 = 1;

/// Per-run overrides on top of the config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    pub alpha: Option<f64>,
    pub freeze_lambda: Option<bool>,
    pub perturbations: Vec<String>,
    pub episodes: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub run_id: String,
    pub subcommand: String,
    /// Path the config was read from.
    pub config_path: PathBuf,
    /// Verbatim copy inside the run directory.
    pub config_snapshot: String,
    pub config_sha256: String,
    pub seed: u64,
    pub args: RunArgs,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: Manifest =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Validation(format!(
                "{}: manifest format {} is not supported",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    /// Snapshot text, after checking it against the recorded hash.
    pub fn snapshot_text(&self, run_dir: &Path) -> Result<String, CliError> {
        let path = run_dir.join(&self.config_snapshot);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let hash = sha256_hex(text.as_bytes());
        if hash != self.config_sha256 {
            return Err(CliError::Validation(format!(
                "{}: content hash {hash} does not match the manifest ({})",
                path.display(),
                self.config_sha256
            )));
        }
        Ok(text)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Creates `root/run_id`, refusing to reuse an existing run id.
pub fn create_run_dir(root: &Path, run_id: &str) -> Result<PathBuf, CliError> {
    let dir = root.join(run_id);
    if dir.exists() {
        return Err(CliError::Validation(format!(
            "run directory {} already exists",
            dir.display()
        )));
    }
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}
