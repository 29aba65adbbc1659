//! Per-command run manifests.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::to_toml;
use crate::error::{io_err, Error, Result};
use crate::fsutil::write_string_atomic;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigRef {
    pub role: String,
    pub path: PathBuf,
    /// First 16 hex digits of the SHA-256 of the file bytes.
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub configs: Vec<ConfigRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub artifacts: Vec<PathBuf>,
    pub exit_status: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            configs: Vec::new(),
            seed: None,
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            artifacts: Vec::new(),
            exit_status: 0,
            error: None,
        }
    }

    pub fn add_config(&mut self, role: &str, path: &Path) -> Result<()> {
        self.configs.push(ConfigRef {
            role: role.to_string(),
            path: path.to_path_buf(),
            hash: file_hash(path)?,
        });
        Ok(())
    }

    /// Stamps the end time and writes `manifest.toml` into `dir`.
    ///
    /// A run reported as successful must name only artifacts that exist;
    /// otherwise it is recorded as failed and an integrity error returned.
    pub fn finish(mut self, dir: &Path, outcome: std::result::Result<(), String>) -> Result<RunManifest> {
        self.finished_unix_ms = now_ms();
        let missing = outcome
            .is_ok()
            .then(|| self.artifacts.iter().find(|a| !a.exists()).cloned())
            .flatten();
        let outcome = match &missing {
            Some(m) => Err(format!("declared artifact {} is missing", m.display())),
            None => outcome,
        };
        if let Err(e) = outcome {
            self.exit_status = 1;
            self.error = Some(e);
        }
        write_string_atomic(&dir.join(MANIFEST_FILE), &to_toml(&self))?;
        if let Some(m) = missing {
            return Err(Error::Integrity {
                path: m,
                message: "declared artifact is missing".into(),
            });
        }
        Ok(self)
    }
}
