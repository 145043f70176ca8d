//! Run manifests: one JSON file per command invocation.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// `<crate version>+cfg.<config hash>`.
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
    /// Wall-clock measurements kept out of the deterministic outputs.
    #[serde(default)]
    pub timing: serde_json::Value,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            version: format!("{}+cfg.{config_hash}", env!("CARGO_PKG_VERSION")),
            started_unix: unix_now(),
            finished_unix: 0.0,
            outputs: Vec::new(),
            timing: serde_json::Value::Null,
        }
    }

    /// File name of this manifest inside the output directory.
    pub fn file_name(&self) -> String {
        format!("manifest_{}.json", self.command.replace(' ', "_"))
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<PathBuf, CliError> {
        self.finished_unix = unix_now();
        let path = out_dir.join(self.file_name());
        std::fs::write(&path, serde_json::to_vec_pretty(&self).expect("manifest serializes"))?;
        Ok(path)
    }
}
