//! The JSON configuration shared by all commands.

use std::path::{Path, PathBuf};

use cpicl::eval::ExperimentConfig;
use cpicl::lsa::TrainConfig;
use cpicl::scaling::{DEFAULT_LAMBDA_ASYM, DEFAULT_STARTS};
use cpicl::taskgen::GenConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingConfig {
    pub lambda_asym: f64,
    pub n_starts: usize,
    /// Training FLOP budgets swept by `scaling sweep`.
    pub budgets: Vec<u64>,
    /// Depths trained at every budget.
    pub layers: Vec<usize>,
    /// Budgets for `scaling allocate`.
    pub allocate: Vec<f64>,
    /// Datapoint CSV read by `scaling fit`; `<out>/scaling_data.csv` when unset.
    pub data: Option<PathBuf>,
    /// Fit JSON read by `scaling allocate`; `<out>/scaling_fit.json` when unset.
    pub fit: Option<PathBuf>,
    pub contour_points: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            lambda_asym: DEFAULT_LAMBDA_ASYM,
            n_starts: DEFAULT_STARTS,
            budgets: vec![100_000_000, 1_000_000_000],
            layers: vec![1, 2, 3, 4],
            allocate: vec![1e8, 1e9],
            data: None,
            fit: None,
            contour_points: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
    pub scaling: ScalingConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Copies the task distribution into the sections that embed it.
    pub fn propagate_gen(&mut self) {
        self.train.gen = self.gen.clone();
        self.experiment.gen = self.gen.clone();
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
