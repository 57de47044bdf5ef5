//! JSON description of one experiment, written next to its CSV.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Serialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub artifact_version: &'static str,
    pub seed: u64,
    /// Everything needed to rerun: dataset, hyperparameters, attack grid.
    pub params: Value,
    pub metrics: Value,
}

impl ExperimentRecord {
    pub fn new(experiment: &str, seed: u64, params: Value, metrics: Value) -> Self {
        Self {
            experiment: experiment.to_string(),
            artifact_version: env!("CARGO_PKG_VERSION"),
            seed,
            params,
            metrics,
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(path, text + "\n")
    }
}

/// `out.csv` -> `out.json`.
pub fn sidecar(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}
