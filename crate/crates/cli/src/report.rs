use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Seconds since the Unix epoch. Excluded from reproducibility checks.
    pub timestamp: u64,
    pub version: String,
    pub inferred_hyperparameters: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: Value,
    pub results: Value,
    pub provenance: Provenance,
}

/// Flag attached to every hyperparameter that was not stated but recovered
/// from published parameter counts.
pub const INFERRED_FLAG: &str = "inferred-from-Table-1";

impl RunReport {
    pub fn new(command: &str, config: Value, results: Value, seed: u64, inferred: Vec<String>) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self {
            command: command.to_string(),
            config,
            results,
            provenance: Provenance {
                seed,
                timestamp,
                version: env!("CARGO_PKG_VERSION").to_string(),
                inferred_hyperparameters: inferred.into_iter().map(|h| format!("{h} ({INFERRED_FLAG})")).collect(),
            },
        }
    }

    /// Compact JSON of the results section alone.
    pub fn results_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.results).expect("json value serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json_pretty())?;
        Ok(())
    }
}
