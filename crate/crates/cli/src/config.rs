use std::path::{Path, PathBuf};

use gatefuse::data::SyntheticSpec;
use gatefuse::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// File locations; relative paths are taken as given (relative to the
/// working directory).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Directory for metrics and prediction CSVs when no explicit path is given.
    pub output_dir: Option<PathBuf>,
}

/// The `--config` document. Every section and field is optional.
///
/// ```json
/// {
///   "train": { "lr": 0.0005, "epochs": 75, "ablation": "b6" },
///   "synth": { "n_videos": 200, "mode": "xor", "modality_noise": [0.15, 0.15, 0.15] },
///   "paths": { "train": "train.jsonl", "val": "val.jsonl", "checkpoint": "model.ckpt" }
/// }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Defaults, overlaid by the config file, overlaid by `--seed`.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        Ok(cfg)
    }

    pub fn output_path(&self, explicit: Option<&Path>, file: &str) -> PathBuf {
        match explicit {
            Some(p) => p.to_path_buf(),
            None => self
                .paths
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("."))
                .join(file),
        }
    }
}
