//! The run configuration: one JSON document, with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sonoresnet::data::synth::SynthConfig;
use sonoresnet::data::{AugmentConfig, Ratios};
use sonoresnet::model::NetworkConfig;
use sonoresnet::train::TrainConfig;
use sonoresnet::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `US_Pictures/`.
    pub dataset_root: PathBuf,
    pub labels_csv: PathBuf,
    pub manifest_path: PathBuf,
    /// Checkpoints, logs, reports and heatmaps.
    pub output_dir: PathBuf,
    /// Seed for splitting and synthetic data; `--seed` also overrides the
    /// component seeds below.
    pub seed: u64,
    pub ratios: Ratios,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: "data".into(),
            labels_csv: "data/labels.csv".into(),
            manifest_path: "data/manifest.json".into(),
            output_dir: "runs".into(),
            seed: 0,
            ratios: Ratios::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Uses one seed for every random stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.network.seed = seed;
        self.train.seed = seed;
        self.augment.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.ratios.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }
}
