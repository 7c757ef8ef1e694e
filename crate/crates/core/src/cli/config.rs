use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::objective::LossWeights;
use crate::rain::RainRanges;
use crate::train::TrainConfig;

/// Name of the snapshot every command writes next to its outputs.
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

/// Everything a `dpaf` command can be configured with. Every section and
/// key is optional in the file; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing dataset to train or evaluate on. `ablate` synthesizes one in
    /// memory from the fields below when this is unset.
    pub manifest: Option<PathBuf>,
    pub pairs: usize,
    /// `[height, width]` of synthetic images.
    pub image_size: [usize; 2],
    pub seed: u64,
    /// Pairs at the end of the dataset reserved for evaluation by `ablate`.
    pub held_out: usize,
    pub ranges: RainRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: None, pairs: 200, image_size: [64, 64], seed: 0, held_out: 40, ranges: RainRanges::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Loss-weight sets to compare; empty means just `train.weights`.
    pub weight_sets: Vec<LossWeights>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { variants: vec![Variant::Full, Variant::AdditiveFusion], seeds: vec![1, 2, 3], weight_sets: Vec::new() }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err!("{}: {}", origin.display(), e.message()))
    }

    /// Reads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text, p)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Writes the fully materialized configuration into `dir`.
    pub fn save_effective(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
