use std::path::{Path, PathBuf};

use clap::ValueEnum;
use relbev_core::geometry::BevGridSpec;
use relbev_core::model::ModelConfig;
use relbev_core::sim::SceneConfig;
use relbev_core::train::{toy_scene_config, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Corrupt {
    #[default]
    None,
    /// Deterministic single-view corruption keyed by the scene id.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GridPreset {
    M2i,
    Desk,
}

impl GridPreset {
    pub fn spec(self) -> BevGridSpec {
        match self {
            GridPreset::M2i => BevGridSpec::m2i(),
            GridPreset::Desk => BevGridSpec::desk(),
        }
    }
}

/// Contents of a `--config` file. Every field is optional; flags win over
/// file values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: Option<SceneConfig>,
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub corrupt: Option<Corrupt>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Parameter file written by `train-toy`.
    pub weights: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("malformed config {}: {e}", path.display())))?;
        if let Some(w) = &cfg.weights {
            if !w.exists() {
                return Err(CliError::usage(format!("weights file {} does not exist", w.display())));
            }
        }
        if let Some(m) = &cfg.model {
            m.validate()?;
        }
        Ok(cfg)
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn model(&self) -> ModelConfig {
        self.model.clone().unwrap_or_default()
    }

    pub fn scene(&self, seed: u64, grid: Option<GridPreset>) -> Result<SceneConfig, CliError> {
        let mut sc = self.scene.clone().unwrap_or_else(|| toy_scene_config(seed));
        sc.seed = seed;
        if let Some(g) = grid {
            sc.grid = g.spec();
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf).or_else(|| self.out.clone()).unwrap_or_else(|| PathBuf::from("out"))
    }
}
