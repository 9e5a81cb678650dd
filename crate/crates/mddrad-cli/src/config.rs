//! Run-configuration file schema and dataset resolution shared by the
//! `train` and `matrix` subcommands.

use std::path::{Path, PathBuf};

use mddrad_core::synthdata::{load_dataset, make_domain_pair, preset};
use mddrad_core::{
    DomainPair, MddError, ModelConfig, RadarConfigSpec, Result, TrainingConfig,
};
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "MDD_DATA_DIR";

/// Fixed file names inside a dataset directory, as written by `generate`.
pub const DATASET_FILES: [&str; 4] = ["s_train.bin", "t_train.bin", "s_test.bin", "t_test.bin"];

/// JSON run configuration; unknown keys are rejected so typos fail fast.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub training: TrainingConfig,
    /// Network architecture; defaults to the desk-scale CNN when omitted.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub data: DataSpec,
    /// Steps for the bound-component estimators in the summary.
    #[serde(default)]
    pub estimate: EstimateSpec,
}

/// Where the four dataset splits come from: either a directory of files
/// produced by `generate`, or a preset pair synthesized on the fly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub config_s: Option<String>,
    #[serde(default)]
    pub config_t: Option<String>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_n_train() -> usize {
    200
}
fn default_n_test() -> usize {
    80
}
fn default_k() -> usize {
    5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSpec {
    pub adversary_steps: usize,
    pub lambda_steps: usize,
}

impl Default for EstimateSpec {
    fn default() -> Self {
        EstimateSpec {
            adversary_steps: 300,
            lambda_steps: 500,
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            MddError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| MddError::contract(format!("{}: {e}", path.display())))?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model
            .clone()
            .unwrap_or_else(|| ModelConfig::desk(self.data.k))
    }
}

/// Resolve a config argument: a preset name (I-IV) or a path to a JSON
/// `RadarConfigSpec` file.
pub fn resolve_radar_config(name: &str) -> Result<RadarConfigSpec> {
    if let Some(cfg) = preset(name) {
        return Ok(cfg);
    }
    let path = Path::new(name);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        let cfg: RadarConfigSpec = serde_json::from_str(&text)
            .map_err(|e| MddError::Format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        return Ok(cfg);
    }
    Err(MddError::contract(format!(
        "unknown preset '{name}' (expected I, II, III, IV or a config file path)"
    )))
}

/// Default dataset root: `MDD_DATA_DIR` when set, else the working directory.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Materialize the four splits: load them from `data.dir` (or the data
/// root) when no presets are given, otherwise generate them in memory from
/// the preset pair, seeded by the training seed.
pub fn resolve_pair(cfg: &RunConfigFile, model: &ModelConfig) -> Result<DomainPair> {
    match (&cfg.data.config_s, &cfg.data.config_t) {
        (Some(s), Some(t)) => {
            let cfg_s = resolve_radar_config(s)?;
            let cfg_t = resolve_radar_config(t)?;
            make_domain_pair(
                &cfg_s,
                &cfg_t,
                cfg.data.n_train,
                cfg.data.n_test,
                cfg.data.k,
                cfg.training.seed,
                model.input_h,
                model.input_w,
            )
        }
        (None, None) => {
            let dir = cfg.data.dir.clone().unwrap_or_else(data_root);
            let load = |file: &str| load_dataset(&dir.join(file));
            Ok(DomainPair {
                s_train: load(DATASET_FILES[0])?,
                t_train: load(DATASET_FILES[1])?,
                s_test: load(DATASET_FILES[2])?,
                t_test: load(DATASET_FILES[3])?,
            })
        }
        _ => Err(MddError::contract(
            "data: set both config_s and config_t, or neither (directory mode)",
        )),
    }
}
