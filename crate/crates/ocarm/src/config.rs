//! TOML config files: one per concern plus a composite for matrix runs.

use std::path::Path;

use ocarm_core::datagen::GenConfig;
use ocarm_core::model::ModelConfig;
use ocarm_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Environment variable overriding the default run root.
pub const RUN_ROOT_ENV: &str = "OCARM_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";

pub fn run_root() -> std::path::PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(Into::into)
        .unwrap_or_else(|| DEFAULT_RUN_ROOT.into())
}

pub fn parse_toml<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::ConfigFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_toml(&text, path)
}

pub fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config values serialize to TOML")
}

pub fn load_gen_config(path: &Path) -> Result<GenConfig> {
    let c: GenConfig = read_toml(path)?;
    c.validate()?;
    Ok(c)
}

pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let c: ModelConfig = read_toml(path)?;
    c.validate()?;
    Ok(c)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let c: TrainConfig = read_toml(path)?;
    c.validate()?;
    Ok(c)
}

/// Everything a matrix run needs.
///
/// The generator seed fixes the dataset; the matrix seeds only vary
/// training, so every row is compared on the same data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub seeds: Vec<u64>,
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl MatrixConfig {
    pub fn for_gen(gen: GenConfig) -> Self {
        let model = ModelConfig::for_data(&gen);
        let (stage1, stage2) = default_train_configs();
        MatrixConfig {
            seeds: vec![1, 2, 3],
            gen,
            model,
            stage1,
            stage2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ocarm_core::Error::Config(m).into());
        if self.seeds.is_empty() {
            return fail("`seeds` must not be empty".into());
        }
        self.gen.validate()?;
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.stage != 1 || self.stage2.stage != 2 {
            return fail("`stage1.stage` must be 1 and `stage2.stage` must be 2".into());
        }
        if let Some(field) = data_mismatch(&self.model, &self.gen) {
            return fail(format!("`model.{field}` does not match the generator config"));
        }
        Ok(())
    }
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig::for_gen(GenConfig::default())
    }
}

pub fn load_matrix_config(path: &Path) -> Result<MatrixConfig> {
    let c: MatrixConfig = read_toml(path)?;
    c.validate()?;
    Ok(c)
}

/// Training defaults used by the matrix: small batches and four epochs in
/// both stages, so Base and the stage-2 backbones get the same budget.
pub fn default_train_configs() -> (TrainConfig, TrainConfig) {
    let stage1 = TrainConfig {
        stage: 1,
        epochs: 4,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let stage2 = TrainConfig {
        stage: 2,
        ..stage1.clone()
    };
    (stage1, stage2)
}

/// First data-derived model field that disagrees with `gen`.
pub fn data_mismatch(model: &ModelConfig, gen: &GenConfig) -> Option<&'static str> {
    let d = ModelConfig::for_data(gen);
    if model.vocab_size != d.vocab_size {
        Some("vocab_size")
    } else if model.profile_cardinalities != d.profile_cardinalities {
        Some("profile_cardinalities")
    } else if model.profile_dense_dim != d.profile_dense_dim {
        Some("profile_dense_dim")
    } else if model.n_days != d.n_days {
        Some("n_days")
    } else if model.tasks != d.tasks {
        Some("tasks")
    } else {
        None
    }
}
