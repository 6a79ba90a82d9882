use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use crossmodal::data::GeneratorConfig;
use crossmodal::model::ModelDims;
use crossmodal::train::TrainConfig;
use crossmodal::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Ranks scored per query; absent means the whole gallery.
    pub r: Option<usize>,
    pub normalize: bool,
    /// In-domain queries leave their own row out of the gallery.
    pub exclude_self: bool,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            r: None,
            normalize: true,
            exclude_self: true,
            split: Split::Test,
        }
    }
}

/// Everything a run needs, as read from the TOML config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    pub data: GeneratorConfig,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn in_section(section: &str, err: Error) -> anyhow::Error {
    match err {
        Error::Config { key, msg } => anyhow::anyhow!("invalid config `{section}.{key}`: {msg}"),
        other => other.into(),
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config file {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| in_section("data", e))?;
        self.model.validate().map_err(|e| in_section("model", e))?;
        self.train.validate().map_err(|e| in_section("train", e))?;
        if self.eval.r == Some(0) {
            bail!("invalid config `eval.r`: must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join("resolved_config.toml");
        fs::write(&path, self.to_toml()).with_context(|| format!("cannot write {}", path.display()))
    }
}
