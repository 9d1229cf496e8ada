use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::teachers::{DatasetConfig, Split, TeacherConfig};
use crate::training::TrainConfig;

/// Which checkpoint `eval` loads from a run directory.
pub const DEFAULT_EVAL_CHECKPOINT: &str = "best";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// `best`, `last`, or a path to a checkpoint file.
    pub checkpoint: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            checkpoint: DEFAULT_EVAL_CHECKPOINT.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    /// Directory written by `gen-data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

/// Every setting a command reads, one TOML section per module.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub teachers: TeacherConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Configuration(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Configuration(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The file at `path`, or defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelKind;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = RunConfig::from_toml("[train]\nmodel = \"cascaded\"\nkeywords = 2\n").unwrap();
        assert_eq!(c.train.model, ModelKind::Cascaded);
        assert_eq!(c.train.keywords, 2);
        assert_eq!(c.teachers, TeacherConfig::default());
        assert_eq!(c.eval.split, Split::Test);
    }

    #[test]
    fn unknown_keys_are_configuration_errors() {
        let err = RunConfig::from_toml("[train]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(matches!(err, Error::Configuration(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.paths.data = Some(PathBuf::from("data/desk"));
        c.teachers.image_noise = 0.125;
        c.train.peak_lr = 3.0e-4;
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert!(text.contains("[teachers]") && text.contains("[paths]"));
    }
}
