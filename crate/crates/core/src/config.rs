//! One TOML file drives every command: generation, ARHMM fitting, training
//! and evaluation, plus default data and run directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::gen::{GenConfig, Windowing};
use crate::hmm::EmConfig;
use crate::seqvae::TrainConfig;

/// File name of the configuration echoed into every output directory.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub run: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub gen: GenConfig,
    pub hmm: EmConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.hmm.validate()?;
        self.train.validate()?;
        if self.hmm.n_states != self.gen.n_envs {
            return Err(Error::Config(format!(
                "hmm.n_states = {} but gen.n_envs = {}",
                self.hmm.n_states, self.gen.n_envs
            )));
        }
        Ok(())
    }

    /// Parses and validates; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_ECHO);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn windowing(&self) -> Windowing {
        Windowing {
            window: self.gen.window,
            t_split: self.gen.t_split,
            stride: self.gen.stride,
        }
    }
}
