use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source of the environment labels that condition the nonstationary prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnvLabels {
    /// Viterbi path of the frozen ARHMM on each window.
    #[default]
    Viterbi,
    /// Uniform random labels; an ablation that discards environment information.
    Random,
}

/// How future environments are continued when forecasting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FutureEnvs {
    #[default]
    Argmax,
    Sample,
}

/// Optimisation and objective settings for the variational model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the lookback reconstruction term.
    pub alpha: f64,
    /// Weight of the stationary KL term.
    pub beta: f64,
    /// Weight of the nonstationary KL term.
    pub gamma: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Windows per gradient step.
    pub batch: usize,
    /// Width of every hidden layer.
    pub hidden: usize,
    /// History length seen by the stationary prior.
    pub prior_lag: usize,
    pub env_labels: EnvLabels,
    pub future_envs: FutureEnvs,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.02,
            gamma: 0.02,
            lr: 1e-3,
            epochs: 50,
            batch: 64,
            hidden: 64,
            prior_lag: 1,
            env_labels: EnvLabels::Viterbi,
            future_envs: FutureEnvs::Argmax,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lr", self.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "train.{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("hidden", self.hidden),
            ("prior_lag", self.prior_lag),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be at least 1")));
            }
        }
        Ok(())
    }
}
