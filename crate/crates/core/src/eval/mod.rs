//! Permutation-aware identifiability metrics and forecast errors.

mod assign;
mod metrics;

use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

pub use assign::{max_assignment, permutations, EXHAUSTIVE_MAX};
pub use metrics::{
    abs_correlation, cca_mcc, env_accuracy, forecast_errors, mcc, transition_mse, Correlation,
    MccResult,
};

use crate::error::{Error, Result};
use crate::gen::{ENVS, LATENTS_E, LATENTS_S, OBSERVATIONS, TRANSITION};
use crate::hmm::{Arhmm, ARHMM_FILE, ENVS_HAT};
use crate::io;
use crate::seqvae::{read_forecast, FORECAST, LATENTS_HAT};

pub const METRICS: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub correlation: Correlation,
}

/// Everything `eval` computes for one run; env fields are `None` without ground-truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mcc_s: f64,
    pub mcc_e: f64,
    pub mcc_all: f64,
    pub env_accuracy: Option<f64>,
    pub best_perm: Option<Vec<usize>>,
    pub a_mse: Option<f64>,
    pub forecast_mse: f64,
    pub forecast_mae: f64,
    /// `|corr(true_i, est_j)|` over the combined latents.
    pub correlation: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Mean canonical correlation after linear alignment; a diagnostic, not the raw MCC.
    pub linear_aligned_mcc: f64,
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "required file is missing"),
        ))
    }
}

/// Compares a run directory against the test split it was evaluated on.
///
/// `data` holds the ground truth (`observations.csv`, latents, and
/// optionally `envs.csv` and `transition.csv`); `run` holds the estimates
/// (`latents_hat.csv`, `forecast.csv`, and for environment metrics
/// `envs_hat.csv` and `arhmm.json`).
pub fn report(data: &Path, run: &Path, cfg: &EvalConfig) -> Result<MetricsReport> {
    for p in [
        data.join(OBSERVATIONS),
        data.join(LATENTS_S),
        data.join(LATENTS_E),
        run.join(LATENTS_HAT),
        run.join(FORECAST),
    ] {
        require(&p)?;
    }
    let (_, x) = io::read_series(&data.join(OBSERVATIONS))?;
    let (_, z_s) = io::read_series(&data.join(LATENTS_S))?;
    let (_, z_e) = io::read_series(&data.join(LATENTS_E))?;
    let (_, z_hat) = io::read_series(&run.join(LATENTS_HAT))?;
    let n_s = z_s.ncols();
    let truth =
        ndarray::concatenate(ndarray::Axis(1), &[z_s.view(), z_e.view()]).expect("equal lengths");
    if z_hat.dim() != truth.dim() {
        return Err(Error::parse(
            run.join(LATENTS_HAT),
            format!(
                "shape {:?} does not match the ground truth {:?}",
                z_hat.dim(),
                truth.dim()
            ),
        ));
    }
    let all = mcc(truth.view(), z_hat.view(), cfg.correlation)?;
    let block_s = mcc(z_s.view(), z_hat.slice(s![.., ..n_s]), cfg.correlation)?;
    let block_e = mcc(z_e.view(), z_hat.slice(s![.., n_s..]), cfg.correlation)?;
    let linear = cca_mcc(truth.view(), z_hat.view())?;

    let f = read_forecast(&run.join(FORECAST))?;
    if f.x_hat.ncols() != x.ncols() {
        return Err(Error::parse(
            run.join(FORECAST),
            "column count differs from the observations",
        ));
    }
    let mut actual = Array2::zeros(f.x_hat.dim());
    for (k, &t) in f.t.iter().enumerate() {
        if t >= x.nrows() {
            return Err(Error::parse(
                run.join(FORECAST),
                format!("time index {t} beyond the series"),
            ));
        }
        actual.row_mut(k).assign(&x.row(t));
    }
    let (forecast_mse, forecast_mae) = forecast_errors(actual.view(), f.x_hat.view())?;

    let (mut env_acc, mut best_perm, mut a_mse) = (None, None, None);
    if data.join(ENVS).is_file() {
        require(&run.join(ENVS_HAT))?;
        require(&run.join(ARHMM_FILE))?;
        let e_true = io::read_labels(&data.join(ENVS))?;
        let e_hat = io::read_labels(&run.join(ENVS_HAT))?;
        let hmm = Arhmm::load(&run.join(ARHMM_FILE))?;
        let (acc, perm) = env_accuracy(&e_true, &e_hat, hmm.n_states())?;
        if data.join(TRANSITION).is_file() {
            let a_true = io::read_matrix(&data.join(TRANSITION))?;
            a_mse = Some(transition_mse(&a_true, &hmm.transition, &perm)?);
        }
        env_acc = Some(acc);
        best_perm = Some(perm);
    }
    Ok(MetricsReport {
        mcc_s: block_s.score,
        mcc_e: block_e.score,
        mcc_all: all.score,
        env_accuracy: env_acc,
        best_perm,
        a_mse,
        forecast_mse,
        forecast_mae,
        correlation: all.correlation,
        assignment: all.assignment,
        linear_aligned_mcc: linear,
    })
}
