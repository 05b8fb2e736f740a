//! Autoregressive hidden Markov model: log-space inference, Viterbi
//! decoding, Baum-Welch fitting and environment continuation.

mod em;
mod kmeans;
mod model;

pub use em::{em_fit, tile, EmConfig, EmFit, InitKind, RestartTrace};
pub use model::{
    emission_table, loglik, path_log_prob, posterior_smooth, predict_env, random_model, viterbi,
    Arhmm, Emission, EnvPrediction, Posteriors, LOGVAR_FLOOR,
};

pub const ARHMM_FILE: &str = "arhmm.json";
pub const ENVS_HAT: &str = "envs_hat.csv";
pub const HMM_TRACE: &str = "hmm_trace.csv";

use std::path::Path;

use crate::error::Result;
use crate::io::{self, format_float};

/// `restart,iter,loglik` rows for every restart.
pub fn write_trace(path: &Path, fit: &EmFit) -> Result<()> {
    let header = [
        "restart".to_string(),
        "iter".to_string(),
        "loglik".to_string(),
    ];
    let rows = fit.traces.iter().enumerate().flat_map(|(r, tr)| {
        tr.loglik
            .iter()
            .enumerate()
            .map(move |(i, &ll)| vec![r.to_string(), i.to_string(), format_float(ll)])
    });
    io::write_csv(path, Some(&header), rows)
}
