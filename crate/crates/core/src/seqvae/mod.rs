//! Sequential variational model with separate stationary and nonstationary
//! latent blocks, modular conditional-affine priors, and a two-phase trainer
//! that freezes a fitted ARHMM before optimising the objective.

mod config;
mod graph;
mod model;
mod ops;
mod train;

pub use config::{EnvLabels, FutureEnvs, TrainConfig};
pub use graph::Batch;
pub use model::{
    raw_logvar, DEC_X, DEC_Y, ENC_E, ENC_S, OUTPUT_INIT_SCALE, PRED_E, PRED_S, PRIOR_E, PRIOR_S,
};
pub use model::{
    ElboWeights, IdeaModel, ModelDims, Noise, Standardizer, HIDDEN_SLOPE, LOGVAR_MIN, OBS_LOGVAR,
    SIGMA_FLOOR,
};
pub use ops::{
    decode, elbo, encode, encode_means, forecast_decode, negative_elbo, nonstationary_prior_logp,
    nonstationary_prior_terms, predict_latents, stationary_prior_logp, stationary_prior_terms,
    ElboBreakdown, Latents, Posterior,
};
pub use train::{
    forecast, forecast_series, hmm_windows, latents_hat, read_forecast, train_idea,
    train_two_phase, window_labels, write_forecast, write_trace, EpochStats, Forecast,
    SeriesForecast, TrainRun, TwoPhase,
};

pub const IDEA_MODEL: &str = "idea_model.json";
pub const TRACE: &str = "trace.csv";
pub const FORECAST: &str = "forecast.csv";
pub const LATENTS_HAT: &str = "latents_hat.csv";
