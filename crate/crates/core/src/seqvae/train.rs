use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EnvLabels, FutureEnvs, TrainConfig};
use super::graph::{self, Batch};
use super::model::{ElboWeights, IdeaModel, ModelDims, Noise, Standardizer};
use super::ops::{breakdown, encode_means};
use crate::error::{ensure_finite, Error, Result};
use crate::gen::Dataset;
use crate::hmm::{em_fit, predict_env, viterbi, Arhmm, EmConfig, EmFit, EnvPrediction};
use crate::io;
use crate::substrate::{adam_step, AdamConfig, AdamState, Tape};

#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 10,
    Shuffle = 11,
    Noise = 12,
    Labels = 13,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Per-window means of the objective terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub rec: f64,
    pub pre: f64,
    pub kld_s: f64,
    pub kld_e: f64,
    pub total: f64,
    /// Mean squared lookback reconstruction error on the standardized scale.
    pub recon_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: IdeaModel,
    pub trace: Vec<EpochStats>,
}

#[derive(Debug, Clone)]
pub struct TwoPhase {
    pub hmm: EmFit,
    pub model: IdeaModel,
    pub trace: Vec<EpochStats>,
}

/// Back-to-back windows of the raw series used to fit the ARHMM.
pub fn hmm_windows(data: &Dataset) -> Vec<ArrayView2<'_, f64>> {
    let w = data.windowing.window;
    data.windowing
        .tiling(data.len())
        .into_iter()
        .map(|s| data.x.slice(s![s..s + w, ..]))
        .collect()
}

/// Environment labels for each training window.
pub fn window_labels(
    hmm: &Arhmm,
    data: &Dataset,
    starts: &[usize],
    mode: EnvLabels,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    match mode {
        EnvLabels::Viterbi => starts
            .iter()
            .map(|&s| viterbi(hmm, data.window(s)))
            .collect(),
        EnvLabels::Random => {
            let mut rng = stream(seed, Stream::Labels);
            let e = hmm.n_states();
            Ok(starts
                .iter()
                .map(|_| {
                    (0..data.windowing.window)
                        .map(|_| rng.random_range(0..e))
                        .collect()
                })
                .collect())
        }
    }
}

/// Phase two: fits the variational model with the ARHMM frozen.
///
/// The first `n_s` observation dimensions' worth of latents are stationary,
/// the remaining `n - n_s` nonstationary.
pub fn train_idea(
    train: &Dataset,
    hmm: &Arhmm,
    n_s: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainRun> {
    cfg.validate()?;
    train.validate()?;
    let n = train.n();
    if n_s == 0 || n_s >= n {
        return Err(Error::Config(format!("n_s = {n_s} must lie in 1..{n}")));
    }
    if hmm.n() != n {
        return Err(Error::contract(format!(
            "ARHMM models {} dims, data has {n}",
            hmm.n()
        )));
    }
    let w = train.windowing;
    let dims = ModelDims {
        n_s,
        n_e: n - n_s,
        n_envs: hmm.n_states(),
        window: w.window,
        t_split: w.t_split,
        hidden: cfg.hidden,
        prior_lag: cfg.prior_lag,
    };
    let weights = ElboWeights {
        alpha: cfg.alpha,
        beta: cfg.beta,
        gamma: cfg.gamma,
    };
    let standardizer = Standardizer::fit(train.x.view())?;
    let mut model = IdeaModel::new(
        dims,
        weights,
        standardizer,
        seed,
        &mut stream(seed, Stream::Init),
    )?;

    let starts = train.window_starts();
    if starts.is_empty() {
        return Err(Error::contract(
            "training series is shorter than one window",
        ));
    }
    let labels = window_labels(hmm, train, &starts, cfg.env_labels, seed)?;
    let x = model.standardizer.apply(train.x.view())?;

    let mut adam = AdamState::new(
        model.params.len(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut shuffle = stream(seed, Stream::Shuffle);
    let mut noise_rng = stream(seed, Stream::Noise);
    let mut order: Vec<usize> = (0..starts.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut sums = [0.0; 5];
        let (mut sq, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let views: Vec<_> = chunk
                .iter()
                .map(|&i| x.slice(s![starts[i]..starts[i] + w.window, ..]))
                .collect();
            let labs: Vec<_> = chunk.iter().map(|&i| labels[i].clone()).collect();
            let batch = Batch::new(&model, &views, &labs)?;
            let noise = Noise::sample(&dims, chunk.len(), &mut noise_rng);
            let mut tape = Tape::for_params(&model.params);
            let v = graph::elbo(&mut tape, &model.params, &model, &batch, &noise)?;
            let parts = breakdown(&tape, &v, &model)?;
            let loss = tape.scale(v.total, -1.0 / chunk.len() as f64);
            let grad = tape.backward(loss);
            for (acc, p) in
                sums.iter_mut()
                    .zip([parts.rec, parts.pre, parts.kld_s, parts.kld_e, parts.total])
            {
                *acc += p;
            }
            let recon = tape.value(v.recon);
            sq += (recon - &batch.past).mapv(|d| d * d).sum();
            count += recon.len();
            adam_step(model.params.values_mut(), &grad, &mut adam)?;
        }
        let m = starts.len() as f64;
        let stats = EpochStats {
            epoch,
            rec: sums[0] / m,
            pre: sums[1] / m,
            kld_s: sums[2] / m,
            kld_e: sums[3] / m,
            total: sums[4] / m,
            recon_mse: sq / count as f64,
        };
        ensure_finite("parameters", model.params.values().iter().sum())?;
        trace.push(stats);
    }
    Ok(TrainRun { model, trace })
}

/// Fits the ARHMM on the raw training series, freezes it, then trains the variational model.
pub fn train_two_phase(
    train: &Dataset,
    n_s: usize,
    hmm_cfg: &EmConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TwoPhase> {
    let fit = em_fit(&hmm_windows(train), hmm_cfg, seed)?;
    let run = train_idea(train, &fit.model, n_s, cfg, seed)?;
    Ok(TwoPhase {
        hmm: fit,
        model: run.model,
        trace: run.trace,
    })
}

/// Forecasts of several lookback windows plus the environment continuation of each.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `windows * horizon x n`, original scale, window-major.
    pub x_hat: Array2<f64>,
    pub envs: Vec<Vec<usize>>,
}

/// Posterior-mean rollout: encode, predict future latents, decode, undo the standardization.
pub fn forecast(
    model: &IdeaModel,
    hmm: &Arhmm,
    past: &[ArrayView2<f64>],
    mode: FutureEnvs,
    seed: u64,
) -> Result<Forecast> {
    let d = &model.dims;
    if !model.has_future() {
        return Err(Error::contract("model has a zero forecast horizon"));
    }
    if past.is_empty() {
        return Err(Error::contract("nothing to forecast"));
    }
    let mut x = Array2::zeros((past.len() * d.t_split, d.n()));
    for (w, p) in past.iter().enumerate() {
        if p.dim() != (d.t_split, d.n()) {
            return Err(Error::contract(format!(
                "lookback {w} has shape {:?}, expected {:?}",
                p.dim(),
                (d.t_split, d.n())
            )));
        }
        x.slice_mut(s![w * d.t_split..(w + 1) * d.t_split, ..])
            .assign(&model.standardizer.apply(p.view())?);
    }
    let mut tape = Tape::for_params(&model.params);
    let xv = tape.constant(x);
    let (qs, qe) = graph::encode(&mut tape, &model.params, model, xv, None)?;
    let (ps, pe) = graph::predict(
        &mut tape,
        &model.params,
        model,
        qs.z,
        qe.z,
        past.len(),
        None,
    )?;
    let out = graph::decode(&mut tape, &model.params, model, ps.z, pe.z, true)?;
    let x_hat = model.standardizer.invert(tape.value(out).view())?;
    let envs = past
        .iter()
        .enumerate()
        .map(|(w, p)| {
            let path = viterbi(hmm, p.view())?;
            let m = match mode {
                FutureEnvs::Argmax => EnvPrediction::Argmax,
                FutureEnvs::Sample => EnvPrediction::Sample(seed.wrapping_add(w as u64)),
            };
            predict_env(hmm, path[path.len() - 1], d.horizon(), m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Forecast { x_hat, envs })
}

/// Forecasts laid out along a series: row `k` predicts time `t[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesForecast {
    pub t: Vec<usize>,
    pub x_hat: Array2<f64>,
    pub envs: Vec<usize>,
}

/// Forecasts every back-to-back window of `x` from its lookback.
pub fn forecast_series(
    model: &IdeaModel,
    hmm: &Arhmm,
    x: ArrayView2<f64>,
    mode: FutureEnvs,
    seed: u64,
) -> Result<SeriesForecast> {
    let d = model.dims;
    if x.nrows() < d.window {
        return Err(Error::contract(format!(
            "series of length {} is shorter than one window ({})",
            x.nrows(),
            d.window
        )));
    }
    let starts: Vec<usize> = (0..=x.nrows() - d.window).step_by(d.window).collect();
    let mut t = Vec::new();
    let mut rows = Vec::new();
    let mut envs = Vec::new();
    for chunk in starts.chunks(256) {
        let past: Vec<_> = chunk
            .iter()
            .map(|&s| x.slice(s![s..s + d.t_split, ..]))
            .collect();
        let f = forecast(model, hmm, &past, mode, seed)?;
        rows.push(f.x_hat);
        for (&s, e) in chunk.iter().zip(f.envs) {
            t.extend(s + d.t_split..s + d.window);
            envs.extend(e);
        }
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let x_hat = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    Ok(SeriesForecast { t, x_hat, envs })
}

pub fn write_forecast(path: &Path, f: &SeriesForecast) -> Result<()> {
    let n = f.x_hat.ncols();
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|d| format!("xhat{d}")));
    header.push("e_hat".into());
    let rows =
        f.t.iter()
            .zip(f.x_hat.outer_iter())
            .zip(&f.envs)
            .map(|((t, row), e)| {
                let mut r = vec![t.to_string()];
                r.extend(row.iter().map(|&v| io::format_float(v)));
                r.push(e.to_string());
                r
            });
    io::write_csv(path, Some(&header), rows)
}

pub fn read_forecast(path: &Path) -> Result<SeriesForecast> {
    let (header, records) = io::read_csv(path, true)?;
    if header.len() < 3 || header[0] != "t" || header[header.len() - 1] != "e_hat" {
        return Err(Error::parse(path, "expected columns t,xhat0,...,e_hat"));
    }
    let n = header.len() - 2;
    let mut t = Vec::with_capacity(records.len());
    let mut envs = Vec::with_capacity(records.len());
    let mut x_hat = Array2::zeros((records.len(), n));
    for (k, rec) in records.iter().enumerate() {
        let bad = |what: &str| Error::parse(path, format!("row {}: bad {what}", k + 1));
        t.push(rec[0].parse().map_err(|_| bad("time index"))?);
        for d in 0..n {
            x_hat[[k, d]] = rec[d + 1].parse().map_err(|_| bad("value"))?;
        }
        envs.push(rec[n + 1].parse().map_err(|_| bad("environment"))?);
    }
    Ok(SeriesForecast { t, x_hat, envs })
}

pub fn write_trace(path: &Path, trace: &[EpochStats]) -> Result<()> {
    let header: Vec<String> = [
        "epoch",
        "rec",
        "pre",
        "kld_s",
        "kld_e",
        "total",
        "recon_mse",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = trace.iter().map(|e| {
        let mut r = vec![e.epoch.to_string()];
        r.extend([e.rec, e.pre, e.kld_s, e.kld_e, e.total, e.recon_mse].map(io::format_float));
        r
    });
    io::write_csv(path, Some(&header), rows)
}

/// Posterior means of `[z^s | z^e]` for every step of a raw series.
pub fn latents_hat(model: &IdeaModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let z = model.standardizer.apply(x)?;
    let (s, e) = encode_means(model, z.view())?;
    Ok(ndarray::concatenate(ndarray::Axis(1), &[s.view(), e.view()]).expect("equal lengths"))
}
