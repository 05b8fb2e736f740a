use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::graph::{self, Batch, Head};
use super::model::{IdeaModel, Noise};
use crate::error::{ensure_finite, Error, Result};
use crate::substrate::{ParamVector, Tape, Var};

/// Gaussian posterior parameters and the sample drawn from them, stacked window-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Array2<f64>,
    pub logvar: Array2<f64>,
    pub sample: Array2<f64>,
}

impl Posterior {
    fn read(tape: &Tape, h: &Head) -> Self {
        Self {
            mean: tape.value(h.mean).clone(),
            logvar: tape.value(h.logvar).clone(),
            sample: tape.value(h.z).clone(),
        }
    }
}

/// Stationary and nonstationary latent blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub s: Posterior,
    pub e: Posterior,
}

/// Terms of the objective, summed over the windows it was evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ElboBreakdown {
    pub rec: f64,
    pub pre: f64,
    pub kld_s: f64,
    pub kld_e: f64,
    pub total: f64,
}

impl ElboBreakdown {
    /// Reassembles `pre + alpha rec - beta kld_s - gamma kld_e` from the parts.
    pub fn recompute(&self, alpha: f64, beta: f64, gamma: f64) -> f64 {
        self.pre + self.rec * alpha - self.kld_s * beta - self.kld_e * gamma
    }
}

fn stack_rows(model: &IdeaModel, windows: &[ArrayView2<f64>], len: usize) -> Result<Array2<f64>> {
    let n = model.dims.n();
    let mut x = Array2::zeros((windows.len() * len, n));
    for (w, win) in windows.iter().enumerate() {
        if win.dim() != (len, n) {
            return Err(Error::contract(format!(
                "window {w} has shape {:?}, expected {:?}",
                win.dim(),
                (len, n)
            )));
        }
        x.slice_mut(ndarray::s![w * len..(w + 1) * len, ..])
            .assign(win);
    }
    Ok(x)
}

/// Posteriors over `z^s_{1:t}` and `z^e_{1:t}` for lookback windows of length `t_split`.
pub fn encode(model: &IdeaModel, past: &[ArrayView2<f64>], noise: &Noise) -> Result<Latents> {
    let x = stack_rows(model, past, model.dims.t_split)?;
    noise.check(&model.dims, past.len())?;
    let mut tape = Tape::for_params(&model.params);
    let x = tape.constant(x);
    let (s, e) = graph::encode(
        &mut tape,
        &model.params,
        model,
        x,
        Some((&noise.enc_s, &noise.enc_e)),
    )?;
    Ok(Latents {
        s: Posterior::read(&tape, &s),
        e: Posterior::read(&tape, &e),
    })
}

/// Posterior means for every row of a standardized series.
pub fn encode_means(model: &IdeaModel, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    if x.ncols() != model.dims.n() {
        return Err(Error::contract(format!(
            "series has {} columns, expected {}",
            x.ncols(),
            model.dims.n()
        )));
    }
    let mut tape = Tape::for_params(&model.params);
    let xv = tape.constant(x.to_owned());
    let (s, e) = graph::encode(&mut tape, &model.params, model, xv, None)?;
    Ok((tape.value(s.mean).clone(), tape.value(e.mean).clone()))
}

/// Future latents `z_{t+1:T}` from lookback samples (`windows * t_split` rows each).
pub fn predict_latents(
    model: &IdeaModel,
    z_s: &Array2<f64>,
    z_e: &Array2<f64>,
    noise: &Noise,
) -> Result<Latents> {
    let d = &model.dims;
    let b = z_s.nrows() / d.t_split;
    if z_s.dim() != (b * d.t_split, d.n_s) || z_e.dim() != (b * d.t_split, d.n_e) || b == 0 {
        return Err(Error::contract(format!(
            "lookback latents have shapes {:?} / {:?}",
            z_s.dim(),
            z_e.dim()
        )));
    }
    noise.check(d, b)?;
    let mut tape = Tape::for_params(&model.params);
    let zs = tape.constant(z_s.clone());
    let ze = tape.constant(z_e.clone());
    let (s, e) = graph::predict(
        &mut tape,
        &model.params,
        model,
        zs,
        ze,
        b,
        Some((&noise.pred_s, &noise.pred_e)),
    )?;
    Ok(Latents {
        s: Posterior::read(&tape, &s),
        e: Posterior::read(&tape, &e),
    })
}

fn run_decoder(
    model: &IdeaModel,
    z_s: &Array2<f64>,
    z_e: &Array2<f64>,
    future: bool,
) -> Result<Array2<f64>> {
    let d = &model.dims;
    if z_s.ncols() != d.n_s || z_e.ncols() != d.n_e || z_s.nrows() != z_e.nrows() {
        return Err(Error::contract(format!(
            "latent blocks have shapes {:?} / {:?}",
            z_s.dim(),
            z_e.dim()
        )));
    }
    let mut tape = Tape::for_params(&model.params);
    let zs = tape.constant(z_s.clone());
    let ze = tape.constant(z_e.clone());
    let out = graph::decode(&mut tape, &model.params, model, zs, ze, future)?;
    Ok(tape.value(out).clone())
}

/// Reconstruction `F_x` of lookback observations, row by row.
pub fn decode(model: &IdeaModel, z_s: &Array2<f64>, z_e: &Array2<f64>) -> Result<Array2<f64>> {
    run_decoder(model, z_s, z_e, false)
}

/// Future predictor `F_y`, row by row.
pub fn forecast_decode(
    model: &IdeaModel,
    z_s: &Array2<f64>,
    z_e: &Array2<f64>,
) -> Result<Array2<f64>> {
    run_decoder(model, z_s, z_e, true)
}

/// Per-element log densities of one stationary trajectory (`len x n_s`).
/// The first `prior_lag` rows are scored under a standard normal.
pub fn stationary_prior_terms(model: &IdeaModel, traj: ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = &model.dims;
    if traj.ncols() != d.n_s || traj.nrows() < d.prior_lag + 1 {
        return Err(Error::contract(format!(
            "stationary trajectory has shape {:?}; need at least {} rows of width {}",
            traj.dim(),
            d.prior_lag + 1,
            d.n_s
        )));
    }
    let mut tape = Tape::for_params(&model.params);
    let z = tape.constant(traj.to_owned());
    let (head, tail, order) =
        graph::stationary_terms(&mut tape, &model.params, model, z, 1, traj.nrows())?;
    let both = tape.concat_rows(&[head, tail]);
    let terms = tape.gather_rows(both, order);
    Ok(tape.value(terms).clone())
}

fn column_sums(terms: &Array2<f64>) -> f64 {
    terms.columns().into_iter().map(|c| c.sum()).sum()
}

/// Log density of a stationary trajectory; equals the sum of per-dimension scores.
pub fn stationary_prior_logp(model: &IdeaModel, traj: ArrayView2<f64>) -> Result<f64> {
    Ok(column_sums(&stationary_prior_terms(model, traj)?))
}

/// Per-element log densities of nonstationary latents (`len x n_e`) under labels `envs`.
pub fn nonstationary_prior_terms(
    model: &IdeaModel,
    traj: ArrayView2<f64>,
    envs: &[usize],
) -> Result<Array2<f64>> {
    let d = &model.dims;
    if traj.ncols() != d.n_e || traj.nrows() != envs.len() {
        return Err(Error::contract(format!(
            "nonstationary trajectory has shape {:?} with {} labels",
            traj.dim(),
            envs.len()
        )));
    }
    if let Some(&bad) = envs.iter().find(|&&e| e >= d.n_envs) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {} environments",
            d.n_envs
        )));
    }
    let mut tape = Tape::for_params(&model.params);
    let z = tape.constant(traj.to_owned());
    let terms = graph::nonstationary_terms(&mut tape, &model.params, model, z, envs)?;
    Ok(tape.value(terms).clone())
}

pub fn nonstationary_prior_logp(
    model: &IdeaModel,
    traj: ArrayView2<f64>,
    envs: &[usize],
) -> Result<f64> {
    Ok(column_sums(&nonstationary_prior_terms(model, traj, envs)?))
}

/// Objective on standardized windows of length `window` with per-step labels.
pub fn elbo(
    model: &IdeaModel,
    windows: &[ArrayView2<f64>],
    envs: &[Vec<usize>],
    noise: &Noise,
) -> Result<ElboBreakdown> {
    let batch = Batch::new(model, windows, envs)?;
    let mut tape = Tape::for_params(&model.params);
    let v = graph::elbo(&mut tape, &model.params, model, &batch, noise)?;
    breakdown(&tape, &v, model)
}

pub(crate) fn breakdown(
    tape: &Tape,
    v: &graph::ElboVars,
    model: &IdeaModel,
) -> Result<ElboBreakdown> {
    let mut out = ElboBreakdown {
        rec: ensure_finite("rec", tape.scalar(v.rec))?,
        pre: ensure_finite("pre", tape.scalar(v.pre))?,
        kld_s: ensure_finite("kld_s", tape.scalar(v.kld_s))?,
        kld_e: ensure_finite("kld_e", tape.scalar(v.kld_e))?,
        total: 0.0,
    };
    let w = model.weights;
    out.total = ensure_finite("total", out.recompute(w.alpha, w.beta, w.gamma))?;
    Ok(out)
}

/// Negative objective averaged over the batch, recorded on `tape` with the
/// weights taken from `params`.
pub fn negative_elbo(
    tape: &mut Tape,
    params: &ParamVector,
    model: &IdeaModel,
    batch: &Batch,
    noise: &Noise,
) -> Result<Var> {
    let v = graph::elbo(tape, params, model, batch, noise)?;
    Ok(tape.scale(v.total, -1.0 / batch.windows as f64))
}
