//! Computation graphs on a [`Tape`]. Row layouts are window-major: row
//! `w * len + tau` holds step `tau` of window `w`.

use ndarray::{Array2, ArrayView2};

use super::model::{
    IdeaModel, Noise, DEC_X, DEC_Y, ENC_E, ENC_S, LOGVAR_MIN, OBS_LOGVAR, PRED_E, PRED_S, PRIOR_E,
    PRIOR_S, SIGMA_FLOOR,
};
use crate::error::{Error, Result};
use crate::substrate::{softplus, Mlp, ParamVector, Tape, Var};

/// A batch of whole windows, already standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub windows: usize,
    /// `windows * t_split x n`.
    pub past: Array2<f64>,
    /// `windows * horizon x n`.
    pub future: Array2<f64>,
    /// `windows * window` environment labels, window-major.
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(
        model: &IdeaModel,
        windows: &[ArrayView2<f64>],
        labels: &[Vec<usize>],
    ) -> Result<Self> {
        let d = &model.dims;
        if windows.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if labels.len() != windows.len() {
            return Err(Error::contract(format!(
                "{} windows but {} label sequences",
                windows.len(),
                labels.len()
            )));
        }
        let n = d.n();
        let mut past = Array2::zeros((windows.len() * d.t_split, n));
        let mut future = Array2::zeros((windows.len() * d.horizon(), n));
        let mut flat = Vec::with_capacity(windows.len() * d.window);
        for (w, (x, lab)) in windows.iter().zip(labels).enumerate() {
            if x.dim() != (d.window, n) {
                return Err(Error::contract(format!(
                    "window {w} has shape {:?}, expected {:?}",
                    x.dim(),
                    (d.window, n)
                )));
            }
            if lab.len() != d.window {
                return Err(Error::contract(format!(
                    "window {w} has {} labels, expected {}",
                    lab.len(),
                    d.window
                )));
            }
            if let Some(&bad) = lab.iter().find(|&&e| e >= d.n_envs) {
                return Err(Error::contract(format!(
                    "label {bad} out of range for {} environments",
                    d.n_envs
                )));
            }
            for tau in 0..d.window {
                let row = x.row(tau);
                if tau < d.t_split {
                    past.row_mut(w * d.t_split + tau).assign(&row);
                } else {
                    future
                        .row_mut(w * d.horizon() + tau - d.t_split)
                        .assign(&row);
                }
            }
            flat.extend_from_slice(lab);
        }
        Ok(Self {
            windows: windows.len(),
            past,
            future,
            labels: flat,
        })
    }
}

/// Gaussian parameters and a reparameterised sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Head {
    pub mean: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Maps a raw head output to a log-variance bounded below by about
/// `LOGVAR_MIN`: `softplus(r - LOGVAR_MIN) - softplus(-LOGVAR_MIN)`, which is
/// zero at `r = 0` and close to `r` above the bound.
pub(crate) fn bounded_logvar(tape: &mut Tape, raw: Var) -> Var {
    let shifted = tape.offset(raw, -LOGVAR_MIN);
    let soft = tape.softplus(shifted);
    tape.offset(soft, -softplus(-LOGVAR_MIN))
}

fn sample(tape: &mut Tape, mean: Var, raw_logvar: Var, noise: Option<&Array2<f64>>) -> Head {
    let logvar = bounded_logvar(tape, raw_logvar);
    let z = match noise {
        Some(eps) => {
            let half = tape.scale(logvar, 0.5);
            let sd = tape.exp(half);
            let eps = tape.constant(eps.clone());
            let spread = tape.mul(sd, eps);
            tape.add(mean, spread)
        }
        None => mean,
    };
    Head { mean, logvar, z }
}

/// Splits `[mean | logvar]` columns of width `width` each.
fn split_head(tape: &mut Tape, out: Var, width: usize, noise: Option<&Array2<f64>>) -> Head {
    let mean = tape.slice_cols(out, 0, width);
    let logvar = tape.slice_cols(out, width, 2 * width);
    sample(tape, mean, logvar, noise)
}

/// Per-step posteriors of both latent blocks from observations `x`.
pub(crate) fn encode(
    tape: &mut Tape,
    params: &ParamVector,
    model: &IdeaModel,
    x: Var,
    noise: Option<(&Array2<f64>, &Array2<f64>)>,
) -> Result<(Head, Head)> {
    let d = &model.dims;
    let out_s = tape.mlp(params, ENC_S, &model.nets.enc_s, x)?;
    let out_e = tape.mlp(params, ENC_E, &model.nets.enc_e, x)?;
    let s = split_head(tape, out_s, d.n_s, noise.map(|n| n.0));
    let e = split_head(tape, out_e, d.n_e, noise.map(|n| n.1));
    Ok((s, e))
}

/// One latent predictor: the flattened lookback of each window maps to all horizon steps at once.
#[allow(clippy::too_many_arguments)]
fn predict_block(
    tape: &mut Tape,
    params: &ParamVector,
    prefix: &str,
    net: &Mlp,
    z: Var,
    windows: usize,
    width: usize,
    lookback: usize,
    horizon: usize,
    noise: Option<&Array2<f64>>,
) -> Result<Head> {
    let flat = tape.reshape(z, windows, lookback * width);
    let out = tape.mlp(params, prefix, net, flat)?;
    let mean = tape.slice_cols(out, 0, horizon * width);
    let logvar = tape.slice_cols(out, horizon * width, 2 * horizon * width);
    let mean = tape.reshape(mean, windows * horizon, width);
    let logvar = tape.reshape(logvar, windows * horizon, width);
    Ok(sample(tape, mean, logvar, noise))
}

pub(crate) fn predict(
    tape: &mut Tape,
    params: &ParamVector,
    model: &IdeaModel,
    z_s: Var,
    z_e: Var,
    windows: usize,
    noise: Option<(&Array2<f64>, &Array2<f64>)>,
) -> Result<(Head, Head)> {
    let d = &model.dims;
    let f = model
        .nets
        .future
        .as_ref()
        .ok_or_else(|| Error::contract("model has a zero forecast horizon"))?;
    let s = predict_block(
        tape,
        params,
        PRED_S,
        &f.pred_s,
        z_s,
        windows,
        d.n_s,
        d.t_split,
        d.horizon(),
        noise.map(|n| n.0),
    )?;
    let e = predict_block(
        tape,
        params,
        PRED_E,
        &f.pred_e,
        z_e,
        windows,
        d.n_e,
        d.t_split,
        d.horizon(),
        noise.map(|n| n.1),
    )?;
    Ok((s, e))
}

/// Lookback decoder (`future = false`) or future predictor (`future = true`).
pub(crate) fn decode(
    tape: &mut Tape,
    params: &ParamVector,
    model: &IdeaModel,
    z_s: Var,
    z_e: Var,
    future: bool,
) -> Result<Var> {
    let z = tape.concat_cols(&[z_s, z_e]);
    if future {
        let f = model
            .nets
            .future
            .as_ref()
            .ok_or_else(|| Error::contract("model has a zero forecast horizon"))?;
        tape.mlp(params, DEC_Y, &f.dec_y, z)
    } else {
        tape.mlp(params, DEC_X, &model.nets.dec_x, z)
    }
}

/// Interleaves lookback rows (`windows * t`) and horizon rows (`windows * h`) into whole windows.
pub(crate) fn join_index(windows: usize, t: usize, h: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(windows * (t + h));
    for w in 0..windows {
        idx.extend((0..t).map(|tau| w * t + tau));
        idx.extend((0..h).map(|tau| windows * t + w * h + tau));
    }
    idx
}

/// `log N(eps; 0, 1) - log sigma` for `eps = (z - mu) / sigma`, `sigma = softplus(raw) + floor`.
fn affine_terms(tape: &mut Tape, z: Var, out: Var, width: usize) -> Var {
    let mu = tape.slice_cols(out, 0, width);
    let raw = tape.slice_cols(out, width, 2 * width);
    let soft = tape.softplus(raw);
    let sigma = tape.offset(soft, SIGMA_FLOOR);
    let diff = tape.sub(z, mu);
    let eps = tape.div(diff, sigma);
    let lp = tape.std_normal_logpdf(eps);
    let log_sigma = tape.log(sigma);
    tape.sub(lp, log_sigma)
}

/// Per-element log densities of stationary trajectories under the modular
/// prior, returned as (rows of the first `prior_lag` steps, rows of the rest).
/// `traj` holds `windows` trajectories of `len` steps each.
pub(crate) fn stationary_terms(
    tape: &mut Tape,
    params: &ParamVector,
    model: &IdeaModel,
    traj: Var,
    windows: usize,
    len: usize,
) -> Result<(Var, Var, Vec<usize>)> {
    let lag = model.dims.prior_lag;
    let mut head_idx = Vec::new();
    let mut tail_idx = Vec::new();
    for w in 0..windows {
        head_idx.extend((0..lag.min(len)).map(|tau| w * len + tau));
        tail_idx.extend((lag..len).map(|tau| w * len + tau));
    }
    let head = tape.gather_rows(traj, head_idx.clone());
    let head = tape.std_normal_logpdf(head);
    let cur = tape.gather_rows(traj, tail_idx.clone());
    let ctx: Vec<Var> = (1..=lag)
        .map(|k| tape.gather_rows(traj, tail_idx.iter().map(|&r| r - k).collect()))
        .collect();
    let ctx = if ctx.len() == 1 {
        ctx[0]
    } else {
        tape.concat_cols(&ctx)
    };
    let out = tape.mlp(params, PRIOR_S, &model.nets.prior_s, ctx)?;
    let tail = affine_terms(tape, cur, out, model.dims.n_s);
    let mut order = vec![0; windows * len];
    for (pos, &r) in head_idx.iter().chain(&tail_idx).enumerate() {
        order[r] = pos;
    }
    Ok((head, tail, order))
}

/// Per-element log densities of nonstationary latents given one label per row.
pub(crate) fn nonstationary_terms(
    tape: &mut Tape,
    params: &ParamVector,
    model: &IdeaModel,
    traj: Var,
    labels: &[usize],
) -> Result<Var> {
    let e = model.dims.n_envs;
    let mut onehot = Array2::zeros((labels.len(), e));
    for (r, &k) in labels.iter().enumerate() {
        onehot[[r, k]] = 1.0;
    }
    let onehot = tape.constant(onehot);
    let out = tape.mlp(params, PRIOR_E, &model.nets.prior_e, onehot)?;
    Ok(affine_terms(tape, traj, out, model.dims.n_e))
}

/// Scalar terms of the objective, each summed over the batch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ElboVars {
    pub rec: Var,
    pub pre: Var,
    pub kld_s: Var,
    pub kld_e: Var,
    pub total: Var,
    /// Lookback reconstruction, for diagnostics.
    pub recon: Var,
}

fn log_q(tape: &mut Tape, h: &Head) -> Var {
    let lp = tape.gauss_logpdf(h.z, h.mean, h.logvar);
    tape.sum(lp)
}

fn obs_loglik(tape: &mut Tape, x: &Array2<f64>, xhat: Var) -> Var {
    let (r, c) = x.dim();
    let x = tape.constant(x.clone());
    let lv = tape.filled(r, c, OBS_LOGVAR);
    let lp = tape.gauss_logpdf(x, xhat, lv);
    tape.sum(lp)
}

pub(crate) fn elbo(
    tape: &mut Tape,
    params: &ParamVector,
    model: &IdeaModel,
    batch: &Batch,
    noise: &Noise,
) -> Result<ElboVars> {
    let d = &model.dims;
    let b = batch.windows;
    noise.check(d, b)?;
    let x = tape.constant(batch.past.clone());
    let (qs, qe) = encode(tape, params, model, x, Some((&noise.enc_s, &noise.enc_e)))?;
    let recon = decode(tape, params, model, qs.z, qe.z, false)?;
    let rec = obs_loglik(tape, &batch.past, recon);

    let mut log_q_s = log_q(tape, &qs);
    let mut log_q_e = log_q(tape, &qe);
    let (traj_s, traj_e, pre) = if model.has_future() {
        let (ps, pe) = predict(
            tape,
            params,
            model,
            qs.z,
            qe.z,
            b,
            Some((&noise.pred_s, &noise.pred_e)),
        )?;
        let forecast = decode(tape, params, model, ps.z, pe.z, true)?;
        let pre = obs_loglik(tape, &batch.future, forecast);
        let lqs = log_q(tape, &ps);
        let lqe = log_q(tape, &pe);
        log_q_s = tape.add(log_q_s, lqs);
        log_q_e = tape.add(log_q_e, lqe);
        let idx = join_index(b, d.t_split, d.horizon());
        let all_s = tape.concat_rows(&[qs.z, ps.z]);
        let all_e = tape.concat_rows(&[qe.z, pe.z]);
        (
            tape.gather_rows(all_s, idx.clone()),
            tape.gather_rows(all_e, idx),
            pre,
        )
    } else {
        (qs.z, qe.z, tape.filled(1, 1, 0.0))
    };

    let (head, tail, _) = stationary_terms(tape, params, model, traj_s, b, d.window)?;
    let head = tape.sum(head);
    let tail = tape.sum(tail);
    let log_p_s = tape.add(head, tail);
    let terms_e = nonstationary_terms(tape, params, model, traj_e, &batch.labels)?;
    let log_p_e = tape.sum(terms_e);

    let kld_s = tape.sub(log_q_s, log_p_s);
    let kld_e = tape.sub(log_q_e, log_p_e);
    let w = model.weights;
    let a = tape.scale(rec, w.alpha);
    let bs = tape.scale(kld_s, w.beta);
    let ge = tape.scale(kld_e, w.gamma);
    let total = tape.add(pre, a);
    let total = tape.sub(total, bs);
    let total = tape.sub(total, ge);
    Ok(ElboVars {
        rec,
        pre,
        kld_s,
        kld_e,
        total,
        recon,
    })
}
