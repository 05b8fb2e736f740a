use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{emission_table, smooth_with_table, Arhmm, Emission, Posteriors, LOGVAR_FLOOR};
use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub n_states: usize,
    pub restarts: usize,
    pub max_iters: usize,
    /// Relative loglik change that counts as converged.
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_states: 3,
            restarts: 5,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::Config("hmm.n_states must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("hmm.restarts must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("hmm.max_iters must be at least 1".into()));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(
                "hmm.tol must be a non-negative number".into(),
            ));
        }
        Ok(())
    }
}

/// Loglik after each E-step of one restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartTrace {
    pub init: InitKind,
    pub loglik: Vec<f64>,
    pub converged: bool,
    /// Some emission variance sits at the floor.
    pub variance_floor_active: bool,
}

impl RestartTrace {
    /// Largest drop between consecutive iterations (0 when monotone).
    pub fn max_decrease(&self) -> f64 {
        self.loglik
            .windows(2)
            .map(|w| (w[0] - w[1]).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Hard assignments from k-means on one-step differences.
    KmeansDiff,
    /// Global AR fit with per-state random perturbations.
    PerturbedGlobal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub model: Arhmm,
    pub traces: Vec<RestartTrace>,
    pub best_restart: usize,
}

impl EmFit {
    pub fn loglik(&self) -> f64 {
        *self.traces[self.best_restart]
            .loglik
            .last()
            .expect("traces are non-empty")
    }
}

/// Weighted sufficient statistics of the regression `x_t ~ [x_{t-1}, 1]`;
/// the first step of a sequence regresses on `[0, 1]`.
struct Regression {
    xtx: Vec<DMatrix<f64>>,
    xty: Vec<DMatrix<f64>>,
    weight: Vec<f64>,
}

impl Regression {
    fn new(e: usize, n: usize) -> Self {
        Self {
            xtx: vec![DMatrix::zeros(n + 1, n + 1); e],
            xty: vec![DMatrix::zeros(n + 1, n); e],
            weight: vec![0.0; e],
        }
    }

    fn add(&mut self, x: ArrayView2<f64>, resp: &Array2<f64>) {
        let (t_len, n) = x.dim();
        let mut design = vec![0.0; n + 1];
        for t in 0..t_len {
            design[..n].fill(0.0);
            if t > 0 {
                for d in 0..n {
                    design[d] = x[[t - 1, d]];
                }
            }
            design[n] = 1.0;
            for (k, xtx) in self.xtx.iter_mut().enumerate() {
                let w = resp[[t, k]];
                if w == 0.0 {
                    continue;
                }
                self.weight[k] += w;
                for a in 0..=n {
                    let wa = w * design[a];
                    if wa == 0.0 {
                        continue;
                    }
                    for b in 0..=n {
                        xtx[(a, b)] += wa * design[b];
                    }
                    for d in 0..n {
                        self.xty[k][(a, d)] += wa * x[[t, d]];
                    }
                }
            }
        }
    }

    /// Minimum-norm least-squares coefficients `(n+1) x n` per state.
    fn solve(&self) -> Vec<Option<DMatrix<f64>>> {
        self.xtx
            .iter()
            .zip(&self.xty)
            .zip(&self.weight)
            .map(|((xtx, xty), &w)| {
                if w <= 1e-10 {
                    return None;
                }
                let svd = xtx.clone().svd(true, true);
                let tol = 1e-12 * svd.singular_values.max().max(1e-300);
                svd.solve(xty, tol).ok()
            })
            .collect()
    }
}

fn add_residuals(
    x: ArrayView2<f64>,
    resp: &Array2<f64>,
    coef: &[Option<DMatrix<f64>>],
    acc: &mut [Vec<f64>],
) {
    let (t_len, n) = x.dim();
    for (k, c) in coef.iter().enumerate() {
        let Some(c) = c else { continue };
        for t in 0..t_len {
            let w = resp[[t, k]];
            if w == 0.0 {
                continue;
            }
            for d in 0..n {
                let mut pred = c[(n, d)];
                if t > 0 {
                    for a in 0..n {
                        pred += c[(a, d)] * x[[t - 1, a]];
                    }
                }
                let r = x[[t, d]] - pred;
                acc[k][d] += w * r * r;
            }
        }
    }
}

struct Responsibilities {
    gamma: Vec<Array2<f64>>,
    /// Summed pairwise marginals over all steps and sequences.
    xi_sum: Array2<f64>,
    first: Vec<f64>,
}

/// Closed-form M-step; states without any weight keep their previous parameters.
fn m_step(windows: &[ArrayView2<f64>], r: &Responsibilities, prev: &Arhmm) -> (Arhmm, bool) {
    let (e, n) = (prev.n_states(), prev.n());
    let mut reg = Regression::new(e, n);
    for (x, g) in windows.iter().zip(&r.gamma) {
        reg.add(*x, g);
    }
    let coef = reg.solve();
    let mut sq = vec![vec![0.0; n]; e];
    for (x, g) in windows.iter().zip(&r.gamma) {
        add_residuals(*x, g, &coef, &mut sq);
    }
    let mut floor_hit = false;
    let states = (0..e)
        .map(|k| match &coef[k] {
            Some(c) => Emission {
                weight: Array2::from_shape_fn((n, n), |(d, a)| c[(a, d)]),
                bias: (0..n).map(|d| c[(n, d)]).collect(),
                logvar: (0..n)
                    .map(|d| {
                        let lv = (sq[k][d] / reg.weight[k]).ln();
                        if !(lv > LOGVAR_FLOOR) {
                            floor_hit = true;
                            LOGVAR_FLOOR
                        } else {
                            lv
                        }
                    })
                    .collect(),
            },
            None => prev.states[k].clone(),
        })
        .collect();

    let mut transition = prev.transition.clone();
    for i in 0..e {
        let total: f64 = r.xi_sum.row(i).sum();
        if total > 0.0 {
            for j in 0..e {
                transition[[i, j]] = r.xi_sum[[i, j]] / total;
            }
        }
    }
    let total: f64 = r.first.iter().sum();
    let initial = if total > 0.0 {
        r.first.iter().map(|v| v / total).collect()
    } else {
        prev.initial.clone()
    };
    (
        Arhmm {
            transition,
            initial,
            states,
        },
        floor_hit,
    )
}

fn e_step(model: &Arhmm, windows: &[ArrayView2<f64>]) -> (Responsibilities, f64) {
    let e = model.n_states();
    let mut out = Responsibilities {
        gamma: Vec::with_capacity(windows.len()),
        xi_sum: Array2::zeros((e, e)),
        first: vec![0.0; e],
    };
    let mut ll = 0.0;
    for x in windows {
        let Posteriors { gamma, xi, loglik } = smooth_with_table(model, &emission_table(model, *x));
        ll += loglik;
        out.xi_sum += &xi.sum_axis(ndarray::Axis(0));
        for k in 0..e {
            out.first[k] += gamma[[0, k]];
        }
        out.gamma.push(gamma);
    }
    (out, ll)
}

/// Hard assignments turned into responsibilities, with one pseudo-count per transition.
fn from_labels(windows: &[ArrayView2<f64>], labels: &[Vec<usize>], e: usize) -> Responsibilities {
    let mut xi_sum = Array2::from_elem((e, e), 1.0);
    let mut first = vec![1.0; e];
    let gamma = windows
        .iter()
        .zip(labels)
        .map(|(x, lab)| {
            let mut g = Array2::zeros((x.nrows(), e));
            for (t, &k) in lab.iter().enumerate() {
                g[[t, k]] = 1.0;
                if t > 0 {
                    xi_sum[[lab[t - 1], k]] += 1.0;
                }
            }
            first[lab[0]] += 1.0;
            g
        })
        .collect();
    Responsibilities {
        gamma,
        xi_sum,
        first,
    }
}

fn placeholder(e: usize, n: usize) -> Arhmm {
    Arhmm {
        transition: Array2::from_elem((e, e), 1.0 / e as f64),
        initial: vec![1.0 / e as f64; e],
        states: vec![
            Emission {
                weight: Array2::zeros((n, n)),
                bias: vec![0.0; n],
                logvar: vec![0.0; n],
            };
            e
        ],
    }
}

fn init_kmeans(windows: &[ArrayView2<f64>], e: usize, rng: &mut ChaCha8Rng) -> Arhmm {
    let n = windows[0].ncols();
    let mut features = Vec::new();
    for x in windows {
        for t in 1..x.nrows() {
            features.push(
                (0..n)
                    .map(|d| x[[t, d]] - x[[t - 1, d]])
                    .collect::<Vec<_>>(),
            );
        }
    }
    let assign = super::kmeans::kmeans(&features, e, 100, rng);
    let mut labels = Vec::with_capacity(windows.len());
    let mut pos = 0;
    for x in windows {
        let t_len = x.nrows();
        let mut lab = Vec::with_capacity(t_len);
        lab.push(assign[pos]);
        lab.extend_from_slice(&assign[pos..pos + t_len - 1]);
        pos += t_len - 1;
        labels.push(lab);
    }
    m_step(
        windows,
        &from_labels(windows, &labels, e),
        &placeholder(e, n),
    )
    .0
}

fn init_perturbed(windows: &[ArrayView2<f64>], e: usize, rng: &mut ChaCha8Rng) -> Arhmm {
    let n = windows[0].ncols();
    let labels: Vec<Vec<usize>> = windows.iter().map(|x| vec![0; x.nrows()]).collect();
    let global = m_step(
        windows,
        &from_labels(windows, &labels, 1),
        &placeholder(1, n),
    )
    .0;
    let base = &global.states[0];
    let scale: Vec<f64> = base.logvar.iter().map(|v| (0.5 * v).exp()).collect();
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let states = (0..e)
        .map(|_| Emission {
            weight: base.weight.mapv(|w| w + 0.05 * normal()),
            bias: base
                .bias
                .iter()
                .zip(&scale)
                .map(|(b, s)| b + s * normal())
                .collect(),
            logvar: base.logvar.clone(),
        })
        .collect();
    let off = if e > 1 { 0.1 / (e - 1) as f64 } else { 0.0 };
    let transition = Array2::from_shape_fn((e, e), |(i, j)| {
        if e == 1 {
            1.0
        } else if i == j {
            0.9
        } else {
            off
        }
    });
    Arhmm {
        transition,
        initial: vec![1.0 / e as f64; e],
        states,
    }
}

/// Baum-Welch over independent windows sharing parameters; best of `restarts` runs.
///
/// Restart 0 starts from k-means on one-step differences, the others from a
/// perturbed global AR fit.
pub fn em_fit(windows: &[ArrayView2<f64>], cfg: &EmConfig, seed: u64) -> Result<EmFit> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::contract("no sequences to fit"));
    }
    let n = windows[0].ncols();
    for x in windows {
        if x.nrows() < 2 {
            return Err(Error::contract("every sequence needs at least two steps"));
        }
        if x.ncols() != n {
            return Err(Error::contract("sequences differ in width"));
        }
    }
    let e = cfg.n_states;
    let mut traces = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(f64, Arhmm, usize)> = None;
    for r in 0..cfg.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let (init, mut model) = if r == 0 {
            (InitKind::KmeansDiff, init_kmeans(windows, e, &mut rng))
        } else {
            (
                InitKind::PerturbedGlobal,
                init_perturbed(windows, e, &mut rng),
            )
        };
        let mut trace = RestartTrace {
            init,
            loglik: Vec::new(),
            converged: false,
            variance_floor_active: model
                .states
                .iter()
                .any(|s| s.logvar.iter().any(|&v| v <= LOGVAR_FLOOR)),
        };
        for _ in 0..cfg.max_iters {
            let (resp, ll) = e_step(&model, windows);
            ensure_finite("hmm loglik", ll)?;
            if let Some(&prev) = trace.loglik.last() {
                if ((ll - prev) / prev.abs().max(1e-300)).abs() < cfg.tol {
                    trace.loglik.push(ll);
                    trace.converged = true;
                    break;
                }
            }
            trace.loglik.push(ll);
            let (next, floor) = m_step(windows, &resp, &model);
            model = next;
            trace.variance_floor_active = floor;
        }
        if !trace.converged {
            // Score the final parameters so the trace ends on the returned model.
            let (_, ll) = e_step(&model, windows);
            ensure_finite("hmm loglik", ll)?;
            trace.loglik.push(ll);
        }
        let ll = *trace.loglik.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|(b, _, _)| ll > *b) {
            best = Some((ll, model, r));
        }
        traces.push(trace);
    }
    let (_, model, best_restart) = best.expect("restarts >= 1");
    Ok(EmFit {
        model,
        traces,
        best_restart,
    })
}

/// Views of back-to-back windows of length `window` (a shorter tail is kept if it has two steps).
pub fn tile(x: &Array2<f64>, window: usize) -> Vec<ArrayView2<'_, f64>> {
    let t_len = x.nrows();
    (0..t_len)
        .step_by(window.max(2))
        .map(|s| x.slice(s![s..(s + window.max(2)).min(t_len), ..]))
        .filter(|v| v.nrows() >= 2)
        .collect()
}

#[cfg(test)]
pub(crate) fn gaussian_column(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
