use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::substrate::LN_2PI;

pub const LOGVAR_FLOOR: f64 = -13.815_510_557_964_274; // ln(1e-6)

/// Linear-Gaussian AR(1) emission of one hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    /// `n x n`, applied to the previous observation.
    pub weight: Array2<f64>,
    pub bias: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Autoregressive hidden Markov model.
#[derive(Debug, Clone, PartialEq)]
pub struct Arhmm {
    pub transition: Array2<f64>,
    pub initial: Vec<f64>,
    pub states: Vec<Emission>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    /// `T x E` state marginals.
    pub gamma: Array2<f64>,
    /// `(T-1) x E x E` pairwise marginals.
    pub xi: Array3<f64>,
    pub loglik: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvPrediction {
    Argmax,
    Sample(u64),
}

impl Arhmm {
    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n(&self) -> usize {
        self.states.first().map_or(0, |s| s.bias.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (e, n) = (self.n_states(), self.n());
        if e == 0 || self.states.len() != e || self.transition.dim() != (e, e) {
            return Err(Error::contract("inconsistent number of states"));
        }
        for (i, row) in self.transition.outer_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::contract(format!(
                    "transition row {i} is not a distribution"
                )));
            }
        }
        let sum: f64 = self.initial.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.initial.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::contract("initial distribution does not sum to one"));
        }
        for (k, st) in self.states.iter().enumerate() {
            if st.weight.dim() != (n, n) || st.bias.len() != n || st.logvar.len() != n {
                return Err(Error::contract(format!(
                    "state {k} has inconsistent emission shapes"
                )));
            }
            if st.logvar.iter().any(|&v| v < LOGVAR_FLOOR) {
                return Err(Error::contract(format!(
                    "state {k} is below the variance floor"
                )));
            }
            let finite = st
                .weight
                .iter()
                .chain(&st.bias)
                .chain(&st.logvar)
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::contract(format!(
                    "state {k} has non-finite parameters"
                )));
            }
        }
        Ok(())
    }

    /// Same model with states relabelled so that new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let e = self.n_states();
        Self {
            transition: Array2::from_shape_fn((e, e), |(i, j)| self.transition[[perm[i], perm[j]]]),
            initial: perm.iter().map(|&k| self.initial[k]).collect(),
            states: perm.iter().map(|&k| self.states[k].clone()).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &ArhmmFile::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ArhmmFile = io::read_json(path)?;
        let model = file
            .into_model()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        model
            .validate()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmissionFile {
    #[serde(rename = "W")]
    weight: Vec<f64>,
    b: Vec<f64>,
    logvar: Vec<f64>,
}

/// On-disk layout of `arhmm.json`; matrices are row-major.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArhmmFile {
    #[serde(rename = "E")]
    n_states: usize,
    #[serde(rename = "A")]
    transition: Vec<f64>,
    pi: Vec<f64>,
    states: Vec<EmissionFile>,
}

impl From<&Arhmm> for ArhmmFile {
    fn from(m: &Arhmm) -> Self {
        Self {
            n_states: m.n_states(),
            transition: m.transition.iter().copied().collect(),
            pi: m.initial.clone(),
            states: m
                .states
                .iter()
                .map(|s| EmissionFile {
                    weight: s.weight.iter().copied().collect(),
                    b: s.bias.clone(),
                    logvar: s.logvar.clone(),
                })
                .collect(),
        }
    }
}

impl ArhmmFile {
    fn into_model(self) -> Result<Arhmm> {
        let e = self.n_states;
        let transition = Array2::from_shape_vec((e, e), self.transition)
            .map_err(|_| Error::contract("`A` must hold E * E entries"))?;
        let states = self
            .states
            .into_iter()
            .map(|s| {
                let n = s.b.len();
                Ok(Emission {
                    weight: Array2::from_shape_vec((n, n), s.weight)
                        .map_err(|_| Error::contract("`W` must hold n * n entries"))?,
                    bias: s.b,
                    logvar: s.logvar,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Arhmm {
            transition,
            initial: self.pi,
            states,
        })
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn log_probs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|v| v.ln()).collect()
}

/// `T x E` table of per-step emission log densities.
pub fn emission_table(model: &Arhmm, x: ArrayView2<f64>) -> Array2<f64> {
    let (t_len, n) = x.dim();
    let mut table = Array2::zeros((t_len, model.n_states()));
    if t_len == 0 {
        return table;
    }
    for (k, st) in model.states.iter().enumerate() {
        let inv_var: Vec<f64> = st.logvar.iter().map(|v| (-v).exp()).collect();
        let norm = -0.5 * (n as f64 * LN_2PI + st.logvar.iter().sum::<f64>());
        let mut mean = Array2::zeros((t_len, n));
        mean.slice_mut(s![1.., ..])
            .assign(&x.slice(s![..t_len - 1, ..]).dot(&st.weight.t()));
        for (t, (xr, mr)) in x.outer_iter().zip(mean.outer_iter()).enumerate() {
            let mut q = 0.0;
            for d in 0..n {
                let r = xr[d] - mr[d] - st.bias[d];
                q += r * r * inv_var[d];
            }
            table[[t, k]] = norm - 0.5 * q;
        }
    }
    table
}

fn check_input(model: &Arhmm, x: ArrayView2<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::contract("sequence must have at least one step"));
    }
    if x.ncols() != model.n() {
        return Err(Error::contract(format!(
            "sequence has {} columns, model expects {}",
            x.ncols(),
            model.n()
        )));
    }
    Ok(())
}

fn forward(model: &Arhmm, b: &Array2<f64>) -> (Array2<f64>, f64) {
    let (t_len, e) = b.dim();
    let log_a = model.transition.mapv(f64::ln);
    let log_pi = log_probs(&model.initial);
    let mut alpha = Array2::zeros((t_len, e));
    for k in 0..e {
        alpha[[0, k]] = log_pi[k] + b[[0, k]];
    }
    for t in 1..t_len {
        for j in 0..e {
            let prev = alpha.row(t - 1);
            alpha[[t, j]] = log_sum_exp((0..e).map(|i| prev[i] + log_a[[i, j]])) + b[[t, j]];
        }
    }
    let ll = log_sum_exp(alpha.row(t_len - 1).iter().copied());
    (alpha, ll)
}

/// `log p(x_{1:T})` by the forward recursion.
pub fn loglik(model: &Arhmm, x: ArrayView2<f64>) -> Result<f64> {
    check_input(model, x)?;
    Ok(forward(model, &emission_table(model, x)).1)
}

pub(crate) fn smooth_with_table(model: &Arhmm, b: &Array2<f64>) -> Posteriors {
    let (t_len, e) = b.dim();
    let log_a = model.transition.mapv(f64::ln);
    let (alpha, ll) = forward(model, b);
    let mut beta = Array2::zeros((t_len, e));
    for t in (0..t_len - 1).rev() {
        for i in 0..e {
            beta[[t, i]] =
                log_sum_exp((0..e).map(|j| log_a[[i, j]] + b[[t + 1, j]] + beta[[t + 1, j]]));
        }
    }
    let mut gamma = &alpha + &beta - ll;
    gamma.mapv_inplace(f64::exp);
    for mut row in gamma.outer_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    let mut xi = Array3::zeros((t_len.saturating_sub(1), e, e));
    for t in 0..t_len.saturating_sub(1) {
        let mut slab = xi.index_axis_mut(Axis(0), t);
        for i in 0..e {
            for j in 0..e {
                slab[[i, j]] =
                    (alpha[[t, i]] + log_a[[i, j]] + b[[t + 1, j]] + beta[[t + 1, j]] - ll).exp();
            }
        }
        let s = slab.sum();
        slab /= s;
    }
    Posteriors {
        gamma,
        xi,
        loglik: ll,
    }
}

/// Forward-backward state and pairwise marginals.
pub fn posterior_smooth(model: &Arhmm, x: ArrayView2<f64>) -> Result<Posteriors> {
    check_input(model, x)?;
    Ok(smooth_with_table(model, &emission_table(model, x)))
}

/// `log p(e_{1:T}, x_{1:T})` accumulated left to right.
pub fn path_log_prob(model: &Arhmm, b: &Array2<f64>, path: &[usize]) -> f64 {
    let mut lp = model.initial[path[0]].ln() + b[[0, path[0]]];
    for t in 1..path.len() {
        lp = lp + model.transition[[path[t - 1], path[t]]].ln() + b[[t, path[t]]];
    }
    lp
}

pub(crate) fn viterbi_with_table(model: &Arhmm, b: &Array2<f64>) -> (Vec<usize>, f64) {
    let (t_len, e) = b.dim();
    let log_a = model.transition.mapv(f64::ln);
    let log_pi = log_probs(&model.initial);
    let mut delta: Vec<f64> = (0..e).map(|k| log_pi[k] + b[[0, k]]).collect();
    let mut back = vec![0usize; t_len * e];
    let mut next = vec![0.0; e];
    for t in 1..t_len {
        for j in 0..e {
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for (i, d) in delta.iter().enumerate() {
                let v = d + log_a[[i, j]];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            back[t * e + j] = arg;
            next[j] = best + b[[t, j]];
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let (mut best, mut last) = (f64::NEG_INFINITY, 0);
    for (k, &d) in delta.iter().enumerate() {
        if d > best {
            best = d;
            last = k;
        }
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[t * e + path[t]];
    }
    (path, best)
}

/// Most probable state path; ties go to the lowest state index.
pub fn viterbi(model: &Arhmm, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    check_input(model, x)?;
    Ok(viterbi_with_table(model, &emission_table(model, x)).0)
}

/// Continues the chain for `horizon` steps after state `last`.
pub fn predict_env(
    model: &Arhmm,
    last: usize,
    horizon: usize,
    mode: EnvPrediction,
) -> Result<Vec<usize>> {
    if horizon == 0 {
        return Err(Error::contract("horizon must be at least 1"));
    }
    if last >= model.n_states() {
        return Err(Error::contract(format!("state {last} out of range")));
    }
    let mut out = Vec::with_capacity(horizon);
    let mut cur = last;
    match mode {
        EnvPrediction::Argmax => {
            for _ in 0..horizon {
                let row = model.transition.row(cur);
                let mut arg = 0;
                for (k, &p) in row.iter().enumerate() {
                    if p > row[arg] {
                        arg = k;
                    }
                }
                cur = arg;
                out.push(cur);
            }
        }
        EnvPrediction::Sample(seed) => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            for _ in 0..horizon {
                let row = model.transition.row(cur).to_vec();
                cur = crate::gen::categorical(&row, &mut rng);
                out.push(cur);
            }
        }
    }
    Ok(out)
}

/// Random model used by tests and as an EM starting point.
pub fn random_model<R: Rng + ?Sized>(n_states: usize, n: usize, rng: &mut R) -> Arhmm {
    use rand_distr::{Distribution, StandardNormal};
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let mut transition = Array2::from_shape_fn((n_states, n_states), |_| 0.1 + normal().abs());
    for mut row in transition.outer_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    let mut initial: Vec<f64> = (0..n_states).map(|_| 0.1 + normal().abs()).collect();
    let s: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|p| *p /= s);
    let states = (0..n_states)
        .map(|_| Emission {
            weight: Array2::from_shape_fn((n, n), |_| 0.4 * normal()),
            bias: (0..n).map(|_| normal()).collect(),
            logvar: (0..n).map(|_| 0.5 * normal()).collect(),
        })
        .collect();
    Arhmm {
        transition,
        initial,
        states,
    }
}
