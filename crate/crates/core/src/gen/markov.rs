use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transition structure of the environment chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSpec {
    /// Row-stochastic `E x E` matrix, stored as rows.
    pub transition: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

impl MarkovSpec {
    pub fn new(transition: Array2<f64>, initial: Vec<f64>) -> Result<Self> {
        let spec = Self {
            transition: transition.outer_iter().map(|r| r.to_vec()).collect(),
            initial,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn matrix(&self) -> Array2<f64> {
        let e = self.n_states();
        Array2::from_shape_fn((e, e), |(i, j)| self.transition[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.initial.len();
        if e < 2 {
            return Err(Error::contract(format!("need at least 2 states, got {e}")));
        }
        if self.transition.len() != e || self.transition.iter().any(|r| r.len() != e) {
            return Err(Error::contract("transition matrix must be E x E"));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::contract(format!(
                    "row {i} has a negative or non-finite entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::contract(format!("row {i} sums to {s}")));
            }
        }
        let s: f64 = self.initial.iter().sum();
        if self.initial.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-12 {
            return Err(Error::contract(
                "initial distribution must be a probability vector",
            ));
        }
        Ok(())
    }

    /// Random chain: each row is `0.7 * I + 0.3 * Dirichlet(1, ..., 1)`, uniform start.
    pub fn random<R: Rng + ?Sized>(n_states: usize, rng: &mut R) -> Self {
        let transition = (0..n_states)
            .map(|i| {
                let draws: Vec<f64> = (0..n_states).map(|_| Exp1.sample(rng)).collect();
                let total: f64 = draws.iter().sum();
                let mut row: Vec<f64> = draws.iter().map(|d| 0.3 * d / total).collect();
                row[i] += 0.7;
                normalize(&mut row);
                row
            })
            .collect();
        Self {
            transition,
            initial: vec![1.0 / n_states as f64; n_states],
        }
    }
}

/// Rescales so the entries sum to one; the largest entry absorbs rounding.
fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
    let rest: f64 = row.iter().sum::<f64>() - 1.0;
    let k = (0..row.len())
        .max_by(|&a, &b| row[a].total_cmp(&row[b]))
        .unwrap_or(0);
    row[k] -= rest;
}

/// Index drawn with probability proportional to `probs`.
pub(crate) fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws an environment sequence in which every run lasts at least two steps.
///
/// After the forced second step a run ends with hazard
/// `min(1, (1 - A_ii) / A_ii)`, which keeps the expected run length at
/// `1 / (1 - A_ii)`; destinations follow the off-diagonal row of `A`.
pub fn sample_markov<R: Rng + ?Sized>(
    spec: &MarkovSpec,
    len: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if len < 2 {
        return Err(Error::contract(format!("sequence length {len} < 2")));
    }
    spec.validate()?;
    let mut e = Vec::with_capacity(len);
    e.push(categorical(&spec.initial, rng));
    let mut run = 1;
    for t in 1..len {
        let i = e[t - 1];
        let stay = spec.transition[i][i];
        let mut next = i;
        if run >= 2 && t + 1 < len && stay < 1.0 {
            let hazard = if stay > 0.0 {
                ((1.0 - stay) / stay).min(1.0)
            } else {
                1.0
            };
            if rng.random::<f64>() < hazard {
                let mut others = spec.transition[i].clone();
                others[i] = 0.0;
                next = categorical(&others, rng);
            }
        }
        run = if next == i { run + 1 } else { 1 };
        e.push(next);
    }
    Ok(e)
}

/// Length of the shortest maximal run of identical labels.
pub fn min_run_length(labels: &[usize]) -> usize {
    labels
        .chunk_by(|a, b| a == b)
        .map(<[usize]>::len)
        .min()
        .unwrap_or(0)
}
