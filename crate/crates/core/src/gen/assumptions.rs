use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::markov::min_run_length;
use super::system::{mean_separation, singular_values, TrueSystem};
use crate::error::Result;

/// Singular values at or below this count as rank loss.
pub const RANK_THRESHOLD: f64 = 1e-6;
const HISTORY_DRAWS: usize = 64;
const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub full_rank_ok: bool,
    pub transition_min_singular: f64,
    /// Some state cannot reach every other state.
    pub reducible_warning: bool,
    pub min_dwell: usize,
    pub dwell_ok: bool,
    pub mean_separation: f64,
    pub separation_ok: bool,
    pub v_independence_ok: bool,
    pub v_min_singular: f64,
    pub w_independence_ok: bool,
    pub w_min_singular: f64,
}

impl AssumptionReport {
    /// Names of the failed checks, empty when everything holds.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.full_rank_ok {
            out.push("full-rank transition matrix");
        }
        if !self.dwell_ok {
            out.push("minimum dwell of two steps");
        }
        if !self.separation_ok {
            out.push("separated environment means");
        }
        if !self.v_independence_ok {
            out.push("linear independence of stationary v-vectors");
        }
        if !self.w_independence_ok {
            out.push("linear independence of environment w-vectors");
        }
        out
    }
}

pub fn check_assumptions(sys: &TrueSystem, envs: &[usize]) -> Result<AssumptionReport> {
    sys.validate()?;
    let a = sys.markov.matrix();
    let transition_min_singular = singular_values(&a).last().copied().unwrap_or(0.0);
    let min_dwell = min_run_length(envs);
    let separation = mean_separation(&sys.env_mean);
    let max_std = sys.env_std.fold(0.0f64, |m, &s| m.max(s));
    let v_min_singular = v_rank_witness(sys)?;
    let w_min_singular = w_rank_witness(sys);
    Ok(AssumptionReport {
        full_rank_ok: transition_min_singular > RANK_THRESHOLD,
        transition_min_singular,
        reducible_warning: !strongly_connected(&a),
        min_dwell,
        dwell_ok: min_dwell >= 2,
        mean_separation: separation,
        separation_ok: separation >= 2.0 * max_std,
        v_independence_ok: v_min_singular > RANK_THRESHOLD,
        v_min_singular,
        w_independence_ok: w_min_singular > RANK_THRESHOLD,
        w_min_singular,
    })
}

fn strongly_connected(a: &Array2<f64>) -> bool {
    let e = a.nrows();
    (0..e).all(|start| {
        let mut seen = vec![false; e];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..e {
                if a[[i, j]] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    })
}

/// Score of environment `e`: `d/dz log p(z | e) = -(z - mu_e) / sigma_e^2` per dimension.
fn env_score(sys: &TrueSystem, z: &[f64], e: usize) -> Vec<f64> {
    z.iter()
        .enumerate()
        .map(|(j, &v)| -(v - sys.env_mean[[e, j]]) / sys.env_std[[e, j]].powi(2))
        .collect()
}

/// Smallest singular value of the stacked differences `w(z, e_j) - w(z, e_0)`,
/// evaluated at every environment mean and at the origin.
fn w_rank_witness(sys: &TrueSystem) -> f64 {
    let (e, n_e) = (sys.n_envs(), sys.n_e);
    let mut points: Vec<Vec<f64>> = (0..e).map(|k| sys.env_mean.row(k).to_vec()).collect();
    points.push(vec![0.0; n_e]);
    let rows = points.len() * (e - 1);
    let mut stack = Array2::zeros((rows, n_e));
    let mut r = 0;
    for z in &points {
        let base = env_score(sys, z, 0);
        for k in 1..e {
            for (j, w) in env_score(sys, z, k).iter().enumerate() {
                stack[[r, j]] = w - base[j];
            }
            r += 1;
        }
    }
    rank_witness(&stack, n_e)
}

/// Mixed second derivatives `d^2 log p(z_t | history) / dz_{t,k} dz_{t-1,l}` by
/// central differences, for one output dimension `k` and the lag-1 block.
fn v_vector(sys: &TrueSystem, history: &[f64], k: usize) -> Result<Vec<f64>> {
    let n_s = sys.n_s;
    let logp = |z_k: f64, h: &[f64]| -> Result<f64> {
        let mean = sys.transition.apply(h)?;
        let s2 = sys.sigma_s * sys.sigma_s;
        Ok(-0.5 * (z_k - mean[k]).powi(2) / s2)
    };
    let z_k = sys.transition.apply(history)?[k];
    let mut v = vec![0.0; n_s];
    for (l, vl) in v.iter_mut().enumerate() {
        let mut up = history.to_vec();
        let mut dn = history.to_vec();
        up[l] += FD_STEP;
        dn[l] -= FD_STEP;
        let d = logp(z_k + FD_STEP, &up)? - logp(z_k + FD_STEP, &dn)? - logp(z_k - FD_STEP, &up)?
            + logp(z_k - FD_STEP, &dn)?;
        *vl = d / (4.0 * FD_STEP * FD_STEP);
    }
    Ok(v)
}

/// Worst case over output dimensions of the rank witness of the stacked
/// differences `v(h_j) - v(h_0)` over sampled histories.
fn v_rank_witness(sys: &TrueSystem) -> Result<f64> {
    let (n_s, width) = (sys.n_s, sys.n_s * sys.lag);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let histories: Vec<Vec<f64>> = (0..HISTORY_DRAWS)
        .map(|_| {
            (0..width)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let mut worst = f64::INFINITY;
    for k in 0..n_s {
        let base = v_vector(sys, &histories[0], k)?;
        let mut stack = Array2::zeros((HISTORY_DRAWS - 1, n_s));
        for (r, h) in histories[1..].iter().enumerate() {
            for (l, v) in v_vector(sys, h, k)?.iter().enumerate() {
                stack[[r, l]] = v - base[l];
            }
        }
        worst = worst.min(rank_witness(&stack, n_s));
    }
    Ok(worst)
}

/// The `rank`-th largest singular value, or 0 when the matrix has fewer.
fn rank_witness(stack: &Array2<f64>, rank: usize) -> f64 {
    singular_values(stack).get(rank - 1).copied().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::markov::{sample_markov, MarkovSpec};
    use crate::gen::system::GenConfig;

    fn system(lag: usize, seed: u64) -> TrueSystem {
        let cfg = GenConfig {
            lag,
            ..GenConfig::default()
        };
        TrueSystem::random(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn identity_chain_is_full_rank_but_reducible() {
        let mut sys = system(1, 0);
        sys.markov = MarkovSpec::new(Array2::eye(3), vec![1.0 / 3.0; 3]).unwrap();
        let r = check_assumptions(&sys, &[0, 0, 1, 1]).unwrap();
        assert!(r.full_rank_ok);
        assert!(r.reducible_warning);
    }

    #[test]
    fn identical_environments_fail_w_check() {
        let mut sys = system(1, 0);
        let row0 = sys.env_mean.row(0).to_owned();
        sys.env_mean.row_mut(1).assign(&row0);
        let std0 = sys.env_std.row(0).to_owned();
        sys.env_std.row_mut(1).assign(&std0);
        let r = check_assumptions(&sys, &[0, 0]).unwrap();
        assert!(!r.w_independence_ok);
        assert!(r
            .violations()
            .contains(&"linear independence of environment w-vectors"));
    }

    #[test]
    fn single_step_runs_fail_dwell() {
        let sys = system(1, 0);
        let r = check_assumptions(&sys, &[0, 1, 1]).unwrap();
        assert_eq!(r.min_dwell, 1);
        assert!(!r.dwell_ok);
    }

    #[test]
    fn linear_transition_fails_v_check() {
        // Without a nonlinearity the mixed derivatives never change.
        let mut sys = system(1, 0);
        let w = sys.transition.layers()[1]
            .weight
            .dot(&sys.transition.layers()[0].weight);
        sys.transition = crate::substrate::Mlp::affine(w, ndarray::Array1::zeros(4)).unwrap();
        let r = check_assumptions(&sys, &[0, 0]).unwrap();
        assert!(!r.v_independence_ok);
    }

    #[test]
    fn default_systems_pass_every_check() {
        for lag in [1, 2] {
            for seed in 0..4 {
                let sys = system(lag, seed);
                let envs = sample_markov(&sys.markov, 2_000, &mut ChaCha8Rng::seed_from_u64(seed))
                    .unwrap();
                let r = check_assumptions(&sys, &envs).unwrap();
                assert!(r.violations().is_empty(), "lag {lag} seed {seed}: {r:?}");
                assert!(!r.reducible_warning);
            }
        }
    }
}
