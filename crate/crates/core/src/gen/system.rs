use nalgebra::DMatrix;
use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::markov::MarkovSpec;
use crate::error::{Error, Result};
use crate::substrate::{Activation, Layer, Mlp};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const MAX_CONDITION: f64 = 25.0;
/// Lipschitz bound of the stationary transition; below one keeps it stable.
const TRANSITION_GAIN: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_s: usize,
    pub n_e: usize,
    pub n_envs: usize,
    /// Maximum time lag of the stationary transition.
    pub lag: usize,
    pub sigma_s: f64,
    pub train_len: usize,
    pub test_len: usize,
    pub window: usize,
    pub t_split: usize,
    pub stride: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_s: 4,
            n_e: 4,
            n_envs: 3,
            lag: 1,
            sigma_s: 0.3,
            train_len: 40_000,
            test_len: 10_000,
            window: 24,
            t_split: 16,
            stride: 8,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_s == 0 || self.n_e == 0 {
            return fail("latent dimensions must be at least 1".into());
        }
        if self.n_envs < 2 {
            return fail(format!(
                "n_envs = {} but at least 2 environments are required",
                self.n_envs
            ));
        }
        if self.lag == 0 {
            return fail("lag must be at least 1".into());
        }
        if !(self.sigma_s > 0.0 && self.sigma_s.is_finite()) {
            return fail(format!("sigma_s = {} must be positive", self.sigma_s));
        }
        if !(self.t_split > self.lag && self.t_split < self.window) {
            return fail(format!(
                "t_split = {} must lie strictly between lag = {} and window = {}",
                self.t_split, self.lag, self.window
            ));
        }
        if self.stride == 0 {
            return fail("stride must be at least 1".into());
        }
        for (name, len) in [("train_len", self.train_len), ("test_len", self.test_len)] {
            if len < self.window || len <= self.lag + self.window - self.t_split {
                return fail(format!("{name} = {len} is shorter than one window"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n_s + self.n_e
    }
}

/// Parameters of the synthetic data-generating process.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueSystem {
    pub markov: MarkovSpec,
    pub n_s: usize,
    pub n_e: usize,
    pub lag: usize,
    /// `E x n_e` environment means.
    pub env_mean: Array2<f64>,
    /// `E x n_e` environment standard deviations.
    pub env_std: Array2<f64>,
    /// Maps `[z_{t-1}, ..., z_{t-lag}]` to the mean of `z_t`.
    pub transition: Mlp,
    pub sigma_s: f64,
    /// Square, invertible mixing network.
    pub mixing: Mlp,
}

impl TrueSystem {
    pub fn n(&self) -> usize {
        self.n_s + self.n_e
    }

    pub fn n_envs(&self) -> usize {
        self.markov.n_states()
    }

    /// Draws a system satisfying the structural invariants.
    pub fn random<R: Rng + ?Sized>(cfg: &GenConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let markov = (0..100)
            .map(|_| MarkovSpec::random(cfg.n_envs, rng))
            .find(|m| min_singular_value(&m.matrix()) > 1e-6)
            .ok_or_else(|| {
                Error::Assumption("could not draw a full-rank transition matrix".into())
            })?;

        let (env_mean, env_std) = (0..10_000)
            .map(|_| {
                let mean = Array2::from_shape_fn((cfg.n_envs, cfg.n_e), |_| {
                    rng.sample(Uniform::new(-2.0, 2.0).expect("valid range"))
                });
                let std = Array2::from_shape_fn((cfg.n_envs, cfg.n_e), |_| {
                    rng.sample(Uniform::new(0.2, 1.0).expect("valid range"))
                });
                (mean, std)
            })
            .find(|(m, s)| mean_separation(m) >= 2.0 * s.fold(0.0, |a: f64, &b| a.max(b)))
            .ok_or_else(|| {
                Error::Assumption("could not place separated environment means".into())
            })?;

        let mut w1 = Array2::zeros((cfg.n_s, cfg.n_s * cfg.lag));
        for k in 0..cfg.lag {
            let block = random_orthogonal(cfg.n_s, rng) * 0.6f64.powi(k as i32);
            w1.slice_mut(s![.., k * cfg.n_s..(k + 1) * cfg.n_s])
                .assign(&block);
        }
        let mut w2 = random_orthogonal(cfg.n_s, rng);
        w2 *= TRANSITION_GAIN / (spectral_norm(&w1) * spectral_norm(&w2));
        let b1 = Array1::from_shape_fn(cfg.n_s, |_| 0.3 * normal(rng));
        let transition = Mlp::new(vec![
            Layer {
                weight: w1,
                bias: b1,
                activation: Activation::LeakyRelu(LEAKY_SLOPE),
            },
            Layer {
                weight: w2,
                bias: Array1::zeros(cfg.n_s),
                activation: Activation::Identity,
            },
        ])?;

        let n = cfg.n();
        let mixing = Mlp::new(
            (0..2)
                .map(|_| Layer {
                    weight: random_well_conditioned(n, rng),
                    bias: Array1::from_shape_fn(n, |_| 0.5 * normal(rng)),
                    activation: Activation::LeakyRelu(LEAKY_SLOPE),
                })
                .collect(),
        )?;

        let sys = Self {
            markov,
            n_s: cfg.n_s,
            n_e: cfg.n_e,
            lag: cfg.lag,
            env_mean,
            env_std,
            transition,
            sigma_s: cfg.sigma_s,
            mixing,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        self.markov.validate()?;
        let e = self.n_envs();
        if self.env_mean.dim() != (e, self.n_e) || self.env_std.dim() != (e, self.n_e) {
            return Err(Error::contract("environment parameters must be E x n_e"));
        }
        if self.transition.in_dim() != self.n_s * self.lag || self.transition.out_dim() != self.n_s
        {
            return Err(Error::contract("transition network has the wrong shape"));
        }
        let n = self.n();
        for (k, layer) in self.mixing.layers().iter().enumerate() {
            if layer.weight.dim() != (n, n) {
                return Err(Error::contract(format!(
                    "mixing layer {k} is not {n} x {n}"
                )));
            }
            let cond = condition_number(&layer.weight);
            if !(cond <= MAX_CONDITION) {
                return Err(Error::contract(format!(
                    "mixing layer {k} has condition number {cond}"
                )));
            }
        }
        Ok(())
    }
}

/// `z^e_t = mu[e_t] + std[e_t] * eps_t`.
pub fn sample_nonstationary<R: Rng + ?Sized>(
    sys: &TrueSystem,
    envs: &[usize],
    rng: &mut R,
) -> Result<Array2<f64>> {
    if let Some(&bad) = envs.iter().find(|&&e| e >= sys.n_envs()) {
        return Err(Error::contract(format!(
            "environment label {bad} out of range"
        )));
    }
    let mut z = Array2::zeros((envs.len(), sys.n_e));
    for (t, &e) in envs.iter().enumerate() {
        for j in 0..sys.n_e {
            z[[t, j]] = sys.env_mean[[e, j]] + sys.env_std[[e, j]] * normal(rng);
        }
    }
    Ok(z)
}

/// First `lag` rows are standard normal, then `z_t = f(history) + sigma_s * eps_t`.
pub fn sample_stationary<R: Rng + ?Sized>(
    sys: &TrueSystem,
    len: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let (n_s, lag) = (sys.n_s, sys.lag);
    if len <= lag {
        return Err(Error::contract(format!(
            "length {len} must exceed the lag {lag}"
        )));
    }
    let mut z = Array2::zeros((len, n_s));
    for t in 0..lag {
        z.row_mut(t).mapv_inplace(|_| normal(rng));
    }
    let mut history = vec![0.0; n_s * lag];
    for t in lag..len {
        for k in 0..lag {
            for i in 0..n_s {
                history[k * n_s + i] = z[[t - 1 - k, i]];
            }
        }
        let mean = sys.transition.apply(&history)?;
        for i in 0..n_s {
            z[[t, i]] = mean[i] + sys.sigma_s * normal(rng);
        }
    }
    Ok(z)
}

/// Applies the mixing network to every row of `[z^s, z^e]`.
pub fn mix(sys: &TrueSystem, z: &Array2<f64>) -> Result<Array2<f64>> {
    sys.mixing.apply_rows(z)
}

pub fn stack_latents(z_s: &Array2<f64>, z_e: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[z_s.view(), z_e.view()]).expect("latent blocks share their length")
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

pub(crate) fn singular_values(a: &Array2<f64>) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let mut sv: Vec<f64> = to_dmatrix(a).singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

pub(crate) fn min_singular_value(a: &Array2<f64>) -> f64 {
    singular_values(a).last().copied().unwrap_or(0.0)
}

fn spectral_norm(a: &Array2<f64>) -> f64 {
    singular_values(a).first().copied().unwrap_or(0.0)
}

pub fn condition_number(a: &Array2<f64>) -> f64 {
    let sv = singular_values(a);
    match (sv.first(), sv.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Smallest pairwise Euclidean distance between rows.
pub fn mean_separation(means: &Array2<f64>) -> f64 {
    let e = means.nrows();
    let mut best = f64::INFINITY;
    for a in 0..e {
        for b in a + 1..e {
            let d = (&means.row(a) - &means.row(b)).mapv(|v| v * v).sum().sqrt();
            best = best.min(d);
        }
    }
    best
}

fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    from_dmatrix(&q)
}

/// `U diag(s) V^T` with singular values in `[1, 3]`, so the condition number is at most 3.
fn random_well_conditioned<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let u = random_orthogonal(n, rng);
    let v = random_orthogonal(n, rng);
    let sv = Array1::from_shape_fn(n, |_| {
        rng.sample(Uniform::new(1.0, 3.0).expect("valid range"))
    });
    (u * &sv.insert_axis(Axis(0))).dot(&v.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn default_system(lag: usize, seed: u64) -> TrueSystem {
        let cfg = GenConfig {
            lag,
            ..GenConfig::default()
        };
        TrueSystem::random(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn identity_net(n: usize) -> Mlp {
        Mlp::affine(Array2::eye(n), Array1::zeros(n)).unwrap()
    }

    #[test]
    fn random_system_meets_invariants() {
        for seed in 0..5 {
            let sys = default_system(1 + (seed as usize % 2), seed);
            sys.validate().unwrap();
            let max_std = sys.env_std.fold(0.0f64, |a, &b| a.max(b));
            assert!(mean_separation(&sys.env_mean) >= 2.0 * max_std);
            for layer in sys.mixing.layers() {
                assert!(condition_number(&layer.weight) <= 3.0 + 1e-9);
            }
        }
    }

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let q = random_orthogonal(5, &mut ChaCha8Rng::seed_from_u64(1));
        let err = (q.t().dot(&q) - Array2::<f64>::eye(5))
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-12);
    }

    #[test]
    fn zero_noise_environment_latents_equal_means() {
        let mut sys = default_system(1, 2);
        sys.env_std.fill(0.0);
        let envs = [0, 0, 2, 2, 1, 1];
        let z = sample_nonstationary(&sys, &envs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (t, &e) in envs.iter().enumerate() {
            assert_eq!(z.row(t), sys.env_mean.row(e));
        }
    }

    #[test]
    fn environment_moments_match() {
        let sys = default_system(1, 3);
        let n = 100_000;
        let envs = vec![1; n];
        let z = sample_nonstationary(&sys, &envs, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for j in 0..sys.n_e {
            let col = z.column(j);
            let mean = col.mean().unwrap();
            let std = col.std(1.0);
            let (mu, sigma) = (sys.env_mean[[1, j]], sys.env_std[[1, j]]);
            assert!((mean - mu).abs() < 3.0 * sigma / (n as f64).sqrt());
            assert!((std - sigma).abs() < 3.0 * sigma / (2.0 * n as f64).sqrt());
        }
    }

    #[test]
    fn environment_switch_moves_the_mean() {
        let sys = default_system(1, 3);
        let n = 20_000;
        let mut envs = vec![0; n];
        envs.extend(vec![2; n]);
        let z = sample_nonstationary(&sys, &envs, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for j in 0..sys.n_e {
            let before = z.slice(s![..n, j]).mean().unwrap();
            let after = z.slice(s![n.., j]).mean().unwrap();
            let jump = sys.env_mean[[2, j]] - sys.env_mean[[0, j]];
            assert!((after - before - jump).abs() < 0.05);
        }
    }

    #[test]
    fn out_of_range_environment_rejected() {
        let sys = default_system(1, 3);
        assert!(sample_nonstationary(&sys, &[0, 3], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    /// One-sample Kolmogorov-Smirnov statistic against the standard normal CDF.
    fn ks_statistic(mut xs: Vec<f64>) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        let reference = Normal::standard();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = reference.cdf(x);
                (cdf - i as f64 / n)
                    .abs()
                    .max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_transition_gives_standard_normal_rows() {
        let mut sys = default_system(1, 0);
        sys.transition = Mlp::affine(Array2::zeros((4, 4)), Array1::zeros(4)).unwrap();
        sys.sigma_s = 1.0;
        let z = sample_stationary(&sys, 2_501, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let xs: Vec<f64> = z.slice(s![1.., ..]).iter().copied().collect();
        assert_eq!(xs.len(), 10_000);
        // 1% critical value of the one-sample KS statistic.
        let critical = 1.628 / (xs.len() as f64).sqrt();
        assert!(ks_statistic(xs) < critical);
    }

    #[test]
    fn noiseless_identity_transition_is_constant() {
        let mut sys = default_system(1, 0);
        sys.transition = identity_net(4);
        sys.sigma_s = 0.0;
        let z = sample_stationary(&sys, 50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for t in 1..50 {
            assert_eq!(z.row(t), z.row(0));
        }
    }

    #[test]
    fn second_lag_matters() {
        let sys = default_system(2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h: Vec<f64> = (0..8).map(|_| normal(&mut rng)).collect();
        let mut permuted = h.clone();
        permuted[4..].reverse();
        let a = sys.transition.apply(&h).unwrap();
        let b = sys.transition.apply(&permuted).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn stationary_needs_more_than_lag_rows() {
        let sys = default_system(2, 7);
        assert!(sample_stationary(&sys, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn identity_mixing_is_a_no_op() {
        let mut sys = default_system(1, 0);
        sys.mixing = identity_net(8);
        let z = Array2::from_shape_fn((5, 8), |(i, j)| (i * 8 + j) as f64 - 17.0);
        assert_eq!(mix(&sys, &z).unwrap(), z);
    }

    #[test]
    fn zero_latents_mix_to_constant_rows() {
        let sys = default_system(1, 0);
        let x = mix(&sys, &Array2::zeros((3, 8))).unwrap();
        let g0 = sys.mixing.apply(&[0.0; 8]).unwrap();
        for row in x.outer_iter() {
            for (a, b) in row.iter().zip(&g0) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Finite-difference Jacobian of the mixing network.
    fn jacobian(net: &Mlp, z: &[f64]) -> DMatrix<f64> {
        let n = z.len();
        let h = 1e-7;
        let mut j = DMatrix::zeros(n, n);
        for c in 0..n {
            let (mut up, mut dn) = (z.to_vec(), z.to_vec());
            up[c] += h;
            dn[c] -= h;
            let (fu, fd) = (net.apply(&up).unwrap(), net.apply(&dn).unwrap());
            for r in 0..n {
                j[(r, c)] = (fu[r] - fd[r]) / (2.0 * h);
            }
        }
        j
    }

    /// Damped Newton solve of `g(z) = x` from the origin.
    fn newton_invert(net: &Mlp, x: &[f64]) -> Option<Vec<f64>> {
        let n = x.len();
        let resid = |z: &[f64]| -> Vec<f64> {
            net.apply(z)
                .unwrap()
                .iter()
                .zip(x)
                .map(|(a, b)| a - b)
                .collect()
        };
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut z = vec![0.0; n];
        let mut r = resid(&z);
        for _ in 0..200 {
            if norm(&r) < 1e-12 {
                break;
            }
            let step = jacobian(net, &z)
                .lu()
                .solve(&nalgebra::DVector::from_vec(r.clone()))?;
            let mut damping = 1.0;
            loop {
                let cand: Vec<f64> = z
                    .iter()
                    .zip(step.iter())
                    .map(|(a, d)| a - damping * d)
                    .collect();
                let rc = resid(&cand);
                if norm(&rc) < norm(&r) || damping < 1e-6 {
                    z = cand;
                    r = rc;
                    break;
                }
                damping *= 0.5;
            }
        }
        (norm(&r) < 1e-9).then_some(z)
    }

    #[test]
    fn mixing_is_invertible_by_newton() {
        for lag in [1, 2] {
            let sys = default_system(lag, 21);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let z = Array2::from_shape_fn((20, 8), |_| 1.5 * normal(&mut rng));
            let x = mix(&sys, &z).unwrap();
            let mut recovered = 0;
            for t in 0..20 {
                if let Some(zh) = newton_invert(&sys.mixing, &x.row(t).to_vec()) {
                    let err = zh
                        .iter()
                        .zip(z.row(t))
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    if err < 1e-6 {
                        recovered += 1;
                    }
                }
            }
            assert!(recovered >= 19, "recovered {recovered}/20");
        }
    }

    #[test]
    fn config_validation() {
        GenConfig::default().validate().unwrap();
        let bad = [
            GenConfig {
                n_envs: 1,
                ..GenConfig::default()
            },
            GenConfig {
                t_split: 24,
                ..GenConfig::default()
            },
            GenConfig {
                t_split: 1,
                ..GenConfig::default()
            },
            GenConfig {
                sigma_s: 0.0,
                ..GenConfig::default()
            },
            GenConfig {
                train_len: 10,
                ..GenConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }
}
