use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::substrate::{Activation, Mlp, ParamVector};

pub const ENC_S: &str = "enc_s";
pub const ENC_E: &str = "enc_e";
pub const PRED_S: &str = "pred_s";
pub const PRED_E: &str = "pred_e";
pub const DEC_X: &str = "dec_x";
pub const DEC_Y: &str = "dec_y";
pub const PRIOR_S: &str = "prior_s";
pub const PRIOR_E: &str = "prior_e";

/// Floor added to every prior scale after the softplus.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Fixed decoder log-variance, `ln(0.01)`.
pub const OBS_LOGVAR: f64 = -4.605_170_185_988_091;
pub const HIDDEN_SLOPE: f64 = 0.2;
/// Multiplier on the initial output-layer weights of every network.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;
/// Approximate lower bound of posterior log-variances, `ln(1e-6)`.
pub const LOGVAR_MIN: f64 = -13.815_510_557_964_274;

/// Raw head output that [`bounded_logvar`](super::graph) maps to `logvar`.
pub fn raw_logvar(logvar: f64) -> f64 {
    let c = crate::substrate::softplus(-LOGVAR_MIN);
    LOGVAR_MIN + (logvar + c).exp_m1().ln()
}

/// Sizes that fix the network shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub n_s: usize,
    pub n_e: usize,
    pub n_envs: usize,
    /// Window length `T_w`.
    pub window: usize,
    /// Lookback length `t`; the remaining `window - t_split` steps are forecast.
    pub t_split: usize,
    pub hidden: usize,
    pub prior_lag: usize,
}

impl ModelDims {
    pub fn n(&self) -> usize {
        self.n_s + self.n_e
    }

    pub fn horizon(&self) -> usize {
        self.window - self.t_split
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_s == 0 || self.n_e == 0 || self.hidden == 0 || self.prior_lag == 0 {
            return Err(Error::Config(format!(
                "latent, hidden and lag sizes must be positive: {self:?}"
            )));
        }
        if self.n_envs < 1 {
            return Err(Error::Config("need at least one environment".into()));
        }
        if self.t_split == 0 || self.t_split > self.window {
            return Err(Error::Config(format!(
                "t_split {} must lie in 1..={}",
                self.t_split, self.window
            )));
        }
        if self.window <= self.prior_lag {
            return Err(Error::Config(format!(
                "window {} must exceed the prior lag {}",
                self.window, self.prior_lag
            )));
        }
        Ok(())
    }
}

/// Term weights of the objective `pre + alpha rec - beta kld_s - gamma kld_e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElboWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ElboWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.02,
            gamma: 0.02,
        }
    }
}

/// Per-dimension z-scoring fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Column means and population standard deviations; constant columns get scale 1.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::contract("cannot standardize an empty series"));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty").to_vec();
        let std = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(col, &m)| {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.mean.len() {
            return Err(Error::contract(format!(
                "series has {} columns, model expects {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&x)?;
        Ok(Array2::from_shape_fn(x.dim(), |(t, d)| {
            (x[[t, d]] - self.mean[d]) / self.std[d]
        }))
    }

    pub fn invert(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&x)?;
        Ok(Array2::from_shape_fn(x.dim(), |(t, d)| {
            x[[t, d]] * self.std[d] + self.mean[d]
        }))
    }
}

/// Layer shapes of every network; the weights themselves live in a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Nets {
    pub enc_s: Mlp,
    pub enc_e: Mlp,
    /// Latent predictors and the future decoder; absent for a zero horizon.
    pub future: Option<FutureNets>,
    pub dec_x: Mlp,
    pub prior_s: Mlp,
    pub prior_e: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FutureNets {
    pub pred_s: Mlp,
    pub pred_e: Mlp,
    pub dec_y: Mlp,
}

impl Nets {
    fn random<R: Rng + ?Sized>(d: &ModelDims, rng: &mut R) -> Self {
        let act = Activation::LeakyRelu(HIDDEN_SLOPE);
        let (h, t, hz) = (d.hidden, d.t_split, d.horizon());
        // Small output layers start every head near zero mean and unit scale.
        let mut mlp = |dims: &[usize]| {
            let mut net = Mlp::random(dims, act, rng);
            if let Some(last) = net.layers_mut().last_mut() {
                last.weight *= OUTPUT_INIT_SCALE;
            }
            net
        };
        let enc_s = mlp(&[d.n(), h, h, 2 * d.n_s]);
        let enc_e = mlp(&[d.n(), h, h, 2 * d.n_e]);
        let future = (hz > 0).then(|| FutureNets {
            pred_s: mlp(&[t * d.n_s, h, h, 2 * hz * d.n_s]),
            pred_e: mlp(&[t * d.n_e, h, h, 2 * hz * d.n_e]),
            dec_y: mlp(&[d.n(), h, h, d.n()]),
        });
        let dec_x = mlp(&[d.n(), h, h, d.n()]);
        let prior_s = mlp(&[d.prior_lag * d.n_s, h, 2 * d.n_s]);
        let prior_e = mlp(&[d.n_envs, 2 * d.n_e]);
        Self {
            enc_s,
            enc_e,
            future,
            dec_x,
            prior_s,
            prior_e,
        }
    }

    /// Only the shapes matter once the weights live in the parameter vector.
    fn clear_weights(&mut self) {
        let mut all = vec![
            &mut self.enc_s,
            &mut self.enc_e,
            &mut self.dec_x,
            &mut self.prior_s,
            &mut self.prior_e,
        ];
        if let Some(f) = &mut self.future {
            all.extend([&mut f.pred_s, &mut f.pred_e, &mut f.dec_y]);
        }
        for net in all {
            for layer in net.layers_mut() {
                layer.weight.fill(0.0);
                layer.bias.fill(0.0);
            }
        }
    }

    fn named(&self) -> Vec<(&'static str, &Mlp)> {
        let mut out = vec![(ENC_S, &self.enc_s), (ENC_E, &self.enc_e)];
        if let Some(f) = &self.future {
            out.extend([(PRED_S, &f.pred_s), (PRED_E, &f.pred_e)]);
        }
        out.push((DEC_X, &self.dec_x));
        if let Some(f) = &self.future {
            out.push((DEC_Y, &f.dec_y));
        }
        out.extend([(PRIOR_S, &self.prior_s), (PRIOR_E, &self.prior_e)]);
        out
    }
}

/// Encoders, latent predictors, decoders and modular priors of the sequential model.
#[derive(Debug, Clone, PartialEq)]
pub struct IdeaModel {
    pub dims: ModelDims,
    pub weights: ElboWeights,
    pub standardizer: Standardizer,
    /// Seed that produced the initial weights.
    pub seed: u64,
    pub params: ParamVector,
    pub(crate) nets: Nets,
}

impl IdeaModel {
    /// Fresh model with random weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        dims: ModelDims,
        weights: ElboWeights,
        standardizer: Standardizer,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        if standardizer.mean.len() != dims.n() || standardizer.std.len() != dims.n() {
            return Err(Error::contract("standardizer width differs from n_s + n_e"));
        }
        let mut nets = Nets::random(&dims, rng);
        let mut params = ParamVector::new();
        for (prefix, net) in nets.named() {
            params.push_mlp(prefix, net)?;
        }
        nets.clear_weights();
        Ok(Self {
            dims,
            weights,
            standardizer,
            seed,
            params,
            nets,
        })
    }

    /// Model whose parameters are all zero.
    pub fn zeros(dims: ModelDims, weights: ElboWeights) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(dims, weights, Standardizer::identity(dims.n()), 0, &mut rng)?;
        m.params.values_mut().iter_mut().for_each(|v| *v = 0.0);
        Ok(m)
    }

    pub fn has_future(&self) -> bool {
        self.nets.future.is_some()
    }

    /// Overwrites one named parameter block.
    pub fn set_param(&mut self, name: &str, value: ArrayView2<f64>) -> Result<()> {
        let slot = self.params.slot(name)?.clone();
        if value.dim() != (slot.rows, slot.cols) {
            return Err(Error::contract(format!(
                "`{name}` has shape {:?}, got {:?}",
                (slot.rows, slot.cols),
                value.dim()
            )));
        }
        let range = slot.range();
        for (dst, &src) in self.params.values_mut()[range].iter_mut().zip(value.iter()) {
            *dst = src;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self
            .params
            .slots()
            .iter()
            .map(|s| NamedArray {
                name: s.name.clone(),
                rows: s.rows,
                cols: s.cols,
                values: self.params.values()[s.range()].to_vec(),
            })
            .collect();
        io::write_json(
            path,
            &Checkpoint {
                dims: self.dims,
                weights: self.weights,
                standardizer: self.standardizer.clone(),
                seed: self.seed,
                params,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = io::read_json(path)?;
        ck.dims
            .validate()
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let mut m = Self::zeros(ck.dims, ck.weights)?;
        if ck.standardizer.mean.len() != ck.dims.n() || ck.standardizer.std.len() != ck.dims.n() {
            return Err(Error::parse(
                path,
                "standardizer width differs from n_s + n_e",
            ));
        }
        m.standardizer = ck.standardizer;
        m.seed = ck.seed;
        if ck.params.len() != m.params.slots().len() {
            return Err(Error::parse(
                path,
                format!(
                    "{} parameter arrays, expected {}",
                    ck.params.len(),
                    m.params.slots().len()
                ),
            ));
        }
        for p in &ck.params {
            let block = ArrayView2::from_shape((p.rows, p.cols), &p.values).map_err(|_| {
                Error::parse(path, format!("`{}` has the wrong number of values", p.name))
            })?;
            m.set_param(&p.name, block)
                .map_err(|e| Error::parse(path, e.to_string()))?;
        }
        if !m.params.values().iter().all(|v| v.is_finite()) {
            return Err(Error::parse(path, "non-finite parameter"));
        }
        Ok(m)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    dims: ModelDims,
    weights: ElboWeights,
    standardizer: Standardizer,
    seed: u64,
    params: Vec<NamedArray>,
}

/// Standard-normal draws for every reparameterised sample of a batch of `b` windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// `b * t_split x n_s`, window-major.
    pub enc_s: Array2<f64>,
    pub enc_e: Array2<f64>,
    /// `b * horizon x n_s`, window-major.
    pub pred_s: Array2<f64>,
    pub pred_e: Array2<f64>,
}

impl Noise {
    pub fn zeros(d: &ModelDims, b: usize) -> Self {
        let (t, h) = (b * d.t_split, b * d.horizon());
        Self {
            enc_s: Array2::zeros((t, d.n_s)),
            enc_e: Array2::zeros((t, d.n_e)),
            pred_s: Array2::zeros((h, d.n_s)),
            pred_e: Array2::zeros((h, d.n_e)),
        }
    }

    pub fn sample<R: Rng + ?Sized>(d: &ModelDims, b: usize, rng: &mut R) -> Self {
        let mut n = Self::zeros(d, b);
        for a in [&mut n.enc_s, &mut n.enc_e, &mut n.pred_s, &mut n.pred_e] {
            a.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        }
        n
    }

    pub(crate) fn check(&self, d: &ModelDims, b: usize) -> Result<()> {
        let want = Self::zeros(d, b);
        for (name, got, exp) in [
            ("enc_s", &self.enc_s, &want.enc_s),
            ("enc_e", &self.enc_e, &want.enc_e),
            ("pred_s", &self.pred_s, &want.pred_s),
            ("pred_e", &self.pred_e, &want.pred_e),
        ] {
            if got.dim() != exp.dim() {
                return Err(Error::contract(format!(
                    "noise `{name}` has shape {:?}, expected {:?}",
                    got.dim(),
                    exp.dim()
                )));
            }
        }
        Ok(())
    }
}
