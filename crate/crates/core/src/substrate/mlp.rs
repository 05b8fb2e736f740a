use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "slope", rename_all = "snake_case")]
pub enum Activation {
    /// `max(x, slope * x)`; the negative branch is used at exactly zero.
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Dense feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("an Mlp needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::contract(format!(
                    "layer {k}: bias length {} != output dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if let Activation::LeakyRelu(slope) = layer.activation {
                if !(slope > 0.0 && slope < 1.0) {
                    return Err(Error::contract(format!(
                        "layer {k}: leaky-relu slope {slope} outside (0, 1)"
                    )));
                }
            }
            if !layer
                .weight
                .iter()
                .chain(layer.bias.iter())
                .all(|v| v.is_finite())
            {
                return Err(Error::contract(format!("layer {k}: non-finite parameter")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::contract(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Randomly initialised network with `dims = [in, hidden.., out]`.
    ///
    /// Hidden layers use `hidden_act`, the last layer is linear. Weights are
    /// scaled normal draws (fan-in), biases start at zero.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], hidden_act: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let n_layers = dims.len() - 1;
        let layers = (0..n_layers)
            .map(|k| {
                let (fan_in, fan_out) = (dims[k], dims[k + 1]);
                let gain = if k + 1 < n_layers {
                    2.0_f64.sqrt()
                } else {
                    1.0
                };
                let scale = gain / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                });
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation: if k + 1 < n_layers {
                        hidden_act
                    } else {
                        Activation::Identity
                    },
                }
            })
            .collect();
        Self { layers }
    }

    /// Single identity-activated layer `W x + b`.
    pub fn affine(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        Self::new(vec![Layer {
            weight,
            bias,
            activation: Activation::Identity,
        }])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_dim() {
            return Err(Error::contract(format!(
                "mlp input has length {}, expected {}",
                input.len(),
                self.in_dim()
            )));
        }
        let mut h = Array1::from(input.to_vec());
        for layer in &self.layers {
            h = forward_layer(layer, h.view());
        }
        Ok(h.to_vec())
    }

    /// Applies the network to every row of `x`.
    pub fn apply_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::contract(format!(
                "mlp input has width {}, expected {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let mut out = h.dot(&layer.weight.t());
            out += &layer.bias.view().insert_axis(Axis(0));
            out.mapv_inplace(|v| layer.activation.apply(v));
            h = out;
        }
        Ok(h)
    }
}

fn forward_layer(layer: &Layer, input: ArrayView1<f64>) -> Array1<f64> {
    let mut out = layer.weight.dot(&input) + &layer.bias;
    out.mapv_inplace(|v| layer.activation.apply(v));
    out
}
