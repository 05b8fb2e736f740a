use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2};

use super::mlp::Mlp;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All trainable parameters of a model as one flat vector plus a name index.
///
/// Every entry is stored row-major as a `rows x cols` block; biases are
/// `1 x out` rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    slots: Vec<Slot>,
    lookup: HashMap<String, usize>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, block: ArrayView2<f64>) -> Result<&Slot> {
        if self.lookup.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        let slot = Slot {
            name: name.to_string(),
            offset: self.values.len(),
            rows: block.nrows(),
            cols: block.ncols(),
        };
        self.values.extend(block.iter().copied());
        self.lookup.insert(name.to_string(), self.slots.len());
        self.slots.push(slot);
        Ok(self.slots.last().unwrap())
    }

    /// Appends every layer of `net` as `{prefix}.{k}.weight` / `{prefix}.{k}.bias`.
    pub fn push_mlp(&mut self, prefix: &str, net: &Mlp) -> Result<()> {
        for (k, layer) in net.layers().iter().enumerate() {
            self.push(&weight_name(prefix, k), layer.weight.view())?;
            let bias = layer.bias.view().insert_axis(ndarray::Axis(0));
            self.push(&bias_name(prefix, k), bias)?;
        }
        Ok(())
    }

    /// Copies the parameters stored under `prefix` back into `net`.
    pub fn write_mlp(&self, prefix: &str, net: &mut Mlp) -> Result<()> {
        for (k, layer) in net.layers_mut().iter_mut().enumerate() {
            let w = self.matrix(&weight_name(prefix, k))?;
            if w.dim() != layer.weight.dim() {
                return Err(Error::contract(format!(
                    "`{}` has shape {:?}, network expects {:?}",
                    weight_name(prefix, k),
                    w.dim(),
                    layer.weight.dim()
                )));
            }
            layer.weight.assign(&w);
            let b = self.matrix(&bias_name(prefix, k))?;
            if b.len() != layer.bias.len() {
                return Err(Error::contract(format!(
                    "`{}` has length {}, network expects {}",
                    bias_name(prefix, k),
                    b.len(),
                    layer.bias.len()
                )));
            }
            layer.bias = Array1::from_iter(b.iter().copied());
        }
        Ok(())
    }

    pub fn slot(&self, name: &str) -> Result<&Slot> {
        self.lookup
            .get(name)
            .map(|&i| &self.slots[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        let slot = self.slot(name)?;
        Ok(
            ArrayView2::from_shape((slot.rows, slot.cols), &self.values[slot.range()])
                .expect("slot shape matches its range"),
        )
    }

    pub fn to_matrix(&self, name: &str) -> Result<Array2<f64>> {
        Ok(self.matrix(name)?.to_owned())
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::contract(format!(
                "parameter vector has length {}, got {}",
                self.values.len(),
                values.len()
            )));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn weight_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}.{layer}.weight")
}

pub fn bias_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}.{layer}.bias")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::mlp::Activation;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn flatten_roundtrip_and_disjoint_cover(seed in 0u64..1000, hidden in 1usize..6, out in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Mlp::random(&[3, hidden, out], Activation::LeakyRelu(0.2), &mut rng);
            let b = Mlp::random(&[out, 2], Activation::Identity, &mut rng);
            let mut pv = ParamVector::new();
            pv.push_mlp("a", &a).unwrap();
            pv.push_mlp("b", &b).unwrap();
            prop_assert_eq!(pv.len(), a.param_count() + b.param_count());

            let mut covered = vec![0u8; pv.len()];
            for slot in pv.slots() {
                for i in slot.range() {
                    covered[i] += 1;
                }
            }
            prop_assert!(covered.iter().all(|&c| c == 1));

            let mut a2 = Mlp::random(&[3, hidden, out], Activation::LeakyRelu(0.2), &mut rng);
            let mut b2 = Mlp::random(&[out, 2], Activation::Identity, &mut rng);
            pv.write_mlp("a", &mut a2).unwrap();
            pv.write_mlp("b", &mut b2).unwrap();
            prop_assert_eq!(a2, a);
            prop_assert_eq!(b2, b);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut pv = ParamVector::new();
        let m = Array2::<f64>::zeros((1, 1));
        pv.push("x", m.view()).unwrap();
        assert!(pv.push("x", m.view()).is_err());
        assert!(pv.slot("y").is_err());
    }
}
