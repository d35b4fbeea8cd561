use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<NamedParam<T>>,
}

/// Param leaves of one tape, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(NamedParam { name: name.into(), tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam<T>> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Puts every parameter on the tape. Frozen binding yields constants so
    /// that inference does no gradient bookkeeping.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.param(p.tensor.clone()) } else { tape.constant(p.tensor.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradient per parameter from a backward pass over a trainable binding.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Option<Vec<T>>> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    /// Replaces values with same-named tensors from `other` (checkpoint load).
    pub fn load_from(&mut self, other: Vec<NamedParam<T>>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(other) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    src.name,
                    src.tensor.shape(),
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            dst.tensor = src.tensor;
        }
        Ok(())
    }
}

/// He-normal initialisation, `std = gain * sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.iter().product::<usize>()).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_normal_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = he_normal(&[200, 50], 50, 1.0, &mut rng);
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        assert!((var - 2.0 / 50.0).abs() < 0.004);
    }

    #[test]
    fn load_rejects_renamed_tensor() {
        let mut a = ParamStore::<f32>::new();
        a.add("w", Tensor::zeros(&[2]));
        let err = a.load_from(vec![NamedParam { name: "v".into(), tensor: Tensor::zeros(&[2]) }]);
        assert!(err.is_err());
    }
}
