use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every entry of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, index: usize) -> Var {
        self.0[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces the values of entry `index`, keeping its shape.
    pub fn set(&mut self, index: usize, data: Vec<f32>) -> Result<()> {
        let shape = self.tensors[index].shape().to_vec();
        self.tensors[index] = Tensor::new(&shape, data)?;
        Ok(())
    }

    /// Registers every tensor in `g`; `trainable` selects params vs constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| if trainable { g.param(t) } else { g.constant(t) })
                .collect(),
        )
    }

    /// Binds as constants except entry `index`, which is bound as the
    /// already-recorded variable `replacement`.
    pub fn bind_with(&self, g: &mut Graph, index: usize, replacement: Var) -> Bound {
        Bound(
            self.tensors
                .iter()
                .enumerate()
                .map(|(i, t)| if i == index { replacement } else { g.constant(t) })
                .collect(),
        )
    }

    /// Gradients of the bound entries after `g.backward`, zero-filled where a
    /// parameter did not influence the loss.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Vec<f32>> {
        self.tensors
            .iter()
            .zip(bound.vars())
            .map(|(t, &v)| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }

    /// Loads values from `other` by name; every name must be present with
    /// an identical shape.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let i = other
                .index_of(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if other.tensors[i].shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    other.tensors[i].shape(),
                    t.shape()
                )));
            }
            *t = other.tensors[i].clone();
        }
        Ok(())
    }
}

/// Deterministic parameter initialisation.
pub(crate) struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// He-normal weights for a layer with `fan_in` inputs per output.
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("positive std");
        Tensor::from_fn(shape, |_| normal.sample(&mut self.rng))
    }

}
