use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named trainable tensors in a fixed registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that `other` holds exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(Error::shape(format!("parameter `{name}`"), t.shape(), o.shape()));
            }
        }
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter count differs: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}
