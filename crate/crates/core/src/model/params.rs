use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Named model tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Parameters<T> {
    /// Seeded initialisation: Xavier-uniform matrices, small normal
    /// embeddings, unit layer-norm gains and zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb_std = 0.5 / (config.d_model as f64).sqrt();
        let normal = Normal::new(0.0, emb_std).expect("positive std");
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.starts_with("embed.") {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            let data = data.into_iter().map(T::from_f64_lossy).collect();
            let t = Tensor::new(shape, data).expect("shape matches data").with_requires_grad(true);
            tensors.insert(name, t);
        }
        Parameters { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Parameters { tensors }
    }

    /// Errors if names or shapes differ from what `config` expects.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let want = config.parameter_shapes();
        for (name, shape) in &want {
            match self.tensors.get(name) {
                None => return Err(Error::Shape(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if self.tensors.len() != want.len() {
            let extra = self.tensors.keys().find(|k| !want.iter().any(|(n, _)| n == *k));
            return Err(Error::Shape(format!("unexpected parameter `{}`", extra.map_or("?", |s| s.as_str()))));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>().with_requires_grad(v.requires_grad())))
                .collect(),
        }
    }
}
