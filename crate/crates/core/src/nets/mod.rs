//! Generators, patch discriminators and the paired-input directional
//! discriminator.

mod bundle;
mod discriminator;
mod generator;
mod spectral;

pub use bundle::{Architecture, DiscRole, ModelBundle, Variant, APPEARANCE_CHANNELS, G_OC_OWNER, G_VC_OWNER};
pub use discriminator::{directional_forward, Discriminator, DiscriminatorConfig, ScoreHead};
pub use generator::{Generator, GeneratorConfig};
pub use spectral::{spectral_normalize, SpectralState, SPECTRAL_EPS};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamKey, Var};
use crate::tensor::{Real, Tensor};

/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors owned by one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    owner: u32,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(owner: u32) -> Self {
        ParamSet {
            owner,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn owner(&self) -> u32 {
        self.owner
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub(crate) fn normal(&mut self, name: String, shape: &[usize], rng: &mut impl Rng) -> usize {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::lit(dist.sample(rng))).collect();
        self.push(name, Tensor::from_vec(shape, data).expect("shape/len agree"))
    }

    pub(crate) fn filled(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape, T::lit(value)))
    }

    pub fn bind(&self, g: &mut Graph<T>, index: usize, trainable: bool) -> Var {
        let key = ParamKey {
            owner: self.owner,
            index,
        };
        g.param(key, &self.tensors[index], trainable)
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            owner: self.owner,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn fill(&mut self, value: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = T::lit(value));
        }
    }
}
