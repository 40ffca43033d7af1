//! Seeded parameter initialization.
//!
//! Every tensor draws from its own generator, seeded by hashing the run seed
//! together with the parameter name, so adding or removing a module never
//! changes the initial values of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

pub const INIT_STD: f64 = 0.02;

pub fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest length"))
}

/// Normal samples with scale `std`, redrawn until inside `[-2 std, 2 std]`.
pub fn trunc_normal(shape: &[usize], std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(input: usize, output: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = (6.0 / (input + output) as f64).sqrt();
    let data = (0..input * output).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(input, output, data).expect("shape")
}

/// Registers parameters into a store with name-derived seeds.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init { store, seed }
    }

    /// `{name}.weight: [input, output]` Xavier uniform, `{name}.bias` zeros.
    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<()> {
        let w = format!("{name}.weight");
        let value = xavier_uniform(input, output, name_seed(self.seed, &w));
        self.store.insert(w, value)?;
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[output]))
    }

    /// `{name}.gain` ones and `{name}.bias` zeros.
    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.store.insert(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?;
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let value = trunc_normal(shape, INIT_STD, name_seed(self.seed, name));
        self.store.insert(name, value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_holds() {
        let t = trunc_normal(&[50, 40], 0.02, 3);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        assert_ne!(name_seed(1, "a"), name_seed(1, "b"));
        assert_ne!(name_seed(1, "a"), name_seed(2, "a"));
    }

    #[test]
    fn xavier_bound_and_spread() {
        let t = xavier_uniform(40, 60, 5);
        let a = (6.0f64 / 100.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= a));
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((var - a * a / 3.0).abs() < 0.1 * a * a / 3.0);
    }
}
