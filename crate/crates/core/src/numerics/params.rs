use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in deterministic (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Invalid(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters, optionally restricted to a name prefix.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Moves in every entry of `other`, replacing existing names.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn retain(&mut self, keep: impl FnMut(&String, &mut Tensor) -> bool) {
        self.params.retain(keep);
    }
}

/// Whether weight decay applies to a parameter: matrices only, excluding
/// positional tables.
pub fn decays(name: &str, value: &Tensor) -> bool {
    value.ndim() >= 2 && !name.ends_with(".pos")
}

/// Which bound parameters receive gradients.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    Nothing,
    /// Only parameters whose name starts with one of the prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    fn admits(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Session<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: Trainable,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore, trainable: Trainable) -> Self {
        Session { tape: Tape::new(), store, bound: BTreeMap::new(), trainable }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Leaf for a named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
        let v = self.tape.leaf(value.clone(), self.trainable.admits(name))?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.tape.constant(value)
    }

    /// Gradients of every bound trainable parameter that lies on a path to the loss.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter(|(name, _)| self.trainable.admits(name))
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

/// Elementwise `acc += g` over named gradient maps.
pub fn accumulate_grads(acc: &mut BTreeMap<String, Vec<f64>>, g: BTreeMap<String, Vec<f64>>) {
    for (name, grad) in g {
        match acc.get_mut(&name) {
            Some(a) => a.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
            None => {
                acc.insert(name, grad);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("head.weight", Tensor::scalar(2.0)).unwrap();
        store.insert("encoder.w", Tensor::scalar(3.0)).unwrap();
        let mut s = Session::new(&store, Trainable::Prefixes(vec!["head.".into()]));
        let h = s.param("head.weight").unwrap();
        let e = s.param("encoder.w").unwrap();
        let p = s.tape.mul(h, e).unwrap();
        let g = s.tape.backward(p).unwrap();
        let grads = s.param_grads(&g);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["head.weight"], vec![3.0]);
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("a", Tensor::scalar(1.0)).is_err());
    }
}
