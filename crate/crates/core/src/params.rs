//! Named parameter storage and per-forward sessions.
//!
//! Parameters live in a [`ParamStore`] as plain buffers. A [`Session`] wraps
//! them into graph leaves on first use so one forward pass sees each
//! parameter as a single tensor, and gradients can be collected afterwards.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use pmsr_tensor::{SplitMix64, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Arc<Vec<f64>>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "param {name}");
        assert!(!self.index.contains_key(&name), "duplicate param {name}");
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(Arc::new(values));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn total(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Mutable access; clones the buffer if a live tensor still shares it.
    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values[id.0].len() {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} values, got {}",
                self.names[id.0],
                self.values[id.0].len(),
                values.len()
            )));
        }
        self.values[id.0] = Arc::new(values);
        Ok(())
    }

    /// Sum of parameter counts grouped by the first `depth` dot-separated
    /// name segments, in first-seen order.
    pub fn breakdown(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some(e) => e.1 += v.len(),
                None => out.push((key, v.len())),
            }
        }
        out
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut SplitMix64,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut SplitMix64) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn rng(&mut self) -> &mut SplitMix64 {
        self.rng
    }

    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, shape.to_vec(), values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![v; n])
    }

    /// Truncated normal with std `gain * sqrt(2 / fan_in)`.
    pub fn he(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        self.normal(name, shape, std)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let v = (0..n).map(|_| self.rng.truncated_normal(std)).collect();
        self.add(name, shape, v)
    }
}

/// One forward pass worth of parameter leaves.
pub struct Session<'a> {
    store: &'a ParamStore,
    train: bool,
    leaves: RefCell<Vec<Option<Tensor>>>,
}

impl<'a> Session<'a> {
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::make(store, false)
    }

    pub fn training(store: &'a ParamStore) -> Self {
        Self::make(store, true)
    }

    fn make(store: &'a ParamStore, train: bool) -> Self {
        Self {
            store,
            train,
            leaves: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn p(&self, id: ParamId) -> Tensor {
        let mut leaves = self.leaves.borrow_mut();
        leaves[id.0]
            .get_or_insert_with(|| {
                let t = Tensor::new(self.store.values[id.0].to_vec(), &self.store.shapes[id.0])
                    .expect("stored shape matches values");
                if self.train {
                    t.with_grad()
                } else {
                    t
                }
            })
            .clone()
    }

    /// Gradients for every parameter touched by the pass; `None` otherwise.
    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        self.leaves
            .borrow()
            .iter()
            .map(|l| l.as_ref().and_then(|t| t.grad()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_nest_and_breakdown_groups() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let mut init = Init::new(&mut store, &mut rng);
        {
            let mut g = init.sub("g0");
            g.constant("w", &[2, 3], 1.0);
            g.sub("conv").constant("b", &[4], 0.0);
        }
        init.constant("head", &[5], 0.0);
        assert_eq!(store.total(), 15);
        assert!(store.find("g0.conv.b").is_some());
        assert_eq!(store.breakdown(1), vec![("g0".into(), 10), ("head".into(), 5)]);
    }

    #[test]
    fn session_shares_one_leaf_per_param() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let id = Init::new(&mut store, &mut rng).constant("w", &[3], 2.0);
        let s = Session::training(&store);
        let a = s.p(id);
        let loss = a.mul(&s.p(id)).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(s.grads()[0].as_deref(), Some(&[4.0, 4.0, 4.0][..]));
        assert!(!Session::inference(&store).p(id).requires_grad());
    }

    #[test]
    fn he_init_scale() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(7);
        let id = Init::new(&mut store, &mut rng).he("w", &[200, 50], 50, 1.0);
        let v = store.values(id);
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        // truncation at 2 sigma shrinks the variance to ~0.774
        let expect = 0.774 * 2.0 / 50.0;
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
        assert!(v.iter().all(|x| x.abs() <= 2.0 * (0.04f64).sqrt()));
    }
}
