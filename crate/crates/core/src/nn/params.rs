//! Named trainable parameters and parameter-set bookkeeping.

use super::tensor::Tensor;
use crate::util::sha256_hex;
use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

/// A named parameter. The held tensor keeps a stable node id for the duration
/// of a forward/backward pair; `set_data` swaps in a fresh leaf.
pub struct Var {
    name: String,
    value: RwLock<Tensor>,
    trainable: RwLock<bool>,
}

impl Var {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Arc<Var> {
        Arc::new(Var {
            name: name.into(),
            value: RwLock::new(Tensor::leaf_grad(data, shape)),
            trainable: RwLock::new(true),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Current tensor; the same node id is returned until the next mutation.
    pub fn value(&self) -> Tensor {
        self.value.read().unwrap().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.read().unwrap().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.read().unwrap().numel()
    }

    pub fn trainable(&self) -> bool {
        *self.trainable.read().unwrap()
    }

    /// Replace the data (new leaf node). Keeps the trainable flag.
    pub fn set_data(&self, data: Vec<f64>) {
        let shape = self.shape();
        let t = if self.trainable() {
            Tensor::leaf_grad(data, &shape)
        } else {
            Tensor::new(data, &shape)
        };
        *self.value.write().unwrap() = t;
    }

    /// Toggle gradient participation. A frozen var exposes a no-grad leaf, so
    /// graphs that depend only on frozen parameters are pruned, while graphs
    /// mixing frozen and trainable inputs still carry gradients through.
    pub fn set_trainable(&self, trainable: bool) {
        let cur = self.value();
        let t = if trainable {
            Tensor::leaf_grad(cur.data().to_vec(), cur.shape())
        } else {
            Tensor::new(cur.data().to_vec(), cur.shape())
        };
        *self.value.write().unwrap() = t;
        *self.trainable.write().unwrap() = trainable;
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.name, self.shape())
    }
}

/// Ordered collection of named parameters.
#[derive(Default, Clone)]
pub struct ParamSet {
    vars: Vec<Arc<Var>>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, var: Arc<Var>) -> Arc<Var> {
        assert!(
            !self.vars.iter().any(|v| v.name() == var.name()),
            "duplicate parameter name {}",
            var.name()
        );
        self.vars.push(var.clone());
        var
    }

    pub fn extend(&mut self, other: &ParamSet) {
        for v in &other.vars {
            self.add(v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Var>> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.vars.iter().map(|v| v.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Var>> {
        self.vars.iter().find(|v| v.name() == name)
    }

    /// All vars whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            vars: self
                .vars
                .iter()
                .filter(|v| v.name().starts_with(prefix))
                .cloned()
                .collect(),
        }
    }

    pub fn set_trainable(&self, trainable: bool) {
        for v in &self.vars {
            v.set_trainable(trainable);
        }
    }

    /// Content hash over (name, shape, f64 data) in name order. Exact: two
    /// sets hash equal iff every parameter is bit-identical.
    pub fn content_hash(&self) -> String {
        let mut sorted: Vec<&Arc<Var>> = self.vars.iter().collect();
        sorted.sort_by(|a, b| a.name().cmp(b.name()));
        let mut bytes = Vec::new();
        for v in sorted {
            let t = v.value();
            bytes.extend_from_slice(v.name().as_bytes());
            bytes.push(0);
            for &d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    /// Name -> (shape, data) snapshot in name order.
    pub fn snapshot(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        self.vars
            .iter()
            .map(|v| {
                let t = v.value();
                (v.name().to_string(), (t.shape().to_vec(), t.data().to_vec()))
            })
            .collect()
    }

    /// Load data into matching names. Errors on shape mismatch or missing name.
    pub fn load_snapshot(
        &self,
        snap: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    ) -> Result<(), String> {
        for v in &self.vars {
            let (shape, data) = snap
                .get(v.name())
                .ok_or_else(|| format!("missing parameter {}", v.name()))?;
            if *shape != v.shape() {
                return Err(format!(
                    "shape mismatch for {}: checkpoint {:?} vs model {:?}",
                    v.name(),
                    shape,
                    v.shape()
                ));
            }
            v.set_data(data.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_with_data() {
        let mut ps = ParamSet::new();
        let v = ps.add(Var::new("a.w", vec![1.0, 2.0], &[2]));
        let h1 = ps.content_hash();
        v.set_data(vec![1.0, 2.0]);
        assert_eq!(h1, ps.content_hash(), "same data, same hash");
        v.set_data(vec![1.0, 2.0 + 1e-15]);
        assert_ne!(h1, ps.content_hash(), "bit change, new hash");
    }

    #[test]
    fn frozen_var_is_no_grad_leaf() {
        let v = Var::new("x", vec![1.0], &[1]);
        assert!(v.value().requires_grad());
        v.set_trainable(false);
        assert!(!v.value().requires_grad());
        let y = v.value().scale(2.0);
        assert!(!y.requires_grad());
    }

    #[test]
    fn subset_by_prefix() {
        let mut ps = ParamSet::new();
        ps.add(Var::new("vision.conv.w", vec![0.0], &[1]));
        ps.add(Var::new("lm.blk0.w", vec![0.0], &[1]));
        ps.add(Var::new("vision.conv.b", vec![0.0], &[1]));
        assert_eq!(ps.subset("vision.").len(), 2);
        assert_eq!(ps.subset("lm.").len(), 1);
    }
}
