use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
}

/// Named learnable tensors with a per-name trainable flag.
///
/// Names are kept sorted so every iteration (hashing, checkpointing,
/// gradient reduction) visits them in the same order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), Entry { tensor, trainable });
        Ok(())
    }

    /// Moves every entry of `other` in; any name clash is an error and
    /// leaves `self` unchanged.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        if let Some(n) = other.entries.keys().find(|n| self.entries.contains_key(*n)) {
            return Err(Error::DuplicateParam(n.clone()));
        }
        self.entries.extend(other.entries);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn put(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.to_string(), Entry { tensor, trainable });
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name).map(|e| e.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        e.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.entries.values_mut().for_each(|e| e.trainable = false);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.tensor, e.trainable))
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    /// Per-tensor SHA-256, keyed by name.
    pub fn tensor_hashes(&self) -> BTreeMap<String, String> {
        self.entries.iter().map(|(k, e)| (k.clone(), e.tensor.sha256())).collect()
    }

    /// One digest over every name, shape and payload.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, e) in &self.entries {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(e.tensor.sha256().as_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Plain gradient descent: `p <- p - lr * g` for each supplied gradient.
///
/// Only trainable names may carry gradients. A zero learning rate leaves
/// the store untouched byte for byte.
pub fn sgd_step(params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    check_update(params, grads, lr)?;
    if lr == 0.0 {
        return Ok(());
    }
    for (name, g) in grads {
        let e = params.entries.get_mut(name).expect("checked above");
        for (p, gv) in e.tensor.data.iter_mut().zip(&g.data) {
            *p -= lr * gv;
        }
    }
    Ok(())
}

fn check_update(params: &ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Attribute(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    for name in grads.keys() {
        match params.entries.get(name) {
            None => return Err(Error::UnknownParam(name.clone())),
            Some(e) if !e.trainable => return Err(Error::FrozenGradient(name.clone())),
            Some(e) if e.tensor.shape != grads[name].shape => {
                return Err(Error::Shape {
                    node: 0,
                    msg: format!("gradient for `{name}` has shape {:?}, parameter {:?}", grads[name].shape, e.tensor.shape),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

/// Adam with bias correction. Moment buffers are keyed by parameter name
/// and created on first use.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// A zero learning rate leaves the store untouched byte for byte.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        check_update(params, grads, lr)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let e = params.entries.get_mut(name).expect("checked above");
            for (i, &gv) in g.data.iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                if lr > 0.0 {
                    e.tensor.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}
