use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::graph::{Graph, Var};
use crate::numeric::tensor::Tensor;
use crate::numeric::Real;

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub frozen: bool,
    /// Adam first moment.
    pub m: Vec<T>,
    /// Adam second moment.
    pub v: Vec<T>,
}

/// Named trainable (and frozen) parameters with optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
    pub step_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new(), step_count: 0 }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter name `{name}`")));
        }
        tensor.requires_grad = !frozen;
        tensor.grad = None;
        let n = tensor.numel();
        self.entries.insert(name, ParamEntry { tensor, frozen, m: vec![T::zero(); n], v: vec![T::zero(); n] });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Entries in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|e| !e.frozen).map(|e| e.tensor.numel()).sum()
    }

    /// Sets every element of every trainable tensor to `value`.
    pub fn fill_trainable(&mut self, value: T) {
        for e in self.entries.values_mut().filter(|e| !e.frozen) {
            e.tensor.data.iter_mut().for_each(|v| *v = value);
        }
    }

    /// Order-sensitive FNV checksum over names and raw values of entries matching `filter`.
    pub fn checksum(&self, filter: impl Fn(&str, &ParamEntry<T>) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut bytes = Vec::new();
        for (name, e) in self.entries.iter().filter(|(n, e)| filter(n, e)) {
            bytes.clear();
            bytes.extend_from_slice(name.as_bytes());
            for &v in &e.tensor.data {
                v.to_le_bytes_into(&mut bytes);
            }
            for b in &bytes {
                h = (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Places every entry on `graph` as a leaf; frozen entries are untracked.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Binding<'g, T> {
        let vars = self.entries.iter().map(|(n, e)| (n.clone(), graph.leaf(&e.tensor))).collect();
        Binding { vars }
    }

    /// Copies gradients from a finished backward pass into the gradient slots.
    /// Trainable entries that the loss does not reach get a zero gradient.
    pub fn collect_grads(&mut self, binding: &Binding<'_, T>) {
        for (name, e) in self.entries.iter_mut().filter(|(_, e)| !e.frozen) {
            let Some(var) = binding.vars.get(name) else { continue };
            let g = var.grad().unwrap_or_else(|| vec![T::zero(); e.tensor.numel()]);
            match &mut e.tensor.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.tensor.grad = None;
        }
    }

    /// One bias-corrected Adam update over every trainable entry; clears gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.entries.iter().find(|(_, e)| !e.frozen && e.tensor.grad.is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        for e in self.entries.values_mut().filter(|e| !e.frozen) {
            let grad = e.tensor.grad.take().expect("checked above");
            for i in 0..grad.len() {
                let g = grad[i];
                e.m[i] = b1 * e.m[i] + (T::one() - b1) * g;
                e.v[i] = b2 * e.v[i] + (T::one() - b2) * g * g;
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                e.tensor.data[i] = e.tensor.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.clear_grads();
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let entries = self
            .entries
            .iter()
            .map(|(n, e)| {
                let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
                (n.clone(), ParamEntry { tensor: e.tensor.cast(), frozen: e.frozen, m: conv(&e.m), v: conv(&e.v) })
            })
            .collect();
        ParamStore { entries, step_count: self.step_count }
    }
}

/// Parameters placed on a graph, looked up by name.
pub struct Binding<'g, T: Real> {
    vars: HashMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Binding<'g, T> {
    /// Builds a binding from explicit vars, e.g. leaves under a gradient check.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<'g, T>)>) -> Self {
        Binding { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Looks up `prefix.name`.
    pub fn at(&self, prefix: &str, name: &str) -> Result<Var<'g, T>> {
        self.get(&format!("{prefix}.{name}"))
    }

    pub fn opt(&self, prefix: &str, name: &str) -> Option<Var<'g, T>> {
        self.vars.get(&format!("{prefix}.{name}")).copied()
    }
}
