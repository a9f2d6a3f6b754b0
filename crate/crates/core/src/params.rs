//! Named parameter arrays and their gradient accumulators. Iteration is
//! always in sorted name order so checkpoints, updates and traces are
//! deterministic.

use std::collections::{BTreeMap, HashMap};

use crate::rng::{hash_str, normal, rng_for};
use crate::tensor::{Gradients, Tape, Var};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// All trainable arrays, addressable by canonical dotted names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name}: data length {} does not match shape {shape:?}",
            data.len()
        );
        assert!(
            self.entries
                .insert(name.to_string(), ParamEntry { name: name.to_string(), shape: shape.to_vec(), data })
                .is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ParamEntry {
        self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamEntry {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    /// Moves every entry of `other` in; duplicate names panic.
    pub fn absorb(&mut self, other: ParamStore) {
        for e in other.entries.into_values() {
            self.insert(&e.name.clone(), &e.shape.clone(), e.data);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn n_params(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }

    /// Xavier-uniform matrix: bound sqrt(6 / (fan_in + fan_out)), seeded per
    /// name so registration order never matters.
    pub fn insert_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = rng_for(&[seed, hash_str(name), 0xa11]);
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, &[fan_in, fan_out], data);
    }

    /// Gaussian embedding rows, sigma 0.02.
    pub fn insert_gaussian(&mut self, name: &str, shape: &[usize], seed: u64) {
        let mut rng = rng_for(&[seed, hash_str(name), 0xa22]);
        let n = shape.iter().product();
        let data = (0..n).map(|_| 0.02 * normal(&mut rng)).collect();
        self.insert(name, shape, data);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, shape, vec![0.0; shape.iter().product()]);
    }

    pub fn insert_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, shape, vec![1.0; shape.iter().product()]);
    }

    /// Creates one tape leaf per entry; names matching `frozen` become
    /// constants, so their gradients are identically zero by construction.
    pub fn bind<'t, F: Fn(&str) -> bool>(&self, tape: &'t Tape, frozen: F) -> BoundParams<'t> {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::new();
        for entry in self.entries.values() {
            let var = if frozen(&entry.name) {
                tape.constant(entry.data.clone(), &entry.shape)
            } else {
                tape.leaf(entry.data.clone(), &entry.shape)
            };
            index.insert(entry.name.clone(), vars.len());
            vars.push((entry.name.clone(), var));
        }
        BoundParams { vars, index }
    }
}

/// Tape handles for one step, name-addressable.
pub struct BoundParams<'t> {
    vars: Vec<(String, Var<'t>)>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"));
        self.vars[i].1
    }

    /// Name and tape node id of every bound parameter; lets gradient
    /// extraction outlive the borrow of the tape.
    pub fn ids(&self) -> Vec<(String, usize)> {
        self.vars.iter().map(|(n, v)| (n.clone(), v.id())).collect()
    }

    /// Adds this tape's gradients into the accumulator, in name order.
    pub fn accumulate(&self, grads: &Gradients, out: &mut GradStore) {
        let mut names: Vec<&str> = self.index.keys().map(|s| s.as_str()).collect();
        names.sort_unstable();
        for name in names {
            let var = self.var(name);
            if let Some(g) = grads.wrt(var) {
                out.add(name, g);
            }
        }
    }
}

/// Per-parameter gradient sums for one optimization step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, g: &[f64]) {
        match self.grads.get_mut(name) {
            Some(buf) => {
                assert_eq!(buf.len(), g.len(), "gradient length changed for {name}");
                for (o, v) in buf.iter_mut().zip(g) {
                    *o += v;
                }
            }
            None => {
                self.grads.insert(name.to_string(), g.to_vec());
            }
        }
    }

    /// Merges another accumulator (used to reduce per-example stores in a
    /// fixed order).
    pub fn merge(&mut self, other: &GradStore) {
        for (name, g) in &other.grads {
            self.add(name, g);
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().flat_map(|v| v.iter()).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.grads.values_mut() {
            for g in v.iter_mut() {
                *g *= c;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
