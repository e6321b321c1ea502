//! Named parameter collections and their binding into a graph.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered set of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if self.entries[i].1.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name:?} has shape {:?}, not {:?}",
                self.entries[i].1.shape(),
                value.shape()
            )));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Entries whose names satisfy `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter().filter(|(n, _)| keep(n)) {
            out.insert(name, t.clone()).expect("names are unique");
        }
        out
    }

    /// Overwrites every entry of `other` into `self`.
    pub fn update_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, t) in other.iter() {
            self.set(name, t.clone())?;
        }
        Ok(())
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_aligned(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "parameter sets have {} and {} entries",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::dim(format!(
                    "entry {na:?} {:?} does not align with {nb:?} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Global L2 norm over every coordinate of every entry.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// `self + alpha * direction`, entry by entry.
    pub fn add_scaled(&self, direction: &ParamSet, alpha: f64) -> Result<ParamSet> {
        self.check_aligned(direction)?;
        let mut out = ParamSet::new();
        for ((name, t), (_, d)) in self.iter().zip(direction.iter()) {
            let data = t.data().iter().zip(d.data()).map(|(a, b)| a + alpha * b).collect();
            out.insert(name, Tensor::from_parts(t.shape().to_vec(), data))?;
        }
        Ok(out)
    }

    /// Every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name, t.map(|v| v * factor)).expect("names are unique");
        }
        out
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.insert(name, Tensor::zeros(t.shape())).expect("names are unique");
        }
        out
    }

    /// Bit patterns of every value in order, for exact comparisons.
    pub fn bits(&self) -> Vec<u64> {
        self.entries.iter().flat_map(|(_, t)| t.bits()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    /// Adds every entry to `graph` as a gradient-tracked leaf.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), graph.param(t.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for the entries of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    /// Wraps existing graph handles, e.g. a mix of leaves and constants.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::InvalidArgument(format!("parameter {name:?} is not bound")))
    }

    /// Gradient for every bound entry, in binding order.
    pub fn collect(&self, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, var) in &self.vars {
            let g = grads.get(*var).cloned().expect("bound params are gradient-tracked leaves");
            out.insert(name.clone(), g).expect("names are unique");
        }
        out
    }
}
