//! Binds a [`ParameterStore`] to a [`Graph`] for one forward/backward pass.

use std::collections::{BTreeMap, HashMap};
use std::ops::{Deref, DerefMut};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParameterStore, Tag};
use crate::tensor::{Array, Precision};

/// A graph plus lazily created leaves for store tensors.
///
/// Tunable tensors become differentiable leaves, frozen tensors constants.
/// In inference mode every tensor is a constant.
pub struct Session<'s> {
    graph: Graph,
    store: &'s ParameterStore,
    bound: HashMap<String, Var>,
    differentiate: bool,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParameterStore, precision: Precision) -> Self {
        Self {
            graph: Graph::new(precision),
            store,
            bound: HashMap::new(),
            differentiate: true,
        }
    }

    pub fn inference(store: &'s ParameterStore, precision: Precision) -> Self {
        Self {
            differentiate: false,
            ..Self::new(store, precision)
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    /// Leaf for the named store tensor, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let tunable = self.store.tag(name)?.is_tunable();
        let v = if tunable && self.differentiate {
            self.graph.param(value)?
        } else {
            self.graph.constant(value)?
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, value: Array) -> Result<Var> {
        self.graph.constant(value)
    }

    /// Backpropagates from `loss` and returns one gradient per tunable store
    /// tensor, zero-filled for tensors the loss never touched.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Array>> {
        Ok(self.gradients_with(loss, &[])?.0)
    }

    /// Backpropagates from `loss` and also returns the adjoints of `extra` leaves.
    pub fn gradients_with(&self, loss: Var, extra: &[Var]) -> Result<(BTreeMap<String, Array>, Vec<Array>)> {
        let grads = self.graph.backward(loss)?;
        let precision = self.graph.precision();
        let mut out = BTreeMap::new();
        for (name, entry) in self.store.iter() {
            if entry.tag == Tag::Frozen {
                continue;
            }
            let g = match self.bound.get(name) {
                Some(v) => grads.get_or_zero(*v),
                None => Array::zeros(entry.value.shape().to_vec()).with_precision(precision),
            };
            out.insert(name.to_string(), g);
        }
        let extras = extra.iter().map(|v| grads.get_or_zero(*v)).collect();
        Ok((out, extras))
    }
}

impl Deref for Session<'_> {
    type Target = Graph;
    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}
