//! Named trainable parameters and their binding onto a tape.

use std::collections::HashMap;

use super::tensor::Tensor;
use super::{Tape, Var};

/// Index of a parameter inside a [`ParamSet`]. Stable across snapshots of
/// the same set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// One named weight tensor with a gradient accumulator of identical shape.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of parameters. Iteration order is creation order,
/// which keeps every run of the same model bit-reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a parameter. Panics on duplicate names; parameter layouts
    /// are built once per model, so a duplicate is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Adds the tape adjoints of every bound parameter into the stored
    /// gradient accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape, binding: &Binding) {
        for (param, var) in self.params.iter_mut().zip(&binding.vars) {
            let g = tape.grad(*var);
            for (dst, src) in param.grad.data_mut().iter_mut().zip(g.data()) {
                *dst += src;
            }
        }
    }
}

/// Tape leaves holding a snapshot of every parameter, in set order.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl Tape {
    /// Copies the current parameter values onto the tape as leaves.
    pub fn bind(&self, set: &ParamSet) -> Binding {
        Binding {
            vars: set.params.iter().map(|p| self.leaf(p.value.clone())).collect(),
        }
    }
}
