use std::collections::HashMap;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Ordered named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Adds every parameter to `g` as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_as(g, true)
    }

    /// Adds every parameter to `g` as a constant (inference, frozen branches).
    pub fn bind_constant(&self, g: &mut Graph) -> Bound {
        self.bind_as(g, false)
    }

    fn bind_as(&self, g: &mut Graph, track: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if track { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let index = self.names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Bound { vars, index }
    }
}

/// Graph handles of a bound [`ParamSet`], in parameter order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients in parameter order; untouched parameters get zeros.
    pub fn grads(&self, grads: &mut Gradients, params: &ParamSet) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
