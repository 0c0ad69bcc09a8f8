use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Named parameter map with deterministic (lexicographic) iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

/// Gradients keyed exactly like the store they were computed for.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        debug_assert!(!self.map.contains_key(&name), "duplicate parameter `{name}`");
        self.map.insert(name, t.with_grad());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::MissingParam { name: name.to_string() })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::MissingParam { name: name.to_string() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Zero-filled gradient map with exactly this store's keys.
    pub fn zero_grads(&self) -> GradMap<T> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect(),
        }
    }
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameters bound into a graph as gradient-carrying leaves.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParameterStore<T>) -> Self {
        let vars = params
            .iter()
            .map(|(name, tensor)| (name.clone(), g.leaf(tensor.clone())))
            .collect();
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam { name: name.to_string() })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Run a loss computation and return `(loss, gradients)`. The gradient map
/// carries exactly the store's keys; parameters the loss never touched get
/// zero tensors.
pub fn forward_backward<T: Scalar, F>(
    params: &ParameterStore<T>,
    loss_fn: F,
) -> Result<(T, GradMap<T>)>
where
    F: FnOnce(&mut Graph<T>, &BoundParams) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params);
    let loss = loss_fn(&mut g, &bound)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::shape("forward_backward", "loss must be scalar".to_string()));
    }
    let loss_value = g.value(loss).item();
    g.backward(loss)?;
    let mut grads = GradMap::new();
    for (name, &var) in bound.iter() {
        grads.insert(name.clone(), g.grad_or_zero(var));
    }
    for name in params.names() {
        if !grads.contains_key(name) {
            return Err(Error::MissingGrad { name: name.clone() });
        }
    }
    Ok((loss_value, grads))
}
