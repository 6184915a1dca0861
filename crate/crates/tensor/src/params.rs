use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors of one network. Names are dot-separated paths
/// (`"fdbg.block0.conv.weight"`).
#[derive(Clone, Debug)]
pub struct ParamStore<F: Float> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar counts grouped by the first `depth` path segments.
    pub fn census(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            let key = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += v.len();
        }
        out
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }

    /// Overwrites every value with the matching tensor of `other`.
    pub fn copy_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        self.check_layout(other)?;
        for (d, s) in self.values.iter_mut().zip(&other.values) {
            d.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamStore<F>) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::invalid("ParamStore", "parameter names differ"));
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(TensorError::shape("ParamStore", a.shape(), b.shape()));
            }
        }
        Ok(())
    }
}

/// Graph variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<F: Float> Graph<F> {
    /// Adds every parameter of `store` as a leaf.
    pub fn bind(&mut self, store: &ParamStore<F>, trainable: bool) -> Bound {
        let vars = store.values.iter().map(|v| self.leaf(v.clone(), trainable)).collect();
        Bound { vars }
    }
}
