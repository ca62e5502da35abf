use super::graph::{Graph, Var};
use super::value::Tensor;
use crate::error::{arg_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids()
            .filter(move |id| self.names[id.0].starts_with(prefix))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces all values with those of `other`, which must have identical
    /// names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return arg_err("parameter names differ");
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return arg_err(format!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                ));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// A forward pass over a graph that binds parameters lazily.
///
/// Parameters in the trainable set become gradient-tracking leaves; all
/// others enter the graph as constants.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'a> Session<'a> {
    /// Session where no parameter is trainable.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, std::iter::empty())
    }

    pub fn with_trainable(
        store: &'a ParamStore,
        trainable: impl IntoIterator<Item = ParamId>,
    ) -> Self {
        let mut mask = vec![false; store.len()];
        for id in trainable {
            mask[id.0] = true;
        }
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: mask,
        }
    }

    /// Session that records onto an existing graph.
    pub fn from_graph(graph: Graph, store: &'a ParamStore) -> Self {
        let mut s = Self::inference(store);
        s.graph = graph;
        s
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    /// Uses `var` for parameter `id` instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    pub fn all_trainable(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, store.ids())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .graph
            .leaf(self.store.get(id).clone(), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients for every trainable parameter, zeros for those the forward
    /// pass never touched. Call after [`Session::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.store
            .ids()
            .filter(|id| self.trainable[id.0])
            .map(|id| {
                let g = self.bound[id.0]
                    .and_then(|v| self.graph.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()));
                (id, g)
            })
            .collect()
    }
}
