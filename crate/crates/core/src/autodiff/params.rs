use indexmap::IndexMap;

use super::{AutodiffError, Result, Tape, Tensor, Var};

/// Named collection of tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same keys and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }
}

/// Parameters recorded on one tape, keyed like the store they came from.
#[derive(Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    /// Collects per-parameter gradients into a store with the same layout.
    pub fn gradients(&self, tape: &Tape, output: Var) -> Result<ParamStore> {
        let grads = tape.backward(output)?;
        let mut store = ParamStore::new();
        for (name, &var) in &self.vars {
            let g = match grads.get(var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(tape.shape(var)?),
            };
            store.insert(name.clone(), g);
        }
        Ok(store)
    }
}

impl ParamStore {
    /// Records every tensor on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        let mut vars = IndexMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let v = if trainable { tape.param(t.clone())? } else { tape.constant(t.clone())? };
            vars.insert(name.clone(), v);
        }
        Ok(BoundParams { vars })
    }
}
