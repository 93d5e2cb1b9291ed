use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Named learnable tensors with their accumulated gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::new(value.shape().to_vec(), vec![0.0; value.len()]).expect("same shape");
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NumericsError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        for (d, s) in self.params[id.0].grad.data_mut().iter_mut().zip(g) {
            *d += s;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Flat JSON object `name → {"shape": [...], "values": [...]}`.
    pub fn to_checkpoint_json(&self) -> String {
        let map: BTreeMap<&str, CheckpointEntry> = self
            .params
            .iter()
            .map(|p| {
                (
                    p.name.as_str(),
                    CheckpointEntry {
                        shape: p.value.shape().to_vec(),
                        values: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_string(&map).expect("checkpoint serializes")
    }

    /// Reads a checkpoint into a store with the same parameter names, in
    /// name order.
    pub fn from_checkpoint_json(json: &str) -> Result<Self, NumericsError> {
        let map: BTreeMap<String, CheckpointEntry> =
            serde_json::from_str(json).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
        let mut store = ParamStore::new();
        for (name, entry) in map {
            let t = Tensor::new(entry.shape, entry.values).map_err(|e| NumericsError::Checkpoint(format!("{name}: {e}")))?;
            if !t.all_finite() {
                return Err(NumericsError::Checkpoint(format!("{name}: non-finite values")));
            }
            store.add(name, t);
        }
        Ok(store)
    }

    /// Copies values from `other` for every name both stores share, checking
    /// shapes. Returns an error when a parameter of `self` is missing.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<(), NumericsError> {
        for p in &mut self.params {
            let id = other.id(&p.name)?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(NumericsError::Shape(format!(
                    "{}: checkpoint shape {:?}, model expects {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
