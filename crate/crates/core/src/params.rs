//! Named trainable parameters, their gradient slots and the JSON checkpoint
//! format (`{"name": {"rows": r, "cols": c, "data": [...]}, ...}`).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;

use crate::error::{contract, ensure, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Which update rule a parameter follows during estimator training: the
/// encoder (`theta`, everything up to and including the MBC pooling layer)
/// or the decoder side (`lambda`, downstream set blocks and the task head).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Matrix,
    grad: Matrix,
    group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix, group: ParamGroup) -> Result<ParamId> {
        ensure!(!self.index.contains_key(name), "duplicate parameter name {name:?}");
        let id = ParamId(self.entries.len());
        let (r, c) = value.shape();
        self.entries.push(Entry {
            name: name.to_owned(),
            value,
            grad: Matrix::zeros(r, c),
            group,
        });
        self.index.insert(name.to_owned(), id);
        Ok(id)
    }

    /// Weight matrix initialized from `N(0, 1/fan_in)`.
    pub fn insert_weight<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<ParamId> {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.insert(name, Matrix::random_normal(fan_in, fan_out, std, rng), group)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| contract!("unknown parameter {name:?}"))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Euclidean norm of the gradients of one group.
    pub fn grad_norm(&self, group: ParamGroup) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.grad.frobenius_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_checkpoint(&self) -> BTreeMap<String, Matrix> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrites parameter values from a checkpoint map. Every name must be
    /// known, every known parameter must be present, and shapes must match.
    pub fn load_checkpoint(&mut self, values: BTreeMap<String, Matrix>) -> Result<()> {
        for name in values.keys() {
            ensure!(self.index.contains_key(name), "checkpoint has unknown parameter {name:?}");
        }
        for e in &self.entries {
            ensure!(values.contains_key(&e.name), "checkpoint is missing parameter {:?}", e.name);
        }
        for (name, value) in values {
            let id = self.index[&name];
            let e = &mut self.entries[id.0];
            ensure!(
                e.value.shape() == value.shape(),
                "parameter {name:?}: checkpoint shape {:?} vs model shape {:?}",
                value.shape(),
                e.value.shape()
            );
            e.value = value;
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let values: BTreeMap<String, Matrix> = serde_json::from_str(&text)?;
        self.load_checkpoint(values)
    }
}

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}
