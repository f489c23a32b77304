//! Named parameter storage and checkpoint files.
//!
//! Checkpoints are JSON documents:
//!
//! ```text
//! {
//!   "format": "acrkn-params",
//!   "version": 1,
//!   "meta": <any JSON value>,
//!   "params": [ { "name": "...", "shape": [..], "values": [..] }, ... ]
//! }
//! ```
//!
//! Parameters appear in insertion order. Values are written with the
//! shortest representation that parses back to the identical `f64`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "acrkn-params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) -> Result<()> {
        let slot = &mut self.grads[id.0];
        if slot.len() != g.len() {
            return Err(NumericsError::InvalidShape {
                op: "accumulate_grad",
                detail: format!("`{}` expects {} values, got {}", self.names[id.0], slot.len(), g.len()),
            });
        }
        for (d, &s) in slot.data_mut().iter_mut().zip(g) {
            *d += s;
        }
        Ok(())
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// Euclidean norm of all gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm measured before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for g in &mut self.grads {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
        norm
    }

    /// Copies values (not gradients) from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(NumericsError::InvalidArgument(
                "parameter layouts differ".to_string(),
            ));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src.data())?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            meta,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, t)| CheckpointEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(NumericsError::Checkpoint(format!(
                "unexpected format tag `{}`",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(NumericsError::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        let mut store = ParamStore::new();
        for entry in &ckpt.params {
            let t = Tensor::new(entry.shape.clone(), entry.values.clone())
                .map_err(|e| NumericsError::Checkpoint(format!("`{}`: {e}", entry.name)))?;
            store.add(entry.name.clone(), t)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint(meta))?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Loads a checkpoint file, returning the store and its `meta` block.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        let store = Self::from_checkpoint(&ckpt)?;
        Ok((store, ckpt.meta))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<CheckpointEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}
