use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is, used by strategies to pick their trainable set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
}

/// Which component added the parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Prompt,
    PromptMlp,
    Adapter,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub kind: ParamKind,
    pub group: ParamGroup,
}

/// Named parameter tensors with stable ids. Removing a parameter leaves a
/// hole so ids held elsewhere stay valid.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: Vec<Option<Param>>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        kind: ParamKind,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.slots.len());
        self.by_name.insert(name.clone(), id);
        self.slots.push(Some(Param {
            name,
            tensor,
            kind,
            group,
        }));
        id
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Param> {
        let p = self.slots.get_mut(id.0)?.take()?;
        self.by_name.remove(&p.name);
        Some(p)
    }

    /// Number of id slots, including removed ones.
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        self.slots[id.0].as_ref().expect("removed parameter")
    }

    pub fn try_get(&self, id: ParamId) -> Option<&Param> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.get(id).tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].as_mut().expect("removed parameter").tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Live parameters in id order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.as_ref().map(|p| (ParamId(i), p)))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Total scalar count of live parameters.
    pub fn numel(&self) -> usize {
        self.iter().map(|(_, p)| p.tensor.len()).sum()
    }

    /// Overwrite a parameter's values; the shape must match.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = self.slots[id.0].as_mut().expect("removed parameter");
        if slot.tensor.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.tensor.shape(),
                value.shape()
            )));
        }
        slot.tensor = value;
        Ok(())
    }

    /// SHA-256 over the names and bit patterns of the selected parameters.
    pub fn hash_where(&self, mut keep: impl FnMut(ParamId, &Param) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (id, p) in self.iter() {
            if !keep(id, p) {
                continue;
            }
            hasher.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}
