//! Named parameter storage. One store owns every array of a model bundle;
//! layers hold [`ParamId`] handles. Checkpoints serialize the store, the
//! optimizer addresses it, and the training loop filters updates by group.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Which network a parameter belongs to. Drives the alternating update
/// (discriminators vs. the rest), the attention freeze, and checkpoint
/// bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    EncoderSrc,
    EncoderTgt,
    GeneratorSrc,
    GeneratorTgt,
    DiscriminatorSrc,
    DiscriminatorTgt,
    AttentionSrc,
    AttentionTgt,
    EmbedHead,
    ClassifierHead,
}

impl ParamGroup {
    pub fn is_discriminator(self) -> bool {
        matches!(self, ParamGroup::DiscriminatorSrc | ParamGroup::DiscriminatorTgt)
    }

    pub fn is_attention(self) -> bool {
        matches!(self, ParamGroup::AttentionSrc | ParamGroup::AttentionTgt)
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    /// Running statistics and other buffers are stored but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor,
        trainable: bool,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(ParamEntry { name, group, value, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable parameters whose group satisfies the predicate.
    pub fn trainable_in(&self, pred: impl Fn(ParamGroup) -> bool) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.trainable && pred(e.group))
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of scalar values across parameters in a group.
    pub fn scalar_count(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(_, e)| e.group == group)
            .map(|(_, e)| e.value.numel())
            .sum()
    }
}
