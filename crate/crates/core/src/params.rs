//! Named parameter storage shared by every module of the model.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Coarse ownership of a parameter; stage masks switch trainability per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    VisionEncoder,
    CompAdapter,
    GenAdapter,
    SharedAdapter,
    CompPlugin,
    GenPlugin,
    SharedLora,
    Embedding,
    Head,
    Backbone,
    /// Codebook and the fixed latent projections. Never trained.
    Codec,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 11] = [
        ParamGroup::VisionEncoder,
        ParamGroup::CompAdapter,
        ParamGroup::GenAdapter,
        ParamGroup::SharedAdapter,
        ParamGroup::CompPlugin,
        ParamGroup::GenPlugin,
        ParamGroup::SharedLora,
        ParamGroup::Embedding,
        ParamGroup::Head,
        ParamGroup::Backbone,
        ParamGroup::Codec,
    ];
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a frozen parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            group,
            tensor,
            trainable: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.tensor(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.entries[id.0].trainable = flag;
    }

    /// Makes exactly the listed groups trainable.
    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        for e in &mut self.entries {
            e.trainable = groups.contains(&e.group);
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_groups(&[]);
    }

    /// Overwrites a tensor's values, keeping its shape.
    pub fn assign(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let t = self.tensor_mut(id);
        if t.numel() != data.len() {
            return Err(Error::DataLength {
                shape: t.shape().to_vec(),
                len: data.len(),
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn group_numel(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.tensor.numel())
            .sum()
    }
}
