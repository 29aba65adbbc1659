//! Named parameter arrays partitioned into freezable groups.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter groups. Freezing operates on whole groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embeddings,
    Hae,
    HaeProj,
    Sfe,
    TaskTowers,
    Backbone,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Embeddings,
        Group::Hae,
        Group::HaeProj,
        Group::Sfe,
        Group::TaskTowers,
        Group::Backbone,
    ];

    /// Groups owned by the content (teacher) side.
    pub const TEACHER: [Group; 3] = [Group::Embeddings, Group::Hae, Group::HaeProj];

    pub fn name(self) -> &'static str {
        match self {
            Group::Embeddings => "embeddings",
            Group::Hae => "hae",
            Group::HaeProj => "hae_proj",
            Group::Sfe => "sfe",
            Group::TaskTowers => "task_towers",
            Group::Backbone => "backbone",
        }
    }

    pub fn from_name(name: &str) -> Option<Group> {
        Group::ALL.iter().copied().find(|g| g.name() == name)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// All learnable arrays of a model, in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Param>", into = "Vec<Param>")]
pub struct ModelParams {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<Param>> for ModelParams {
    fn from(params: Vec<Param>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        ModelParams { params, index }
    }
}

impl From<ModelParams> for Vec<Param> {
    fn from(p: ModelParams) -> Self {
        p.params
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: Group, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Contract(alloc::format!("missing parameter `{name}`")))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn group(&self, group: Group) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.params.iter().any(|p| p.group == group)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// True when every array of `group` is bitwise identical in both sets.
    pub fn group_bit_eq(&self, other: &ModelParams, group: Group) -> bool {
        let mine: Vec<&Param> = self.group(group).collect();
        let theirs: Vec<&Param> = other.group(group).collect();
        mine.len() == theirs.len()
            && mine
                .iter()
                .zip(&theirs)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.group == b.group && a.value.bit_eq(&b.value))
    }

    /// Overwrites every array of `group` with the same-named array from `source`.
    pub fn copy_group_from(&mut self, source: &ModelParams, group: Group) -> Result<()> {
        for p in source.group(group) {
            let id = self.id(&p.name).ok_or_else(|| {
                Error::Incompatible(alloc::format!(
                    "parameter `{}` of group {group} is absent from the target model",
                    p.name
                ))
            })?;
            let target = &mut self.params[id.0];
            if target.group != group || target.value.shape() != p.value.shape() {
                return Err(Error::Incompatible(alloc::format!(
                    "parameter `{}` has shape {:?} in the source but {:?} in the target",
                    p.name,
                    p.value.shape(),
                    target.value.shape()
                )));
            }
            target.value = p.value.clone();
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(n: usize) -> Self {
        ParamGrads {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub(crate) fn slot(&mut self, id: usize) -> &mut Option<Tensor> {
        &mut self.grads[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Largest absolute gradient entry over the params selected by `pred`.
    pub fn max_abs_where(&self, params: &ModelParams, pred: impl Fn(&Param) -> bool) -> f64 {
        self.iter()
            .filter(|(id, _)| pred(params.get(*id)))
            .flat_map(|(_, g)| g.data().iter().map(|v| libm::fabs(*v)))
            .fold(0.0, f64::max)
    }
}
