//! Named parameter storage shared by every trainable module.

use std::collections::BTreeMap;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse module ownership, used for freezing and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Neck,
    Rpn,
    RoiHead,
    Classifier,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor4,
    /// Fixed parameters are part of the model but never updated.
    pub fixed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor4) -> ParamId {
        self.insert(name.into(), group, value, false)
    }

    pub fn add_fixed(&mut self, name: impl Into<String>, group: Group, value: Tensor4) -> ParamId {
        self.insert(name.into(), group, value, true)
    }

    fn insert(&mut self, name: String, group: Group, value: Tensor4, fixed: bool) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            value,
            fixed,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor4 {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of scalar parameters, optionally restricted to one group.
    pub fn count(&self, group: Option<Group>) -> usize {
        self.params
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    /// Places every parameter on the tape. Fixed parameters and those for
    /// which `frozen` holds become constants.
    pub fn bind(&self, g: &mut Graph, frozen: impl Fn(&Param) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.fixed || frozen(p) {
                    g.constant(p.value.clone())
                } else {
                    g.param(p.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Replaces parameter values from `(name, tensor)` pairs; every stored
    /// name must be supplied with a matching shape.
    pub fn load(&mut self, values: Vec<(String, Tensor4)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (name, t) in values {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = &mut self.params[id.0].value;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} does not match model {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Substitutes the tape handle of one parameter.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
