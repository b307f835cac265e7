use std::ops::Index;

use super::{Tape, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named model weight. `trainable` parameters receive gradients and
/// optimizer updates; the rest are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered, named collection of a model's weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.iter().filter(|(_, p)| p.trainable)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.iter().filter(|(_, p)| !p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// Sets the trainable flag on every parameter whose name starts with
    /// `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    /// Places every parameter on `tape` as a leaf. Trainable parameters are
    /// recorded as requiring gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), p.trainable))
                .collect(),
        )
    }
}

impl ParamStore {
    /// Places every parameter on `tape` as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.constant(p.value.clone())).collect())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps handles created elsewhere, one per parameter in store order.
    /// Lets a model run on leaves owned by a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
