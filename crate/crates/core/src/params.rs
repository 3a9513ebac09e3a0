//! Named parameter buffers shared by every model component.

use crate::error::{Result, StumError};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer group. The fusion gate has its own learning rate and no decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Theta,
    FusionGate,
}

#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Tensor,
    requires_grad: bool,
    group: ParamGroup,
    grad: Option<Tensor>,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> ParamId {
        self.add_grouped(name, value, requires_grad, ParamGroup::Theta)
    }

    pub fn add_grouped(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        requires_grad: bool,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            requires_grad,
            group,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(StumError::shape("ParamStore::set", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_requires_grad(&mut self, id: ParamId, requires_grad: bool) {
        let p = &mut self.params[id.0];
        p.requires_grad = requires_grad;
        if !requires_grad {
            p.grad = None;
        }
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.iter().filter(|(_, p)| p.requires_grad)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| !p.requires_grad)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the parameter gradients recorded on `tape` into the store.
    /// Frozen parameters never receive a buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            let p = &mut self.params[id.0];
            if !p.requires_grad {
                continue;
            }
            match &mut p.grad {
                Some(buf) => buf.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g.clone()),
            }
        }
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.params[id.0].grad.as_mut()
    }

    /// Copies every value from `other`, which must have identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(StumError::CheckpointMismatch(format!(
                "{} parameters vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(StumError::CheckpointMismatch(format!(
                    "parameter {} {:?} vs {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
