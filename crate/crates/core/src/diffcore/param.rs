use std::fmt;

use serde::{Deserialize, Serialize};

use super::Tensor;

/// Optimizer group of a parameter.
///
/// Test-time adaptation trains only the three batch-norm groups; everything
/// else belongs to `Backbone`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    PeriodicBn,
    AperiodicBn,
    BaseBn,
    Backbone,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::PeriodicBn,
        ParamGroup::AperiodicBn,
        ParamGroup::BaseBn,
        ParamGroup::Backbone,
    ];

    pub fn is_batch_norm(self) -> bool {
        !matches!(self, ParamGroup::Backbone)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::PeriodicBn => "periodic_bn",
            ParamGroup::AperiodicBn => "aperiodic_bn",
            ParamGroup::BaseBn => "base_bn",
            ParamGroup::Backbone => "backbone",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A trainable tensor with its gradient and momentum buffer.
///
/// Values are kept on the `f32` grid: they are rounded on creation and after
/// every optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    momentum_buffer: Tensor,
    group: ParamGroup,
}

impl Param {
    pub fn new(name: impl Into<String>, mut value: Tensor, group: ParamGroup) -> Self {
        value.round_to_f32();
        let grad = Tensor::zeros(value.shape());
        let momentum_buffer = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            momentum_buffer,
            group,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn momentum_buffer(&self) -> &Tensor {
        &self.momentum_buffer
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, mut value: Tensor) -> crate::Result<()> {
        if value.shape() != self.value.shape() {
            return Err(crate::Error::Shape {
                op: "set_value",
                lhs: self.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        value.round_to_f32();
        self.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor, &Tensor, &mut Tensor) {
        (&mut self.value, &self.grad, &mut self.momentum_buffer)
    }
}

/// Ordered collection of parameters addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, param: Param) -> ParamId {
        self.params.push(param);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Clears gradients and momentum buffers, as for a fresh optimizer.
    pub fn reset_optimizer_state(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.momentum_buffer.fill(0.0);
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count per group.
    pub fn group_sizes(&self) -> std::collections::BTreeMap<ParamGroup, usize> {
        let mut out = std::collections::BTreeMap::new();
        for p in &self.params {
            *out.entry(p.group).or_insert(0) += p.value.len();
        }
        out
    }
}
