use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Shape4, Tensor};

/// Handle into a [`ParamStore`]. Never reused once freed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

/// What a parameter slot is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    /// Ordinary trainable weight.
    Weight,
    /// Differentiable pruner weight; trained but excluded from kernel Jacobians.
    Pruner,
    /// BatchNorm running statistic; never trained.
    Running,
}

/// How a slot is (re)drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// `U(-bound, bound)`.
    Uniform { bound: f64 },
    Const(f64),
    /// `U(lo, hi)`.
    Range { lo: f64, hi: f64 },
}

impl Init {
    /// PyTorch-style default for a layer with the given fan-in.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in.max(1) as f64).sqrt(),
        }
    }

    /// One draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut v = [0.0];
        self.fill(&mut v, rng);
        v[0]
    }

    fn fill<R: Rng + ?Sized>(&self, out: &mut [f64], rng: &mut R) {
        match *self {
            Init::Uniform { bound } => out
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..=bound)),
            Init::Const(c) => out.fill(c),
            Init::Range { lo, hi } => out.iter_mut().for_each(|v| *v = rng.random_range(lo..=hi)),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub role: ParamRole,
    pub init: Init,
    pub value: Tensor,
    /// Accumulated gradient; empty means zero.
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl ParamSlot {
    pub fn shape(&self) -> Shape4 {
        self.value.shape()
    }
}

/// Arena of every parameter of one model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    slots: Vec<Option<ParamSlot>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        role: ParamRole,
        shape: Shape4,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let mut value = Tensor::zeros(shape);
        init.fill(value.data_mut(), rng);
        let id = ParamId(self.slots.len() as u32);
        self.slots.push(Some(ParamSlot {
            name: name.into(),
            role,
            init,
            value,
            grad: Vec::new(),
        }));
        id
    }

    pub fn free(&mut self, id: ParamId) {
        if let Some(slot) = self.slots.get_mut(id.0 as usize) {
            *slot = None;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamSlot> {
        self.slots.get(id.0 as usize).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut ParamSlot> {
        self.slots.get_mut(id.0 as usize).and_then(Option::as_mut)
    }

    /// Panics if `id` was freed; callers hold ids only for live components.
    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.get(id).expect("live parameter").value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.get_mut(id).expect("live parameter").value
    }

    pub fn scalar(&self, id: ParamId) -> f64 {
        self.value(id).data()[0]
    }

    pub fn set_scalar(&mut self, id: ParamId, v: f64) {
        self.value_mut(id).data_mut()[0] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamSlot)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (ParamId(i as u32), s)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamSlot)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.as_mut().map(|s| (ParamId(i as u32), s)))
    }

    /// Number of trainable scalars (weights and pruners).
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, s)| s.role != ParamRole::Running)
            .map(|(_, s)| s.value.len())
            .sum()
    }

    /// Every stored scalar, running statistics included.
    pub fn stored_count(&self) -> usize {
        self.iter().map(|(_, s)| s.value.len()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let slot = self.get_mut(id).expect("live parameter");
        if slot.role == ParamRole::Running {
            return;
        }
        if slot.grad.is_empty() {
            slot.grad = grad.to_vec();
        } else {
            for (a, b) in slot.grad.iter_mut().zip(grad) {
                *a += b;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, slot) in self.iter_mut() {
            slot.grad.clear();
        }
    }

    /// Redraw every slot from its initializer, in slot order.
    pub fn reinit<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (_, slot) in self.iter_mut() {
            let init = slot.init;
            init.fill(slot.value.data_mut(), rng);
            slot.grad.clear();
        }
    }

    /// Bitwise comparison of all live values.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    a.value.shape() == b.value.shape()
                        && a.value
                            .data()
                            .iter()
                            .zip(b.value.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                }
                _ => false,
            })
    }
}
