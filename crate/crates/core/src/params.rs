// SPDX-License-Identifier: Apache-2.0

//! Named parameter storage shared by every layer of a model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// Persistent state such as running normalization statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<S = f32> {
    pub name: String,
    pub value: Tensor<S>,
    pub kind: ParamKind,
}

/// Slots are never reused: removing an entry leaves a hole so existing
/// [`ParamId`]s stay valid.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S = f32> {
    slots: Vec<Option<ParamEntry<S>>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { slots: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, kind: ParamKind) -> ParamId {
        self.slots.push(Some(ParamEntry {
            name: name.into(),
            value,
            kind,
        }));
        ParamId(self.slots.len() - 1)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<ParamEntry<S>> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<S> {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.get(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.slots[id.0].as_mut().expect("parameter was removed").value
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Live entries in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|e| (ParamId(i), e)))
    }

    pub fn learnable(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.iter().filter(|(_, e)| e.kind == ParamKind::Learnable)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.iter().find(|(_, e)| e.name == name).map(|(id, _)| id)
    }

    /// Number of learnable scalars.
    pub fn count_learnable(&self) -> usize {
        self.learnable().map(|(_, e)| e.value.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|e| {
                    e.as_ref().map(|e| ParamEntry {
                        name: e.name.clone(),
                        value: e.value.cast(),
                        kind: e.kind,
                    })
                })
                .collect(),
        }
    }
}

/// Seeded initializer used while a model is being assembled.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-bound, bound]`, drawn in `f32` so every element type
    /// sees identical starting weights.
    pub fn uniform<S: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<S> {
        let n: usize = shape.iter().product();
        let b = bound as f32;
        let data = (0..n)
            .map(|_| S::of(self.rng.random_range(-b..=b) as f64))
            .collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    /// Kaiming-uniform with fan-in scaling (ReLU gain).
    pub fn kaiming<S: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<S> {
        self.uniform(shape, (6.0 / fan_in as f64).sqrt())
    }
}
