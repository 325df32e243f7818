//! Dense f64 tensors, named parameter storage and a seeded RNG.
//!
//! Differentiation lives in [`graph`]: every forward primitive records itself
//! on a tape and [`Graph::backward`] replays it in reverse.

mod check;
mod graph;

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use check::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, LOGIT_CLAMP};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Entries drawn from `uniform(-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut SeededRng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.uniform(-bound, bound)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named parameters, each with a gradient slot of the same shape.
///
/// Frozen entries (constant buffers) live here too so checkpoints carry them,
/// but the tape treats them as constants and their gradient stays zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, ParamSlot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.insert_slot(name.into(), value, true);
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor) {
        self.insert_slot(name.into(), value, false);
    }

    fn insert_slot(&mut self, name: String, value: Tensor, trainable: bool) {
        let grad = Tensor::zeros(value.shape());
        self.slots.insert(name, ParamSlot { value, grad, trainable });
    }

    pub fn slot(&self, name: &str) -> Result<&ParamSlot> {
        self.slots
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn slot_mut(&mut self, name: &str) -> Result<&mut ParamSlot> {
        self.slots
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.slot(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.slot_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.slot(name)?.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamSlot)> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamSlot)> {
        self.slots.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Names of trainable parameters in sorted order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.slots
            .iter()
            .filter(|(_, s)| s.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.slots.values().filter(|s| s.trainable).map(|s| s.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor, scale: f64) -> Result<()> {
        let slot = self.slot_mut(name)?;
        if slot.grad.shape != grad.shape {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: slot.grad.shape.clone(),
                right: grad.shape.clone(),
            });
        }
        if slot.trainable {
            slot.grad.add_scaled(grad, scale);
        }
        Ok(())
    }
}

/// Position of a [`SeededRng`] stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// ChaCha8 stream: same seed, same numbers on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = SeededRng::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.gen::<f64>() < p
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut SeededRng) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    Tensor::vector((0..len).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect())
}
