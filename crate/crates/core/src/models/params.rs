//! Named parameter segments and layout indices into them.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::rng::{hash_f64s, Rng};
use crate::tensor::Tensor;

/// Ordered, named parameter tensors. The order is fixed by the model layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.count() {
            return Err(invalid("set_flat: wrong parameter count"));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Content hash over every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0u64;
        for t in &self.tensors {
            h = crate::rng::mix(h ^ hash_f64s(t.data()));
        }
        h
    }

    /// Replaces all tensors after checking names and shapes.
    pub fn load_segments(&mut self, segments: Vec<(String, Tensor)>) -> Result<()> {
        if segments.len() != self.tensors.len() {
            return Err(invalid("parameter segment count differs from model layout"));
        }
        for (i, (name, t)) in segments.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(invalid(alloc::format!("segment {i}: expected {}, found {name}", self.names[i])));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_segments",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    /// Splits one flat `[count]` variable into per-tensor views, so a single
    /// leaf can carry every parameter (used by finite-difference checks).
    pub fn bind_flat(&self, tape: &mut Tape, flat: Var) -> Result<Vec<Var>> {
        let mut off = 0;
        let mut out = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let n = t.numel();
            let s = tape.slice(flat, 0, off, off + n)?;
            out.push(tape.reshape(s, t.shape())?);
            off += n;
        }
        Ok(out)
    }

    /// Places every tensor on the tape, differentiable or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect()
    }
}

pub enum Init<'r> {
    Random(&'r mut Rng),
    Zeros,
}

/// Appends parameters to a store in layout order.
pub struct Builder<'r> {
    pub store: ParamStore,
    init: Init<'r>,
}

impl<'r> Builder<'r> {
    pub fn new(init: Init<'r>) -> Self {
        Self { store: ParamStore::default(), init }
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> usize {
        let t = match &mut self.init {
            Init::Random(rng) => Tensor::randn(shape.to_vec(), std, *rng),
            Init::Zeros => Tensor::zeros(shape.to_vec()),
        };
        self.store.push(name, t)
    }

    pub fn fill(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.store.push(name, Tensor::full(shape.to_vec(), v))
    }

    /// Fan-in scaled normal weight and zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIdx {
        let w = self.normal(alloc::format!("{name}.weight"), &[fan_in, fan_out], 1.0 / math::sqrt(fan_in as f64));
        let b = self.fill(alloc::format!("{name}.bias"), &[fan_out], 0.0);
        LinearIdx { w, b }
    }

    pub fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        let g = self.fill(alloc::format!("{name}.gamma"), &[d], 1.0);
        let b = self.fill(alloc::format!("{name}.beta"), &[d], 0.0);
        NormIdx { g, b }
    }
}

/// `x W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

impl LinearIdx {
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], p[self.b])
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for i in [self.w, self.b] {
            store.tensors_mut()[i].data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormIdx {
    pub g: usize,
    pub b: usize,
}

impl NormIdx {
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        tape.layernorm(x, p[self.g], p[self.b])
    }
}
