//! Denoiser architectures and their flat parameter storage.

mod layers;
mod params;
mod student;
mod teacher;

pub use layers::{se_hidden, step_embedding, Attention, Mlp, SeBlock};
pub use params::{Builder, Init, LinearIdx, NormIdx, ParamStore};
pub use student::StudentConfig;
pub use teacher::TeacherConfig;

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::optim::AdamW;
use crate::rng::Rng;
use crate::tensor::Tensor;

use student::StudentLayout;
use teacher::TeacherLayout;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum ModelConfig {
    Teacher(TeacherConfig),
    Student(StudentConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Teacher(c) => c.validate(),
            Self::Student(c) => c.validate(),
        }
    }

    pub fn retained(&self) -> usize {
        match self {
            Self::Teacher(c) => c.retained,
            Self::Student(c) => c.retained,
        }
    }

    pub fn joints(&self) -> usize {
        match self {
            Self::Teacher(c) => c.joints,
            Self::Student(c) => c.joints,
        }
    }

    pub fn channels(&self) -> usize {
        3 * self.joints()
    }

    pub fn is_teacher(&self) -> bool {
        matches!(self, Self::Teacher(_))
    }

    /// Parameter count without allocating any weights.
    pub fn param_count(&self) -> Result<usize> {
        Ok(DenoiserModel::zeros(self.clone())?.param_count())
    }
}

#[derive(Clone, Debug)]
enum Layout {
    Teacher(TeacherLayout),
    Student(StudentLayout),
}

/// A denoiser: config, layout and named parameters.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore,
}

impl DenoiserModel {
    /// Fan-in scaled normal weights, zero biases, unit norm gains.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(config, Init::Random(rng))
    }

    /// All weights zero; used as a template before loading parameters.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, Init::Zeros)
    }

    fn build(config: ModelConfig, init: Init<'_>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(init);
        let layout = match &config {
            ModelConfig::Teacher(c) => Layout::Teacher(TeacherLayout::build(c, &mut b)),
            ModelConfig::Student(c) => Layout::Student(StudentLayout::build(c, &mut b)),
        };
        let model = Self { config, layout, params: b.store };
        log::debug!("built denoiser with {} parameters", model.param_count());
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Zeroes the output projection so every prediction is exactly zero.
    pub fn zero_head(&mut self) {
        let head = match &self.layout {
            Layout::Teacher(t) => t.head,
            Layout::Student(s) => s.head,
        };
        head.zero(&mut self.params);
    }

    fn check_inputs(&self, tape: &Tape, y: Var, c: Var) -> Result<usize> {
        let (l, ch) = (self.config.retained(), self.config.channels());
        let ys = tape.value(y).shape();
        let cs = tape.value(c).shape();
        let ok = |s: &[usize]| s.len() == 3 && s[1] == l && s[2] == ch;
        if !ok(ys) || ys != cs {
            return Err(Error::ShapeMismatch { op: "denoiser input", lhs: ys.to_vec(), rhs: cs.to_vec() });
        }
        Ok(ys[0])
    }

    /// Teacher-architecture forward on `[B, L, 3J]` inputs with one step per item.
    pub fn teacher_forward(&self, tape: &mut Tape, p: &[Var], y: Var, c: Var, steps: &[usize]) -> Result<Var> {
        let batch = self.check_inputs(tape, y, c)?;
        match (&self.config, &self.layout) {
            (ModelConfig::Teacher(cfg), Layout::Teacher(lay)) => {
                if steps.len() != batch {
                    return Err(invalid("teacher_forward: one step index per batch item required"));
                }
                lay.forward(cfg, tape, p, y, c, steps)
            }
            _ => Err(invalid("teacher_forward called on a student model")),
        }
    }

    /// Student forward on `[B, L, 3J]` inputs.
    pub fn student_forward(&self, tape: &mut Tape, p: &[Var], y: Var, c: Var) -> Result<Var> {
        self.check_inputs(tape, y, c)?;
        match (&self.config, &self.layout) {
            (ModelConfig::Student(cfg), Layout::Student(lay)) => lay.forward(cfg, tape, p, y, c),
            _ => Err(invalid("student_forward called on a teacher model")),
        }
    }

    /// Dispatches on architecture; `steps` is ignored by the student.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], y: Var, c: Var, steps: &[usize]) -> Result<Var> {
        match self.config {
            ModelConfig::Teacher(_) => self.teacher_forward(tape, p, y, c, steps),
            ModelConfig::Student(_) => self.student_forward(tape, p, y, c),
        }
    }

    /// Gradient-free evaluation on `[B, L, 3J]` tensors.
    pub fn predict(&self, tape: &mut Tape, y: &Tensor, c: &Tensor, steps: &[usize]) -> Result<Tensor> {
        tape.clear();
        let p = self.params.bind(tape, false)?;
        let yv = tape.constant(y.clone())?;
        let cv = tape.constant(c.clone())?;
        let out = self.forward(tape, &p, yv, cv, steps)?;
        let value = tape.value(out).clone();
        tape.clear();
        Ok(value)
    }

    /// Builds a loss on a fresh tape, backpropagates and applies one AdamW
    /// update. Returns the loss value.
    pub fn train_step<F>(&mut self, opt: &mut AdamW, tape: &mut Tape, lr: f64, build: F) -> Result<f64>
    where
        F: FnOnce(&Self, &mut Tape, &[Var]) -> Result<Var>,
    {
        tape.clear();
        let p = self.params.bind(tape, true)?;
        let loss = build(self, tape, &p)?;
        let value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = p
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        tape.clear();
        opt.step(self.params.tensors_mut(), &g, lr)?;
        Ok(value)
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.flat()
    }
}
