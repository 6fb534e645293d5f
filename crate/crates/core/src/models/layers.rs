//! Building blocks shared by both denoisers.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::math;
use crate::tensor::Tensor;

use super::params::{Builder, LinearIdx};

/// Token-wise squeeze-and-excitation.
///
/// Squeeze: mean over channels gives one value per token. Excite:
/// `sigmoid(FC(GELU(FC(s))))` with a `T -> T/r -> T` bottleneck. Each token
/// is then scaled by its gate.
#[derive(Clone, Copy, Debug)]
pub struct SeBlock {
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
    pub tokens: usize,
}

/// Bottleneck width for `tokens` under reduction `r`; falls back to no
/// reduction when there are fewer tokens than `r`.
pub fn se_hidden(tokens: usize, reduction: usize) -> usize {
    let r = if tokens < reduction || reduction == 0 { 1 } else { reduction };
    (tokens / r).max(1)
}

impl SeBlock {
    pub fn build(b: &mut Builder<'_>, name: &str, tokens: usize, reduction: usize) -> Self {
        let hidden = se_hidden(tokens, reduction);
        let fc1 = b.linear(&alloc::format!("{name}.fc1"), tokens, hidden);
        let fc2 = b.linear(&alloc::format!("{name}.fc2"), hidden, tokens);
        Self { fc1, fc2, tokens }
    }

    /// `[B, T, d] -> [B, T, d]`.
    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let batch = tape.value(x).shape()[0];
        let s = tape.mean_last(x)?;
        let s = tape.reshape(s, &[batch, self.tokens])?;
        let s = self.fc1.forward(tape, p, s)?;
        let s = tape.gelu(s)?;
        let s = self.fc2.forward(tape, p, s)?;
        let s = tape.sigmoid(s)?;
        let s = tape.reshape(s, &[batch, self.tokens, 1])?;
        tape.mul(x, s)
    }
}

/// Two linear layers with GELU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

impl Mlp {
    pub fn build(b: &mut Builder<'_>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let fc1 = b.linear(&alloc::format!("{name}.fc1"), d_in, hidden);
        let fc2 = b.linear(&alloc::format!("{name}.fc2"), hidden, d_out);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// Multi-head self-attention over `[B, T, d]`.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
    pub heads: usize,
}

impl Attention {
    pub fn build(b: &mut Builder<'_>, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: b.linear(&alloc::format!("{name}.q"), d, d),
            k: b.linear(&alloc::format!("{name}.k"), d, d),
            v: b.linear(&alloc::format!("{name}.v"), d, d),
            o: b.linear(&alloc::format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let d = *tape.value(x).shape().last().unwrap();
        let dh = d / self.heads;
        let q = self.q.forward(tape, p, x)?;
        let k = self.k.forward(tape, p, x)?;
        let v = self.v.forward(tape, p, x)?;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (tape.slice(q, 2, lo, hi)?, tape.slice(k, 2, lo, hi)?, tape.slice(v, 2, lo, hi)?)
            };
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 2)? };
        self.o.forward(tape, p, cat)
    }
}

/// Sinusoidal embedding of integer steps, `[B, 1, d]`.
pub fn step_embedding(steps: &[usize], d: usize) -> Tensor {
    let half = d / 2;
    let mut data = Vec::with_capacity(steps.len() * d);
    for &k in steps {
        for i in 0..d {
            let j = if i < half { i } else { i - half };
            let freq = math::exp(-math::ln(10_000.0) * j as f64 / half.max(1) as f64);
            let arg = k as f64 * freq;
            data.push(if i < half { math::sin(arg) } else { math::cos(arg) });
        }
    }
    Tensor::new([steps.len(), 1, d], data).expect("step embedding shape")
}
