//! In-memory motion corpora: `n` sequences of `H + F` frames each.

use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::motion::pad_observation;
use crate::tensor::Tensor;

/// Generator labels of one item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemLabel {
    pub family: u32,
    pub mode: u32,
}

/// Fixed-shape sequences stored contiguously as `[n, H + F, 3J]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionCorpus {
    observed: usize,
    future: usize,
    channels: usize,
    frames: Vec<f64>,
    labels: Vec<ItemLabel>,
}

impl MotionCorpus {
    pub fn new(observed: usize, future: usize, channels: usize, frames: Vec<f64>, labels: Vec<ItemLabel>) -> Result<Self> {
        if observed == 0 || future == 0 || channels == 0 {
            return Err(invalid("corpus: H, F and channel count must be positive"));
        }
        let per = (observed + future) * channels;
        if frames.len() % per != 0 {
            return Err(invalid("corpus: frame buffer is not a whole number of items"));
        }
        if !labels.is_empty() && labels.len() != frames.len() / per {
            return Err(invalid("corpus: label count differs from item count"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(invalid("corpus: non-finite coordinate"));
        }
        Ok(Self { observed, future, channels, frames, labels })
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.item_len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    pub fn future(&self) -> usize {
        self.future
    }

    pub fn seq_len(&self) -> usize {
        self.observed + self.future
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn joints(&self) -> usize {
        self.channels / 3
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn labels(&self) -> &[ItemLabel] {
        &self.labels
    }

    fn item_len(&self) -> usize {
        self.seq_len() * self.channels
    }

    /// Full sequence `i` as `[H + F, 3J]`.
    pub fn item(&self, i: usize) -> Tensor {
        let n = self.item_len();
        Tensor::new([self.seq_len(), self.channels], self.frames[i * n..(i + 1) * n].to_vec()).expect("item shape")
    }

    pub fn observation(&self, i: usize) -> Tensor {
        let n = self.item_len();
        let m = self.observed * self.channels;
        Tensor::new([self.observed, self.channels], self.frames[i * n..i * n + m].to_vec()).expect("observation shape")
    }

    pub fn future_of(&self, i: usize) -> Tensor {
        let n = self.item_len();
        let m = self.observed * self.channels;
        Tensor::new([self.future, self.channels], self.frames[i * n + m..(i + 1) * n].to_vec()).expect("future shape")
    }

    /// Full sequences `[B, H + F, 3J]`.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let n = self.item_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.frames[i * n..(i + 1) * n]);
        }
        Tensor::new([idx.len(), self.seq_len(), self.channels], data).expect("batch shape")
    }

    /// Observations `[B, H, 3J]`.
    pub fn gather_observations(&self, idx: &[usize]) -> Tensor {
        let n = self.item_len();
        let m = self.observed * self.channels;
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            data.extend_from_slice(&self.frames[i * n..i * n + m]);
        }
        Tensor::new([idx.len(), self.observed, self.channels], data).expect("batch shape")
    }

    /// Items `range` as a new corpus.
    pub fn split(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(invalid("corpus split out of range"));
        }
        let n = self.item_len();
        let labels = if self.labels.is_empty() { Vec::new() } else { self.labels[start..end].to_vec() };
        Self::new(self.observed, self.future, self.channels, self.frames[start * n..end * n].to_vec(), labels)
    }
}

/// Pads a batch of observations `[B, H, C]` to `[B, total_len, C]` by
/// repeating each item's last frame.
pub fn pad_batch(obs: &Tensor, total_len: usize) -> Result<Tensor> {
    let [b, h, c] = match obs.shape() {
        [b, h, c] => [*b, *h, *c],
        _ => return Err(invalid("pad_batch: expected [B, H, C]")),
    };
    let mut data = Vec::with_capacity(b * total_len * c);
    for i in 0..b {
        let x = Tensor::new([h, c], obs.data()[i * h * c..(i + 1) * h * c].to_vec())?;
        data.extend_from_slice(pad_observation(&x, total_len)?.frames().data());
    }
    Tensor::new([b, total_len, c], data)
}
