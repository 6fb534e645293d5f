//! SE-Transformer noise predictor with long skip connections.
//!
//! Tokens are `[condition (L), noisy coefficients (L), step (1)]`. Every
//! layer is SE -> self-attention -> feed-forward with pre-norm residuals.
//! Deep layer `j` receives a long skip from shallow layer `n-1-j`: the
//! shallow layer's input is concatenated on the channel axis and projected
//! back to `d_model`.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};

use super::layers::{step_embedding, Attention, Mlp, SeBlock};
use super::params::{Builder, LinearIdx, NormIdx};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TeacherConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub se_reduction: usize,
    /// Retained DCT rows `L`.
    pub retained: usize,
    pub joints: usize,
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.ffn_dim == 0 {
            return Err(invalid("teacher: layers, width and ffn_dim must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid("teacher: d_model must be divisible by n_heads"));
        }
        if self.retained == 0 || self.joints == 0 {
            return Err(invalid("teacher: L and J must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        3 * self.joints
    }

    pub fn tokens(&self) -> usize {
        2 * self.retained + 1
    }

    /// Shallow layer paired with deep layer `j`, if any.
    pub fn skip_source(&self, j: usize) -> Option<usize> {
        let i = self.n_layers - 1 - j;
        (i < j).then_some(i)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct TeacherLayer {
    ln1: NormIdx,
    se: SeBlock,
    attn: Attention,
    ln2: NormIdx,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
pub(crate) struct TeacherLayout {
    embed_c: LinearIdx,
    embed_y: LinearIdx,
    step: Mlp,
    pos: usize,
    layers: Vec<TeacherLayer>,
    skips: Vec<Option<LinearIdx>>,
    out_norm: NormIdx,
    pub head: LinearIdx,
}

impl TeacherLayout {
    pub fn build(cfg: &TeacherConfig, b: &mut Builder<'_>) -> Self {
        let (d, c, t) = (cfg.d_model, cfg.channels(), cfg.tokens());
        let embed_c = b.linear("embed_c", c, d);
        let embed_y = b.linear("embed_y", c, d);
        let step = Mlp::build(b, "step", d, d, d);
        let pos = b.normal("pos".into(), &[t, d], 0.02);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut skips = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let skip = cfg
                .skip_source(i)
                .map(|_| b.linear(&alloc::format!("layer{i}.skip"), 2 * d, d));
            skips.push(skip);
            layers.push(TeacherLayer {
                ln1: b.norm(&alloc::format!("layer{i}.ln1"), d),
                se: SeBlock::build(b, &alloc::format!("layer{i}.se"), t, cfg.se_reduction),
                attn: Attention::build(b, &alloc::format!("layer{i}.attn"), d, cfg.n_heads),
                ln2: b.norm(&alloc::format!("layer{i}.ln2"), d),
                ffn: Mlp::build(b, &alloc::format!("layer{i}.ffn"), d, cfg.ffn_dim, d),
            });
        }
        let out_norm = b.norm("out_norm", d);
        let head = b.linear("head", d, c);
        Self { embed_c, embed_y, step, pos, layers, skips, out_norm, head }
    }

    /// `y, c: [B, L, 3J]`, one step index per batch item.
    pub fn forward(
        &self,
        cfg: &TeacherConfig,
        tape: &mut Tape,
        p: &[Var],
        y: Var,
        c: Var,
        steps: &[usize],
    ) -> Result<Var> {
        let l = cfg.retained;
        let ec = self.embed_c.forward(tape, p, c)?;
        let ey = self.embed_y.forward(tape, p, y)?;
        let sin = tape.constant(step_embedding(steps, cfg.d_model))?;
        let es = self.step.forward(tape, p, sin)?;
        let h = tape.concat(&[ec, ey, es], 1)?;
        let mut h = tape.add(h, p[self.pos])?;
        let mut saved: Vec<Option<Var>> = alloc::vec![None; cfg.n_layers];
        for (i, layer) in self.layers.iter().enumerate() {
            if let (Some(proj), Some(src)) = (&self.skips[i], cfg.skip_source(i)) {
                let shallow = saved[src].expect("shallow activation saved before use");
                let cat = tape.concat(&[h, shallow], 2)?;
                h = proj.forward(tape, p, cat)?;
            }
            if cfg.n_layers - 1 - i > i {
                saved[i] = Some(h);
            }
            let a = layer.ln1.forward(tape, p, h)?;
            let a = layer.se.forward(tape, p, a)?;
            let a = layer.attn.forward(tape, p, a)?;
            h = tape.add(h, a)?;
            let f = layer.ln2.forward(tape, p, h)?;
            let f = layer.ffn.forward(tape, p, f)?;
            h = tape.add(h, f)?;
        }
        let out = self.out_norm.forward(tape, p, h)?;
        let yb = tape.slice(out, 1, l, 2 * l)?;
        self.head.forward(tape, p, yb)
    }
}
