//! Attention-free MLP-mixer denoiser. No step input: it is only ever used as
//! a one-step generator.
//!
//! Tokens are `[condition (L), noise (L)]`. Each layer applies
//! LayerNorm -> SE -> token-mixing MLP (across the `2L` axis) -> residual,
//! then LayerNorm -> channel-mixing MLP -> residual.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};

use super::layers::{Mlp, SeBlock};
use super::params::{Builder, LinearIdx, NormIdx};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StudentConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub se_reduction: usize,
    /// Retained DCT rows `L`.
    pub retained: usize,
    pub joints: usize,
    /// Hidden width multiplier of the channel-mixing MLP.
    pub channel_expansion: usize,
    /// Hidden width multiplier of the token-mixing MLP.
    pub token_expansion: usize,
}

impl StudentConfig {
    pub fn new(n_layers: usize, d_model: usize, retained: usize, joints: usize) -> Self {
        Self {
            n_layers,
            d_model,
            se_reduction: 4,
            retained,
            joints,
            channel_expansion: 1,
            token_expansion: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(invalid("student: n_layers must be >= 1"));
        }
        if self.d_model < 8 {
            return Err(invalid("student: d_model must be >= 8"));
        }
        if self.retained == 0 || self.joints == 0 {
            return Err(invalid("student: L and J must be positive"));
        }
        if self.channel_expansion == 0 || self.token_expansion == 0 {
            return Err(invalid("student: expansion ratios must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        3 * self.joints
    }

    pub fn tokens(&self) -> usize {
        2 * self.retained
    }
}

#[derive(Clone, Debug)]
pub(crate) struct StudentLayer {
    ln1: NormIdx,
    se: SeBlock,
    token_mix: Mlp,
    ln2: NormIdx,
    channel_mix: Mlp,
}

#[derive(Clone, Debug)]
pub(crate) struct StudentLayout {
    embed_c: LinearIdx,
    embed_y: LinearIdx,
    layers: Vec<StudentLayer>,
    out_norm: NormIdx,
    pub head: LinearIdx,
}

impl StudentLayout {
    pub fn build(cfg: &StudentConfig, b: &mut Builder<'_>) -> Self {
        let (d, c, t) = (cfg.d_model, cfg.channels(), cfg.tokens());
        let embed_c = b.linear("embed_c", c, d);
        let embed_y = b.linear("embed_y", c, d);
        let layers = (0..cfg.n_layers)
            .map(|i| StudentLayer {
                ln1: b.norm(&alloc::format!("layer{i}.ln1"), d),
                se: SeBlock::build(b, &alloc::format!("layer{i}.se"), t, cfg.se_reduction),
                token_mix: Mlp::build(b, &alloc::format!("layer{i}.token_mix"), t, cfg.token_expansion * t, t),
                ln2: b.norm(&alloc::format!("layer{i}.ln2"), d),
                channel_mix: Mlp::build(b, &alloc::format!("layer{i}.channel_mix"), d, cfg.channel_expansion * d, d),
            })
            .collect();
        let out_norm = b.norm("out_norm", d);
        let head = b.linear("head", d, c);
        Self { embed_c, embed_y, layers, out_norm, head }
    }

    pub fn forward(&self, cfg: &StudentConfig, tape: &mut Tape, p: &[Var], y: Var, c: Var) -> Result<Var> {
        let l = cfg.retained;
        let ec = self.embed_c.forward(tape, p, c)?;
        let ey = self.embed_y.forward(tape, p, y)?;
        let mut h = tape.concat(&[ec, ey], 1)?;
        for layer in &self.layers {
            let u = layer.ln1.forward(tape, p, h)?;
            let u = layer.se.forward(tape, p, u)?;
            let ut = tape.transpose(u)?;
            let ut = layer.token_mix.forward(tape, p, ut)?;
            let u = tape.transpose(ut)?;
            h = tape.add(h, u)?;
            let v = layer.ln2.forward(tape, p, h)?;
            let v = layer.channel_mix.forward(tape, p, v)?;
            h = tape.add(h, v)?;
        }
        let out = self.out_norm.forward(tape, p, h)?;
        let yb = tape.slice(out, 1, l, 2 * l)?;
        self.head.forward(tape, p, yb)
    }
}
