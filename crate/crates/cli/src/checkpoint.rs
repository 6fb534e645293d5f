//! Model checkpoints: `b"MDSTCKPT"`, version `u32`, JSON header length
//! `u64`, JSON header, then every parameter as little-endian `f64` in
//! segment order.

use std::path::Path;

use motion_distill_core::diffusion::{make_schedule, Diffusion};
use motion_distill_core::models::{DenoiserModel, ModelConfig};
use motion_distill_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io;

pub const MAGIC: &[u8; 8] = b"MDSTCKPT";
pub const VERSION: u32 = 1;

/// Diffusion geometry the model was trained for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSetup {
    pub k_train: usize,
    pub schedule: String,
    pub observed: usize,
    pub future: usize,
    pub retained: usize,
    /// Default sampler steps for multi-step sampling.
    pub sampler_steps: usize,
}

impl DiffusionSetup {
    pub fn build(&self) -> CliResult<Diffusion> {
        Ok(Diffusion::new(make_schedule(self.k_train, &self.schedule)?, self.observed, self.future, self.retained)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// `teacher`, `stage1` or `stage2`.
    pub role: String,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Parameter fingerprint of the frozen teacher used for distillation.
    pub teacher_fingerprint: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    pub diffusion: DiffusionSetup,
    pub provenance: Provenance,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub diffusion: DiffusionSetup,
    pub provenance: Provenance,
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let p = ck.model.params();
    let header = Header {
        format_version: VERSION,
        model: ck.model.config().clone(),
        diffusion: ck.diffusion.clone(),
        provenance: ck.provenance.clone(),
        segments: p
            .names()
            .iter()
            .zip(p.tensors())
            .map(|(n, t)| Segment { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + p.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in p.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> CliResult<Checkpoint> {
    let bad = |m: &str| CliError::Data(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(&e.to_string()))?;
    let mut model = DenoiserModel::zeros(header.model.clone())?;
    let mut off = body;
    let mut segments = Vec::with_capacity(header.segments.len());
    for s in &header.segments {
        let n: usize = s.shape.iter().product();
        let end = off.checked_add(n * 8).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated parameters"))?;
        let data = bytes[off..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        segments.push((s.name.clone(), Tensor::new(s.shape.clone(), data)?));
        off = end;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    model.params_mut().load_segments(segments).map_err(|e| bad(&e.to_string()))?;
    Ok(Checkpoint { model, diffusion: header.diffusion, provenance: header.provenance })
}

pub fn save(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    io::atomic_write(path, &encode(ck))
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    decode(&io::read(path)?).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
