//! Binary corpus container.
//!
//! Layout, all little-endian:
//! `b"MDSTDATA"`, version `u32`, `J`, `H`, `F` as `u32`, item count `u64`,
//! flags `u32` (bit 0: labels present), then `n * (H + F) * 3J` `f64`
//! frames, optional `(family, mode)` `u32` pairs, a `u64` footer length and
//! a JSON footer.

use std::path::{Path, PathBuf};

use motion_distill_core::data::{ItemLabel, MotionCorpus};
use serde_json::Value;

use crate::error::CliError;
use crate::io;

pub const MAGIC: &[u8; 8] = b"MDSTDATA";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4 + 8 + 4;

/// Format errors, each with a stable numeric code.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DatasetError {
    #[error("file is truncated (need {needed} bytes, have {have})")]
    Truncated { needed: usize, have: usize },
    #[error("magic bytes do not match")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("inconsistent header: {0}")]
    Header(String),
    #[error("unreadable metadata footer: {0}")]
    Footer(String),
}

impl DatasetError {
    pub fn code(&self) -> u32 {
        match self {
            Self::Truncated { .. } => 10,
            Self::BadMagic => 11,
            Self::Version(_) => 12,
            Self::Header(_) => 13,
            Self::Footer(_) => 14,
        }
    }
}

/// A corpus plus its JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub corpus: MotionCorpus,
    pub meta: Value,
}

pub fn encode(corpus: &MotionCorpus, meta: &Value) -> Vec<u8> {
    let footer = serde_json::to_vec(meta).expect("json value serializes");
    let labels = !corpus.labels().is_empty();
    let mut out = Vec::with_capacity(HEADER_LEN + corpus.frames().len() * 8 + footer.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [corpus.joints(), corpus.observed(), corpus.future()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    out.extend_from_slice(&(labels as u32).to_le_bytes());
    for v in corpus.frames() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in corpus.labels() {
        out.extend_from_slice(&l.family.to_le_bytes());
        out.extend_from_slice(&l.mode.to_le_bytes());
    }
    out.extend_from_slice(&(footer.len() as u64).to_le_bytes());
    out.extend_from_slice(&footer);
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<DatasetFile, DatasetError> {
    let need = |needed: usize| if bytes.len() < needed { Err(DatasetError::Truncated { needed, have: bytes.len() }) } else { Ok(()) };
    need(8)?;
    if &bytes[..8] != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    need(HEADER_LEN)?;
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(DatasetError::Version(version));
    }
    let (j, h, f) = (u32_at(bytes, 12) as usize, u32_at(bytes, 16) as usize, u32_at(bytes, 20) as usize);
    let n = u64_at(bytes, 24);
    let flags = u32_at(bytes, 32);
    if j == 0 || h == 0 || f == 0 || flags > 1 {
        return Err(DatasetError::Header(format!("J={j} H={h} F={f} flags={flags}")));
    }
    let per = (h + f)
        .checked_mul(3 * j)
        .and_then(|p| p.checked_mul(8))
        .ok_or_else(|| DatasetError::Header("item size overflows".into()))?;
    let frames_len = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(per))
        .ok_or_else(|| DatasetError::Header(format!("item count {n} too large")))?;
    let n = n as usize;
    let labels_len = if flags == 1 { n * 8 } else { 0 };
    let body_end = HEADER_LEN + frames_len + labels_len;
    need(body_end + 8)?;
    let frames: Vec<f64> = bytes[HEADER_LEN..HEADER_LEN + frames_len]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels: Vec<ItemLabel> = (0..if flags == 1 { n } else { 0 })
        .map(|i| {
            let at = HEADER_LEN + frames_len + i * 8;
            ItemLabel { family: u32_at(bytes, at), mode: u32_at(bytes, at + 4) }
        })
        .collect();
    let footer_len = u64_at(bytes, body_end) as usize;
    let footer_start = body_end + 8;
    need(footer_start.saturating_add(footer_len))?;
    if bytes.len() != footer_start + footer_len {
        return Err(DatasetError::Header("trailing bytes after footer".into()));
    }
    let meta: Value =
        serde_json::from_slice(&bytes[footer_start..]).map_err(|e| DatasetError::Footer(e.to_string()))?;
    let corpus = MotionCorpus::new(h, f, 3 * j, frames, labels).map_err(|e| DatasetError::Header(e.to_string()))?;
    Ok(DatasetFile { corpus, meta })
}

pub fn save(path: &Path, corpus: &MotionCorpus, meta: &Value) -> Result<(), CliError> {
    io::atomic_write(path, &encode(corpus, meta))
}

pub fn load(path: &Path) -> Result<DatasetFile, CliError> {
    let bytes = io::read(path)?;
    decode(&bytes).map_err(|e| CliError::Data(format!("{}: dataset error {}: {e}", path.display(), e.code())))
}

pub fn train_path(dir: &Path) -> PathBuf {
    dir.join("train.mdd")
}

pub fn test_path(dir: &Path) -> PathBuf {
    dir.join("test.mdd")
}
