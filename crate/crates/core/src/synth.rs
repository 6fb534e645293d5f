//! Deterministic multi-modal synthetic motion corpus.
//!
//! Each item belongs to a family (base pose plus a band-limited sinusoidal
//! motion) and a mode. The future continues the family motion and adds a
//! mode-specific displacement `D * sin(pi * tau / (2F))`, `tau = 1..F`,
//! which is zero at the boundary so sequences stay continuous. Uniform noise
//! in `[-noise_floor, noise_floor]` is added to every coordinate.

use alloc::vec::Vec;

use crate::data::{ItemLabel, MotionCorpus};
use crate::error::{invalid, Result};
use crate::math;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SyntheticCorpusSpec {
    pub joints: usize,
    pub observed: usize,
    pub future: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_modes: usize,
    pub n_families: usize,
    /// Highest harmonic, in cycles per sequence.
    pub band_limit: usize,
    pub noise_floor: f64,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.observed == 0 || self.future == 0 {
            return Err(invalid("corpus: J, H and F must be positive"));
        }
        if self.n_modes < 2 {
            return Err(invalid("corpus: n_modes must be at least 2"));
        }
        if self.n_families == 0 || self.band_limit == 0 {
            return Err(invalid("corpus: n_families and band_limit must be positive"));
        }
        if !(self.noise_floor >= 0.0) || !self.noise_floor.is_finite() {
            return Err(invalid("corpus: noise_floor must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        3 * self.joints
    }

    pub fn seq_len(&self) -> usize {
        self.observed + self.future
    }
}

#[derive(Clone, Debug)]
struct Family {
    base: Vec<f64>,
    // [channel][harmonic]
    amp: Vec<Vec<f64>>,
    phase: Vec<Vec<f64>>,
    // [mode][channel]
    displacement: Vec<Vec<f64>>,
}

/// Train and test splits plus the analytic bound on frame-to-frame change
/// across the observation/future boundary.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub train: MotionCorpus,
    pub test: MotionCorpus,
    pub step_bound: f64,
}

const PHASE_JITTER: f64 = 0.6;
const POSE_JITTER: f64 = 0.03;

fn families(spec: &SyntheticCorpusSpec) -> Vec<Family> {
    let mut rng = rng::derive(spec.seed, 1);
    let ch = spec.channels();
    (0..spec.n_families)
        .map(|_| {
            let base = (0..ch).map(|_| 0.3 * rng::normal(&mut rng)).collect();
            let amp = (0..ch)
                .map(|_| (1..=spec.band_limit).map(|h| 0.12 * rng::normal(&mut rng) / h as f64).collect())
                .collect();
            let phase = (0..ch)
                .map(|_| (0..spec.band_limit).map(|_| 2.0 * math::PI * rng::uniform(&mut rng)).collect())
                .collect();
            let displacement = (0..spec.n_modes)
                .map(|_| (0..ch).map(|_| 0.3 * rng::normal(&mut rng)).collect())
                .collect();
            Family { base, amp, phase, displacement }
        })
        .collect()
}

fn step_bound(spec: &SyntheticCorpusSpec, fams: &[Family]) -> f64 {
    let n = spec.seq_len() as f64;
    let boundary = math::sin(math::PI / (2.0 * spec.future as f64));
    let mut worst: f64 = 0.0;
    for fam in fams {
        for disp in &fam.displacement {
            let mut sq = 0.0;
            for c in 0..spec.channels() {
                let wave: f64 = fam.amp[c]
                    .iter()
                    .enumerate()
                    .map(|(h, a)| a.abs() * 2.0 * math::PI * (h + 1) as f64 / n)
                    .sum();
                let b = wave + disp[c].abs() * boundary + 2.0 * spec.noise_floor;
                sq += b * b;
            }
            worst = worst.max(math::sqrt(sq));
        }
    }
    worst
}

fn item(spec: &SyntheticCorpusSpec, fams: &[Family], rng: &mut Rng, out: &mut Vec<f64>) -> ItemLabel {
    let family = rng::below(rng, fams.len());
    let mode = rng::below(rng, spec.n_modes);
    let fam = &fams[family];
    let shift = PHASE_JITTER * (2.0 * rng::uniform(rng) - 1.0);
    let ch = spec.channels();
    let offset: Vec<f64> = (0..ch).map(|_| POSE_JITTER * (2.0 * rng::uniform(rng) - 1.0)).collect();
    let (h, f, n) = (spec.observed, spec.future, spec.seq_len() as f64);
    for t in 0..spec.seq_len() {
        let tau = t as f64 + 1.0 - h as f64;
        let ramp = if t >= h { math::sin(math::PI * tau / (2.0 * f as f64)) } else { 0.0 };
        for c in 0..ch {
            let mut v = fam.base[c] + offset[c];
            for (k, (a, p)) in fam.amp[c].iter().zip(&fam.phase[c]).enumerate() {
                v += a * math::sin(2.0 * math::PI * (k + 1) as f64 * t as f64 / n + p + shift);
            }
            v += fam.displacement[mode][c] * ramp;
            v += spec.noise_floor * (2.0 * rng::uniform(rng) - 1.0);
            out.push(v);
        }
    }
    ItemLabel { family: family as u32, mode: mode as u32 }
}

/// Generates both splits. Identical specs give identical corpora.
pub fn generate(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let fams = families(spec);
    let split = |label: u64, count: usize| -> Result<MotionCorpus> {
        let mut rng = rng::derive(spec.seed, label);
        let mut frames = Vec::with_capacity(count * spec.seq_len() * spec.channels());
        let labels = (0..count).map(|_| item(spec, &fams, &mut rng, &mut frames)).collect();
        MotionCorpus::new(spec.observed, spec.future, spec.channels(), frames, labels)
    };
    Ok(SyntheticCorpus { train: split(2, spec.n_train)?, test: split(3, spec.n_test)?, step_bound: step_bound(spec, &fams) })
}
