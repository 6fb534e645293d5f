//! Diversity and accuracy metrics over sets of sampled futures.
//!
//! APD is the mean over unordered sample pairs of the L2 distance between
//! flattened futures. Best/median/worst aggregation uses the lower median.

use alloc::vec::Vec;

use crate::data::MotionCorpus;
use crate::diffusion::{Diffusion, SamplerPlan};
use crate::distill::{student_fn, teacher_fn, MultiStepTeacher};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::models::DenoiserModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `S` sampled futures for one observation, with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    samples: Tensor,
    gt: Tensor,
    obs: Tensor,
}

impl PredictionSet {
    /// `samples [S, F, C]`, `gt [F, C]`, `obs [H, C]`.
    pub fn new(samples: Tensor, gt: Tensor, obs: Tensor) -> Result<Self> {
        let ok = samples.rank() == 3
            && samples.shape()[0] >= 1
            && gt.rank() == 2
            && samples.shape()[1..] == *gt.shape()
            && obs.rank() == 2
            && obs.shape()[1] == gt.shape()[1];
        if !ok {
            return Err(Error::ShapeMismatch { op: "prediction set", lhs: samples.shape().to_vec(), rhs: gt.shape().to_vec() });
        }
        Ok(Self { samples, gt, obs })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn gt(&self) -> &Tensor {
        &self.gt
    }

    pub fn obs(&self) -> &Tensor {
        &self.obs
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.gt.numel();
        &self.samples.data()[i * n..(i + 1) * n]
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Average pairwise distance of `samples [S, F, C]`.
pub fn apd(samples: &Tensor) -> f64 {
    let s = samples.shape()[0];
    if s < 2 {
        log::debug!("apd of a single sample is defined as 0");
        return 0.0;
    }
    let n = samples.numel() / s;
    let d = samples.data();
    let mut sum = 0.0;
    for i in 0..s {
        for j in i + 1..s {
            sum += dist(&d[i * n..(i + 1) * n], &d[j * n..(j + 1) * n]);
        }
    }
    2.0 * sum / (s * (s - 1)) as f64
}

/// Mean per-frame L2 error; both slices are `[F, C]` row-major.
pub fn ade(sample: &[f64], gt: &[f64], channels: usize) -> f64 {
    let frames = gt.len() / channels;
    let total: f64 = sample.chunks(channels).zip(gt.chunks(channels)).map(|(a, b)| dist(a, b)).sum();
    total / frames as f64
}

/// L2 error of the final frame.
pub fn fde(sample: &[f64], gt: &[f64], channels: usize) -> f64 {
    let start = gt.len() - channels;
    dist(&sample[start..], &gt[start..])
}

/// Best, lower-median and worst of a set of per-sample errors.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Bmw {
    pub best: f64,
    pub median: f64,
    pub worst: f64,
}

pub fn aggregate_bmw(errors: &[f64]) -> Result<Bmw> {
    if errors.is_empty() {
        return Err(invalid("aggregate_bmw: no errors"));
    }
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Bmw { best: v[0], median: v[(v.len() - 1) / 2], worst: v[v.len() - 1] })
}

/// Per-observation sets of plausible futures, as indices into a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalGt {
    pub sets: Vec<Vec<usize>>,
}

/// Groups items whose final observed frames lie within `tau` of each other.
pub fn build_multimodal_gt(corpus: &MotionCorpus, tau: f64) -> Result<MultimodalGt> {
    if !(tau > 0.0) {
        return Err(invalid("multimodal gt: tau must be positive"));
    }
    let (h, c) = (corpus.observed(), corpus.channels());
    let last: Vec<Tensor> = (0..corpus.len()).map(|i| corpus.observation(i)).collect();
    let frame = |i: usize| &last[i].data()[(h - 1) * c..];
    let sets = (0..corpus.len())
        .map(|i| (0..corpus.len()).filter(|&j| j == i || dist(frame(i), frame(j)) <= tau).collect())
        .collect();
    Ok(MultimodalGt { sets })
}

/// Per-observation metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ItemMetrics {
    pub apd: f64,
    pub ade: Bmw,
    pub fde: Bmw,
    pub mmade: Bmw,
    pub mmfde: Bmw,
}

/// MMADE and MMFDE: per sample, the minimum error over `futures`, then
/// aggregated over samples.
pub fn mm_metrics(set: &PredictionSet, futures: &[Tensor]) -> Result<(Bmw, Bmw)> {
    if futures.is_empty() {
        return Err(invalid("mm_metrics: empty multimodal set"));
    }
    let c = set.gt.shape()[1];
    let mut a = Vec::with_capacity(set.len());
    let mut f = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let s = set.sample(i);
        a.push(futures.iter().map(|g| ade(s, g.data(), c)).fold(f64::INFINITY, f64::min));
        f.push(futures.iter().map(|g| fde(s, g.data(), c)).fold(f64::INFINITY, f64::min));
    }
    Ok((aggregate_bmw(&a)?, aggregate_bmw(&f)?))
}

pub fn item_metrics(set: &PredictionSet, futures: &[Tensor]) -> Result<ItemMetrics> {
    let c = set.gt.shape()[1];
    let errs = |f: fn(&[f64], &[f64], usize) -> f64| -> Vec<f64> {
        (0..set.len()).map(|i| f(set.sample(i), set.gt.data(), c)).collect()
    };
    let (mmade, mmfde) = mm_metrics(set, futures)?;
    Ok(ItemMetrics {
        apd: apd(&set.samples),
        ade: aggregate_bmw(&errs(ade))?,
        fde: aggregate_bmw(&errs(fde))?,
        mmade,
        mmfde,
    })
}

/// Produces `S` futures `[S, F, C]` for one observation `[H, C]`.
pub trait FutureSampler {
    fn sample(&self, obs: &Tensor, s: usize, rng: &mut Rng) -> Result<Tensor>;
}

fn replicate(obs: &Tensor, s: usize) -> Result<Tensor> {
    let (h, c) = obs.dims2()?;
    let mut data = Vec::with_capacity(s * obs.numel());
    for _ in 0..s {
        data.extend_from_slice(obs.data());
    }
    Tensor::new([s, h, c], data)
}

/// The multi-step teacher; each of the `S` samples starts from its own noise.
pub struct TeacherSampler<'a> {
    pub model: &'a DenoiserModel,
    pub diffusion: &'a Diffusion,
    pub plan: &'a SamplerPlan,
}

impl FutureSampler for TeacherSampler<'_> {
    fn sample(&self, obs: &Tensor, s: usize, rng: &mut Rng) -> Result<Tensor> {
        let batch = replicate(obs, s)?;
        let eps = Tensor::randn([s, self.diffusion.retained(), obs.shape()[1]], 1.0, rng);
        let map = MultiStepTeacher { model: self.model, diffusion: self.diffusion, plan: self.plan };
        self.diffusion.decode_future(&teacher_fn(&map, &batch, &eps)?)
    }
}

/// Any one-step model (stage-1 or stage-2).
pub struct OneStepSampler<'a> {
    pub model: &'a DenoiserModel,
    pub diffusion: &'a Diffusion,
}

impl FutureSampler for OneStepSampler<'_> {
    fn sample(&self, obs: &Tensor, s: usize, rng: &mut Rng) -> Result<Tensor> {
        let batch = replicate(obs, s)?;
        let eps = Tensor::randn([s, self.diffusion.retained(), obs.shape()[1]], 1.0, rng);
        self.diffusion.decode_future(&student_fn(self.model, self.diffusion, &batch, &eps)?)
    }
}

/// Returns every item's own ground truth `S` times.
pub struct GroundTruthStub<'a> {
    pub corpus: &'a MotionCorpus,
}

impl FutureSampler for GroundTruthStub<'_> {
    fn sample(&self, obs: &Tensor, s: usize, _rng: &mut Rng) -> Result<Tensor> {
        let i = (0..self.corpus.len())
            .find(|&i| self.corpus.observation(i) == *obs)
            .ok_or_else(|| invalid("stub sampler: observation not in corpus"))?;
        let gt = self.corpus.future_of(i);
        replicate(&gt, s)
    }
}

/// Metrics averaged over a test corpus.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsSummary {
    pub items: usize,
    pub samples: usize,
    pub tau: f64,
    pub apd: f64,
    pub ade: Bmw,
    pub fde: Bmw,
    pub mmade: Bmw,
    pub mmfde: Bmw,
}

fn mean_bmw(items: &[ItemMetrics], f: impl Fn(&ItemMetrics) -> Bmw) -> Bmw {
    let n = items.len() as f64;
    let mut acc = Bmw::default();
    for m in items {
        let b = f(m);
        acc.best += b.best;
        acc.median += b.median;
        acc.worst += b.worst;
    }
    Bmw { best: acc.best / n, median: acc.median / n, worst: acc.worst / n }
}

/// Runs `sampler` on every test observation and averages the item metrics.
pub fn evaluate(sampler: &dyn FutureSampler, test: &MotionCorpus, s: usize, tau: f64, rng: &mut Rng) -> Result<(MetricsSummary, Vec<ItemMetrics>)> {
    if s == 0 || test.is_empty() {
        return Err(invalid("evaluate: need at least one sample and one test item"));
    }
    if s == 1 {
        log::warn!("evaluate: apd of a single sample is defined as 0");
    }
    let mm = build_multimodal_gt(test, tau)?;
    let futures: Vec<Tensor> = (0..test.len()).map(|i| test.future_of(i)).collect();
    let mut items = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let obs = test.observation(i);
        let samples = sampler.sample(&obs, s, rng)?;
        let set = PredictionSet::new(samples, futures[i].clone(), obs)?;
        let group: Vec<Tensor> = mm.sets[i].iter().map(|&j| futures[j].clone()).collect();
        items.push(item_metrics(&set, &group)?);
    }
    let n = items.len() as f64;
    let summary = MetricsSummary {
        items: items.len(),
        samples: s,
        tau,
        apd: items.iter().map(|m| m.apd).sum::<f64>() / n,
        ade: mean_bmw(&items, |m| m.ade),
        fde: mean_bmw(&items, |m| m.fde),
        mmade: mean_bmw(&items, |m| m.mmade),
        mmfde: mean_bmw(&items, |m| m.mmfde),
    };
    Ok((summary, items))
}
