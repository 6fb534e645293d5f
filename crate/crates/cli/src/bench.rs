//! Wall-clock latency harness.

use std::time::{Duration, Instant};

use motion_distill_core::diffusion::{Diffusion, SamplerPlan};
use motion_distill_core::distill::{CoeffMap, MultiStepTeacher, OneStep};
use motion_distill_core::models::DenoiserModel;
use motion_distill_core::{rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

/// Runs shorter than this are close to the timer granularity.
const RESOLUTION_FLOOR: Duration = Duration::from_micros(10);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub repeats: usize,
    pub warmup: usize,
    pub mean_s: f64,
    pub min_s: f64,
    pub std_s: f64,
}

/// Calls `run` `warmup` times untimed, then `repeats` times timed.
pub fn benchmark_inference(run: &mut dyn FnMut() -> CliResult<()>, repeats: usize, warmup: usize) -> CliResult<Timing> {
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed());
    }
    if times.iter().any(|d| *d < RESOLUTION_FLOOR) {
        log::warn!("benchmark: some runs took under {RESOLUTION_FLOOR:?}; timings are near timer resolution");
    }
    let secs: Vec<f64> = times.iter().map(Duration::as_secs_f64).collect();
    let n = secs.len() as f64;
    let mean = secs.iter().sum::<f64>() / n;
    let var = secs.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(Timing {
        repeats: secs.len(),
        warmup,
        mean_s: mean,
        min_s: secs.iter().copied().fold(f64::INFINITY, f64::min),
        std_s: var.sqrt(),
    })
}

/// How a checkpoint turns noise into a sample.
pub enum Sampler<'a> {
    MultiStep(MultiStepTeacher<'a>),
    OneStep(OneStep<'a>),
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a DenoiserModel, diffusion: &'a Diffusion, plan: Option<&'a SamplerPlan>) -> Self {
        match plan {
            Some(plan) => Self::MultiStep(MultiStepTeacher { model, diffusion, plan }),
            None => Self::OneStep(OneStep { model, diffusion }),
        }
    }

    pub fn map(&self) -> &dyn CoeffMap {
        match self {
            Self::MultiStep(m) => m,
            Self::OneStep(m) => m,
        }
    }
}

/// Times drawing `batch` futures for one observation: conditioning, the
/// coefficient map and decoding.
pub fn time_sampler(
    map: &dyn CoeffMap,
    diffusion: &Diffusion,
    obs: &Tensor,
    batch: usize,
    repeats: usize,
    warmup: usize,
    seed: u64,
) -> CliResult<Timing> {
    let (h, c) = obs.dims2()?;
    let data: Vec<f64> = (0..batch).flat_map(|_| obs.data().iter().copied()).collect();
    let obs = Tensor::new([batch, h, c], data)?;
    let eps = Tensor::randn([batch, diffusion.retained(), c], 1.0, &mut rng::seeded(seed));
    let mut run = || -> CliResult<()> {
        let y = map.map(&obs, &eps)?;
        std::hint::black_box(diffusion.decode_future(&y)?);
        Ok(())
    };
    benchmark_inference(&mut run, repeats, warmup)
}
