//! Noise schedule, forward noising, noise-prediction training and the
//! deterministic (DDIM, eta = 0) inpainting sampler.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::data::{pad_batch, MotionCorpus};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::models::DenoiserModel;
use crate::motion::{FrequencyCodec, InpaintOperator};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal coefficients `abar_k`, strictly decreasing in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule. `abar_k = f(k + 1) / f(0)` with
    /// `f(t) = cos^2(((t / K + s) / (1 + s)) * pi / 2)`, per-step betas
    /// clipped at 0.999 so the last entry stays positive.
    pub fn cosine(k_train: usize) -> Result<Self> {
        if k_train == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let f = |t: f64| {
            let a = (t / k_train as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * math::PI / 2.0;
            let c = math::cos(a);
            c * c
        };
        let f0 = f(0.0);
        let mut alpha_bar = Vec::with_capacity(k_train);
        let mut prev = 1.0;
        let mut prev_f = f0;
        for k in 0..k_train {
            let fk = f((k + 1) as f64);
            let beta = (1.0 - fk / prev_f).clamp(0.0, MAX_BETA);
            prev *= 1.0 - beta;
            prev_f = fk;
            alpha_bar.push(prev);
        }
        Ok(Self { alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        self.alpha_bar.get(k).copied().ok_or_else(|| invalid("diffusion step out of range"))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `y_k = sqrt(abar_k) y0 + sqrt(1 - abar_k) eps`.
    pub fn q_sample(&self, y0: &Tensor, k: usize, eps: &Tensor) -> Result<Tensor> {
        q_sample_at(y0, self.alpha_bar(k)?, eps)
    }
}

pub fn make_schedule(k_train: usize, kind: &str) -> Result<NoiseSchedule> {
    match kind {
        "cosine" => NoiseSchedule::cosine(k_train),
        other => Err(invalid(alloc::format!("unknown schedule kind `{other}`"))),
    }
}

/// Forward noising at an explicit signal level.
pub fn q_sample_at(y0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(invalid("alpha_bar must lie in [0, 1]"));
    }
    let (a, b) = (math::sqrt(alpha_bar), math::sqrt(1.0 - alpha_bar));
    y0.zip_map(eps, |y, e| a * y + b * e)
}

/// Descending step indices into the training schedule.
///
/// Steps are `floor(i * K / n)` for `i = n-1, ..., 0`, so the last step is
/// always 0 and every step moves toward `abar = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerPlan {
    steps: Vec<usize>,
}

impl SamplerPlan {
    pub fn new(k_train: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || n_steps > k_train {
            return Err(invalid("sampler plan needs 1 <= n_steps <= K"));
        }
        let steps = (0..n_steps).rev().map(|i| i * k_train / n_steps).collect();
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Signal level the `i`-th update moves to; 1 after the final step.
    pub fn target_alpha(&self, schedule: &NoiseSchedule, i: usize) -> Result<f64> {
        match self.steps.get(i + 1) {
            Some(&k) => schedule.alpha_bar(k),
            None => Ok(1.0),
        }
    }
}

/// A network that predicts the noise in `[B, L, 3J]` inputs.
pub trait NoisePredictor {
    fn predict_noise(&self, y: &Tensor, c: &Tensor, steps: &[usize]) -> Result<Tensor>;
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, y: &Tensor, c: &Tensor, steps: &[usize]) -> Result<Tensor> {
        self.predict(&mut Tape::new(), y, c, steps)
    }
}

/// Frequency-domain geometry shared by training and sampling: the codec for
/// `(N, L)`, the inpainting operator for `H` observed frames and the schedule.
#[derive(Clone, Debug)]
pub struct Diffusion {
    pub schedule: NoiseSchedule,
    codec: FrequencyCodec,
    inpaint: InpaintOperator,
    observed: usize,
}

impl Diffusion {
    pub fn new(schedule: NoiseSchedule, observed: usize, future: usize, retained: usize) -> Result<Self> {
        if observed == 0 || future == 0 {
            return Err(invalid("diffusion: H and F must be positive"));
        }
        let codec = FrequencyCodec::new(observed + future, retained)?;
        let inpaint = codec.inpaint_operator(observed)?;
        Ok(Self { schedule, codec, inpaint, observed })
    }

    pub fn codec(&self) -> &FrequencyCodec {
        &self.codec
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    pub fn seq_len(&self) -> usize {
        self.codec.seq_len()
    }

    pub fn future(&self) -> usize {
        self.seq_len() - self.observed
    }

    pub fn retained(&self) -> usize {
        self.codec.retained()
    }

    /// Condition coefficients `[B, L, C]` from observations `[B, H, C]`.
    pub fn condition(&self, obs: &Tensor) -> Result<Tensor> {
        if obs.rank() != 3 || obs.shape()[1] != self.observed {
            return Err(invalid("condition: expected [B, H, C] observations"));
        }
        self.codec.encode_batch(&pad_batch(obs, self.seq_len())?)
    }

    /// Noise-free splice of the condition into `y`: observed frames exact at
    /// `L = N`.
    pub fn inpaint_clean(&self, y: &Tensor, c: &Tensor) -> Result<Tensor> {
        self.inpaint.apply_batch(y, c)
    }

    pub fn inpaint_operator(&self) -> &InpaintOperator {
        &self.inpaint
    }

    /// Multi-step sampling from `init` (the initial noise `[B, L, C]`).
    /// Returns clean coefficients `[B, L, C]`.
    pub fn sample_coeffs(
        &self,
        model: &dyn NoisePredictor,
        c: &Tensor,
        init: &Tensor,
        plan: &SamplerPlan,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        if init.shape() != c.shape() {
            return Err(Error::ShapeMismatch { op: "sample", lhs: init.shape().to_vec(), rhs: c.shape().to_vec() });
        }
        let batch = c.shape()[0];
        let mut y = init.clone();
        for (i, &k) in plan.steps().iter().enumerate() {
            let ab = self.schedule.alpha_bar(k)?;
            let ab_next = plan.target_alpha(&self.schedule, i)?;
            let eps = model.predict_noise(&y, c, &vec![k; batch])?;
            let (sa, sb) = (math::sqrt(ab), math::sqrt(1.0 - ab));
            let (ta, tb) = (math::sqrt(ab_next), math::sqrt(1.0 - ab_next));
            let y_den = y.zip_map(&eps, |yv, e| ta * (yv - sb * e) / sa + tb * e)?;
            let y_obs = if ab_next >= 1.0 {
                c.clone()
            } else {
                let fresh = Tensor::randn(c.shape().to_vec(), 1.0, rng);
                q_sample_at(c, ab_next, &fresh)?
            };
            y = self.inpaint.apply_batch(&y_den, &y_obs)?;
            if !y.is_finite() {
                return Err(Error::NonFinite { op: "sample" });
            }
        }
        Ok(y)
    }

    /// Frequency coefficients back to full sequences `[B, N, C]`.
    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        self.codec.decode_batch(y)
    }

    /// The last `F` frames of each decoded sequence, `[B, F, C]`.
    pub fn decode_future(&self, y: &Tensor) -> Result<Tensor> {
        let full = self.decode(y)?;
        let (b, n, c) = (full.shape()[0], full.shape()[1], full.shape()[2]);
        let h = self.observed;
        let mut data = Vec::with_capacity(b * (n - h) * c);
        for i in 0..b {
            data.extend_from_slice(&full.data()[(i * n + h) * c..(i + 1) * n * c]);
        }
        Tensor::new([b, n - h, c], data)
    }
}

/// Samples one future `[F, C]` for an observation `[H, C]`, starting from
/// fresh Gaussian noise.
pub fn sample_teacher(
    model: &dyn NoisePredictor,
    diffusion: &Diffusion,
    x_obs: &Tensor,
    plan: &SamplerPlan,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (h, ch) = x_obs.dims2()?;
    let obs = x_obs.clone().reshape([1, h, ch])?;
    let c = diffusion.condition(&obs)?;
    let init = Tensor::randn(c.shape().to_vec(), 1.0, rng);
    let y = diffusion.sample_coeffs(model, &c, &init, plan, rng)?;
    let fut = diffusion.decode_future(&y)?;
    let f = fut.shape()[1];
    fut.reshape([f, ch])
}

/// Settings for noise-prediction training.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.samples_per_epoch == 0 {
            return Err(invalid("training: epochs, batch and samples_per_epoch must be positive"));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(invalid("training: base_lr must be positive and warmup_frac in [0, 1)"));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch)
    }
}

/// Per-epoch progress line.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Learning rate for optimizer step `step` of `total`: warmup then cosine,
/// offset by one so the first update is nonzero.
pub fn step_lr(step: usize, total: usize, base_lr: f64, warmup_frac: f64) -> Result<f64> {
    cosine_lr(step + 1, total + 1, base_lr, warmup_frac)
}

/// Noise-prediction loss on a fixed batch: `mean ||eps - model(y_k, c, k)||^2`.
pub fn teacher_loss(
    model: &DenoiserModel,
    tape: &mut Tape,
    p: &[Var],
    y_noisy: &Tensor,
    c: &Tensor,
    steps: &[usize],
    eps: &Tensor,
) -> Result<Var> {
    let yv = tape.constant(y_noisy.clone())?;
    let cv = tape.constant(c.clone())?;
    let ev = tape.constant(eps.clone())?;
    let out = model.teacher_forward(tape, p, yv, cv, steps)?;
    tape.mse(out, ev)
}

/// One optimizer step of noise-prediction training.
pub struct TeacherTrainer<'d> {
    diffusion: &'d Diffusion,
    opt: AdamW,
    tape: Tape,
    steps_done: usize,
}

impl<'d> TeacherTrainer<'d> {
    pub fn new(diffusion: &'d Diffusion, model: &DenoiserModel, opt: AdamWConfig) -> Self {
        Self { diffusion, opt: AdamW::new(opt, model.params().tensors()), tape: Tape::new(), steps_done: 0 }
    }

    /// Samples `k` and `eps`, noises the batch `[B, N, C]` and applies one
    /// update. Returns the pre-update loss.
    pub fn step(&mut self, model: &mut DenoiserModel, batch: &Tensor, rng: &mut Rng, lr: f64) -> Result<f64> {
        if batch.rank() != 3 || batch.shape()[0] == 0 {
            return Err(invalid("teacher_train_step: expected a nonempty [B, N, C] batch"));
        }
        let d = self.diffusion;
        let b = batch.shape()[0];
        let y0 = d.codec.encode_batch(batch)?;
        let obs = observed_part(batch, d.observed)?;
        let c = d.condition(&obs)?;
        let ks: Vec<usize> = (0..b).map(|_| rng::below(rng, d.schedule.len())).collect();
        let eps = Tensor::randn(y0.shape().to_vec(), 1.0, rng);
        let per = y0.numel() / b;
        let mut yk = Vec::with_capacity(y0.numel());
        for (i, &k) in ks.iter().enumerate() {
            let ab = d.schedule.alpha_bar(k)?;
            let (sa, sb) = (math::sqrt(ab), math::sqrt(1.0 - ab));
            for j in i * per..(i + 1) * per {
                yk.push(sa * y0.data()[j] + sb * eps.data()[j]);
            }
        }
        let yk = Tensor::new(y0.shape().to_vec(), yk)?;
        let step = self.steps_done;
        self.steps_done += 1;
        let result = model.train_step(&mut self.opt, &mut self.tape, lr, |m, tape, p| {
            teacher_loss(m, tape, p, &yk, &c, &ks, &eps)
        });
        match result {
            Ok(loss) if loss.is_finite() => Ok(loss),
            Ok(_) | Err(Error::NonFinite { .. }) => {
                let (k, batch_index) = locate_non_finite(model, &yk, &c, &ks, &eps);
                log::error!("non-finite teacher loss at optimizer step {step}: k={k}, batch index {batch_index}");
                Err(Error::NonFiniteLoss { step: k, batch_index })
            }
            Err(e) => Err(e),
        }
    }
}

fn locate_non_finite(model: &DenoiserModel, yk: &Tensor, c: &Tensor, ks: &[usize], eps: &Tensor) -> (usize, usize) {
    for (i, &k) in ks.iter().enumerate() {
        let one = |t: &Tensor| t.index0(i).and_then(|x| {
            let s = x.shape().to_vec();
            x.reshape([1, s[0], s[1]])
        });
        let ok = (|| -> Result<bool> {
            let out = model.predict(&mut Tape::new(), &one(yk)?, &one(c)?, &[k])?;
            Ok(out.sub(&one(eps)?)?.sum_sq().is_finite())
        })();
        if !matches!(ok, Ok(true)) {
            return (k, i);
        }
    }
    (ks.first().copied().unwrap_or(0), 0)
}

/// `[B, N, C] -> [B, H, C]`.
pub fn observed_part(batch: &Tensor, observed: usize) -> Result<Tensor> {
    let (b, n, c) = match batch.shape() {
        [b, n, c] => (*b, *n, *c),
        _ => return Err(invalid("expected [B, N, C]")),
    };
    if observed > n {
        return Err(invalid("observed length exceeds sequence length"));
    }
    let mut data = Vec::with_capacity(b * observed * c);
    for i in 0..b {
        data.extend_from_slice(&batch.data()[i * n * c..(i * n + observed) * c]);
    }
    Tensor::new([b, observed, c], data)
}

/// Trains a teacher on `corpus` with batches drawn uniformly with
/// replacement. `observer` sees one record per epoch.
pub fn train_teacher(
    model: &mut DenoiserModel,
    diffusion: &Diffusion,
    corpus: &MotionCorpus,
    cfg: &TeacherTrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(invalid("training corpus is empty"));
    }
    if corpus.seq_len() != diffusion.seq_len() || corpus.observed() != diffusion.observed() {
        return Err(invalid("corpus sequence shape differs from the diffusion setup"));
    }
    let opt = AdamWConfig { lr: cfg.base_lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut trainer = TeacherTrainer::new(diffusion, model, opt);
    let mut rng = rng::seeded(cfg.seed);
    let per_epoch = cfg.batches_per_epoch();
    let total = cfg.epochs * per_epoch;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut lr = 0.0;
        for b in 0..per_epoch {
            let size = cfg.batch.min(cfg.samples_per_epoch - b * cfg.batch);
            let idx: Vec<usize> = (0..size).map(|_| rng::below(&mut rng, corpus.len())).collect();
            lr = step_lr(epoch * per_epoch + b, total, cfg.base_lr, cfg.warmup_frac)?;
            sum += trainer.step(model, &corpus.gather(&idx), &mut rng, lr)?;
        }
        let rec = EpochRecord { epoch, train_loss: sum / per_epoch as f64, val_loss: None, lr };
        observer(&rec);
        history.push(rec);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, TeacherConfig};
    use crate::rng::seeded;

    #[test]
    fn cosine_schedule_is_monotone_in_unit_interval() {
        for k in [1, 2, 10, 1000] {
            let s = make_schedule(k, "cosine").unwrap();
            assert_eq!(s.len(), k);
            let a = s.alpha_bars();
            assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!(a.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn cosine_schedule_starts_near_one() {
        let s = make_schedule(1000, "cosine").unwrap();
        assert!(s.alpha_bar(0).unwrap() > 0.999);
        assert!(s.alpha_bar(999).unwrap() < 1e-3);
    }

    #[test]
    fn unknown_schedule_kind_is_rejected() {
        assert!(make_schedule(10, "linear").is_err());
        assert!(make_schedule(0, "cosine").is_err());
    }

    #[test]
    fn single_step_schedule_gives_single_step_plan() {
        let s = make_schedule(1, "cosine").unwrap();
        let plan = SamplerPlan::new(s.len(), 1).unwrap();
        assert_eq!(plan.steps(), &[0]);
        assert_eq!(plan.target_alpha(&s, 0).unwrap(), 1.0);
    }

    #[test]
    fn plan_is_strictly_decreasing_and_ends_at_zero() {
        for (k, n) in [(1000, 10), (1000, 20), (1000, 1000), (7, 3)] {
            let plan = SamplerPlan::new(k, n).unwrap();
            assert_eq!(plan.n_steps(), n);
            assert_eq!(*plan.steps().last().unwrap(), 0);
            assert!(plan.steps().windows(2).all(|w| w[1] < w[0]));
        }
        assert!(SamplerPlan::new(10, 11).is_err());
        assert!(SamplerPlan::new(10, 0).is_err());
    }

    #[test]
    fn q_sample_special_levels() {
        let mut rng = seeded(1);
        let y0 = Tensor::randn([3, 2], 1.0, &mut rng);
        let eps = Tensor::randn([3, 2], 1.0, &mut rng);
        assert_eq!(q_sample_at(&y0, 1.0, &eps).unwrap(), y0);
        assert_eq!(q_sample_at(&y0, 0.0, &eps).unwrap(), eps);
        let q = q_sample_at(&y0, 0.25, &eps).unwrap();
        for i in 0..6 {
            let want = 0.5 * y0.data()[i] + 0.75f64.sqrt() * eps.data()[i];
            assert!((q.data()[i] - want).abs() < 1e-15);
        }
        let s = make_schedule(10, "cosine").unwrap();
        assert!(s.q_sample(&y0, 10, &eps).is_err());
    }

    #[test]
    fn q_sample_marginals() {
        let s = make_schedule(100, "cosine").unwrap();
        let k = 40;
        let ab = s.alpha_bar(k).unwrap();
        let y0 = Tensor::new([1], vec![0.7]).unwrap();
        let mut rng = seeded(9);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let eps = Tensor::randn([1], 1.0, &mut rng);
                s.q_sample(&y0, k, &eps).unwrap().data()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        let want_std = (1.0 - ab).sqrt();
        assert!((mean - ab.sqrt() * 0.7).abs() < 3.0 * want_std / 100.0, "mean {mean}");
        assert!((std / want_std - 1.0).abs() < 0.05, "std {std}");
    }

    // Predicts the exact noise relative to a known clean target.
    struct Oracle<'a> {
        y0: &'a Tensor,
        schedule: &'a NoiseSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn predict_noise(&self, y: &Tensor, _c: &Tensor, steps: &[usize]) -> Result<Tensor> {
            let ab = self.schedule.alpha_bar(steps[0])?;
            y.zip_map(self.y0, |yv, t| (yv - ab.sqrt() * t) / (1.0 - ab).sqrt())
        }
    }

    fn observed_sequence(h: usize, f: usize, ch: usize, seed: u64) -> Tensor {
        Tensor::randn([1, h + f, ch], 1.0, &mut seeded(seed))
    }

    #[test]
    fn exact_noise_oracle_recovers_clean_coefficients() {
        let (h, f, ch) = (3, 5, 2);
        let n = h + f;
        let schedule = make_schedule(1000, "cosine").unwrap();
        let d = Diffusion::new(schedule.clone(), h, f, n).unwrap();
        let x = observed_sequence(h, f, ch, 3);
        let y0 = d.codec().encode_batch(&x).unwrap();
        let obs = observed_part(&x, h).unwrap();
        let c = d.condition(&obs).unwrap();
        let plan = SamplerPlan::new(1000, 1000).unwrap();
        let oracle = Oracle { y0: &y0, schedule: &schedule };
        let init = Tensor::randn(y0.shape().to_vec(), 1.0, &mut seeded(4));
        let y = d.sample_coeffs(&oracle, &c, &init, &plan, &mut seeded(5)).unwrap();
        let err = y.max_abs_diff(&y0).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    fn tiny_teacher(l: usize, j: usize, seed: u64) -> DenoiserModel {
        let cfg = TeacherConfig { n_layers: 2, d_model: 16, n_heads: 2, ffn_dim: 32, se_reduction: 4, retained: l, joints: j };
        DenoiserModel::new(ModelConfig::Teacher(cfg), &mut seeded(seed)).unwrap()
    }

    #[test]
    fn observed_rows_are_exact_at_full_length() {
        let (h, f, j) = (4, 3, 1);
        let d = Diffusion::new(make_schedule(50, "cosine").unwrap(), h, f, h + f).unwrap();
        let model = tiny_teacher(h + f, j, 1);
        let x_obs = Tensor::randn([h, 3 * j], 1.0, &mut seeded(2));
        let plan = SamplerPlan::new(50, 5).unwrap();
        let c = d.condition(&x_obs.clone().reshape([1, h, 3]).unwrap()).unwrap();
        let init = Tensor::randn(c.shape().to_vec(), 1.0, &mut seeded(3));
        let y = d.sample_coeffs(&model, &c, &init, &plan, &mut seeded(4)).unwrap();
        let full = d.decode(&y).unwrap();
        for i in 0..h * 3 {
            assert!((full.data()[i] - x_obs.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let (h, f) = (3, 3);
        let d = Diffusion::new(make_schedule(20, "cosine").unwrap(), h, f, 4).unwrap();
        let model = tiny_teacher(4, 1, 7);
        let x_obs = Tensor::randn([h, 3], 1.0, &mut seeded(8));
        let plan = SamplerPlan::new(20, 4).unwrap();
        let a = sample_teacher(&model, &d, &x_obs, &plan, &mut seeded(9)).unwrap();
        let b = sample_teacher(&model, &d, &x_obs, &plan, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[f, 3]);
    }

    struct Echo<'a>(&'a Tensor);

    impl NoisePredictor for Echo<'_> {
        fn predict_noise(&self, _y: &Tensor, _c: &Tensor, _steps: &[usize]) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn stubbed_exact_noise_gives_zero_loss_and_zero_output_gives_unit_loss() {
        let mut rng = seeded(1);
        let eps = Tensor::randn([4, 3, 3], 1.0, &mut rng);
        let out = Echo(&eps).predict_noise(&eps, &eps, &[0; 4]).unwrap();
        assert_eq!(out.sub(&eps).unwrap().sum_sq(), 0.0);

        let (h, f) = (3, 3);
        let d = Diffusion::new(make_schedule(100, "cosine").unwrap(), h, f, 6).unwrap();
        let mut model = tiny_teacher(6, 1, 2);
        model.zero_head();
        let batch = Tensor::randn([256, h + f, 3], 0.3, &mut rng);
        let mut trainer = TeacherTrainer::new(&d, &model, AdamWConfig::default());
        let loss = trainer.step(&mut model, &batch, &mut rng, 1e-9).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
    }

    #[test]
    fn step_lr_never_hits_zero() {
        for s in 0..100 {
            let lr = step_lr(s, 100, 1e-3, 0.1).unwrap();
            assert!(lr > 0.0 && lr <= 1e-3);
        }
    }
}
