//! Two-stage distillation of a multi-step teacher into one-step models.
//!
//! Stage 1 copies the teacher into a one-step model of the same architecture
//! (step input pinned to the last training step) and regresses it onto the
//! full sampler output. Stage 2 trains a randomly initialized MLP student on
//! the stage-1 model. Both one-step models emit clean coefficients directly,
//! followed by one noise-free inpainting of the condition.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::data::MotionCorpus;
use crate::diffusion::{step_lr, Diffusion, EpochRecord, SamplerPlan};
use crate::error::{invalid, Error, Result};
use crate::models::DenoiserModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, hash_f64s};
use crate::tensor::Tensor;

/// Maps `(x_obs [B, H, C], eps [B, L, C])` to clean coefficients `[B, L, C]`.
pub trait CoeffMap {
    fn map(&self, obs: &Tensor, eps: &Tensor) -> Result<Tensor>;
}

/// The full DDIM sampler started from `eps`. The noise used to re-noise the
/// observation at each step is seeded from the bits of `eps`, so the map is a
/// deterministic function of its inputs.
pub struct MultiStepTeacher<'a> {
    pub model: &'a DenoiserModel,
    pub diffusion: &'a Diffusion,
    pub plan: &'a SamplerPlan,
}

impl CoeffMap for MultiStepTeacher<'_> {
    fn map(&self, obs: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let c = self.diffusion.condition(obs)?;
        let mut rng = rng::seeded(hash_f64s(eps.data()));
        self.diffusion.sample_coeffs(self.model, &c, eps, self.plan, &mut rng)
    }
}

/// A one-step model: one network evaluation plus the clean splice.
pub struct OneStep<'a> {
    pub model: &'a DenoiserModel,
    pub diffusion: &'a Diffusion,
}

impl CoeffMap for OneStep<'_> {
    fn map(&self, obs: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let c = self.diffusion.condition(obs)?;
        let mut tape = Tape::new();
        let p = self.model.params().bind(&mut tape, false)?;
        let out = one_step_graph(self.model, self.diffusion, &mut tape, &p, eps, &c)?;
        Ok(tape.value(out).clone())
    }
}

/// Step index fed to teacher-architecture one-step models.
pub fn pinned_step(diffusion: &Diffusion) -> usize {
    diffusion.schedule.len() - 1
}

/// One-step prediction on the tape: network output treated as clean
/// coefficients, then `P_den * out + P_obs * c`.
pub fn one_step_graph(
    model: &DenoiserModel,
    diffusion: &Diffusion,
    tape: &mut Tape,
    p: &[Var],
    eps: &Tensor,
    c: &Tensor,
) -> Result<Var> {
    let batch = eps.shape()[0];
    let ev = tape.constant(eps.clone())?;
    let cv = tape.constant(c.clone())?;
    let out = model.forward(tape, p, ev, cv, &vec![pinned_step(diffusion); batch])?;
    let op = diffusion.inpaint_operator();
    let pd = tape.constant(op.from_den.clone())?;
    let spliced = tape.matmul(pd, out)?;
    let obs_part = tape.constant(Tensor::left_apply(&op.from_obs, c)?)?;
    tape.add(spliced, obs_part)
}

/// `F_teacher` for either stage.
pub fn teacher_fn(teacher: &dyn CoeffMap, obs: &Tensor, eps: &Tensor) -> Result<Tensor> {
    teacher.map(obs, eps)
}

/// `F_student`: the one-step map of `model`.
pub fn student_fn(model: &DenoiserModel, diffusion: &Diffusion, obs: &Tensor, eps: &Tensor) -> Result<Tensor> {
    OneStep { model, diffusion }.map(obs, eps)
}

/// Mean squared difference over batch and elements.
pub fn distill_loss(teacher_out: &Tensor, student_out: &Tensor) -> Result<f64> {
    let d = teacher_out.sub(student_out)?;
    Ok(d.sum_sq() / d.numel().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillRunConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Denoising steps of the multi-step teacher (stage 1).
    pub teacher_steps: usize,
    /// Held-out pairs as a fraction of `samples_per_epoch`.
    pub val_fraction: f64,
    pub seed: u64,
}

impl DistillRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.samples_per_epoch == 0 {
            return Err(invalid("distill: epochs, batch and samples_per_epoch must be positive"));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(invalid("distill: base_lr must be positive and warmup_frac in [0, 1)"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 1.0) {
            return Err(invalid("distill: val_fraction must lie in (0, 1]"));
        }
        if self.teacher_steps == 0 {
            return Err(invalid("distill: teacher_steps must be positive"));
        }
        Ok(())
    }

    pub fn val_pairs(&self) -> usize {
        ((self.samples_per_epoch as f64 * self.val_fraction) as usize).max(1)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch)
    }
}

/// Fixed held-out `(x_obs, eps)` pairs and their teacher outputs.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub obs: Tensor,
    pub eps: Tensor,
    pub target: Tensor,
}

impl ValidationSet {
    pub fn build(teacher: &dyn CoeffMap, corpus: &MotionCorpus, retained: usize, count: usize, seed: u64, chunk: usize) -> Result<Self> {
        let mut rng = rng::derive(seed, 0x5641_4c);
        let idx: Vec<usize> = (0..count).map(|_| rng::below(&mut rng, corpus.len())).collect();
        let obs = corpus.gather_observations(&idx);
        let eps = Tensor::randn([count, retained, corpus.channels()], 1.0, &mut rng);
        let target = map_chunked(teacher, &obs, &eps, chunk)?;
        Ok(Self { obs, eps, target })
    }

    pub fn len(&self) -> usize {
        self.obs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distillation MSE of `map` against the stored targets.
    pub fn loss(&self, map: &dyn CoeffMap, chunk: usize) -> Result<f64> {
        distill_loss(&self.target, &map_chunked(map, &self.obs, &self.eps, chunk)?)
    }
}

fn slice0(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let inner = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * inner..end * inner].to_vec())
}

/// Applies `map` over the leading axis in chunks of at most `chunk` items.
pub fn map_chunked(map: &dyn CoeffMap, obs: &Tensor, eps: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = obs.shape()[0];
    let chunk = chunk.max(1);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        parts.push(map.map(&slice0(obs, start, end)?, &slice0(eps, start, end)?)?);
        start = end;
    }
    let mut data = Vec::with_capacity(eps.numel());
    for p in &parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(eps.shape().to_vec(), data)
}

/// Outcome of one distillation run.
#[derive(Clone, Debug)]
pub struct DistillReport {
    pub history: Vec<EpochRecord>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// Number of completed epochs behind the returned parameters.
    pub best_epoch: usize,
    pub final_val_loss: f64,
    pub teacher_fingerprint: u64,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 3;

/// Trains `student` to match `teacher` on fresh `(x_obs, eps)` batches and
/// leaves it holding the best-validation parameters.
///
/// Validation runs before every epoch and after the last one, so
/// `history[0].val_loss` is the loss of the untrained student.
pub fn distill(
    student: &mut DenoiserModel,
    teacher: &dyn CoeffMap,
    teacher_model: &DenoiserModel,
    diffusion: &Diffusion,
    corpus: &MotionCorpus,
    cfg: &DistillRunConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<DistillReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(invalid("distill: corpus is empty"));
    }
    let fingerprint = teacher_model.fingerprint();
    let l = diffusion.retained();
    let val = ValidationSet::build(teacher, corpus, l, cfg.val_pairs(), cfg.seed, cfg.batch)?;
    let opt_cfg = AdamWConfig { lr: cfg.base_lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut opt = AdamW::new(opt_cfg, student.params().tensors());
    let mut tape = Tape::new();
    let mut rng = rng::derive(cfg.seed, 0x5452_4e);
    let per_epoch = cfg.batches_per_epoch();
    let total = cfg.epochs * per_epoch;

    let val_loss = |m: &DenoiserModel| val.loss(&OneStep { model: m, diffusion }, cfg.batch);
    let initial = val_loss(student)?;
    if !initial.is_finite() {
        return Err(Error::NonFinite { op: "distill validation" });
    }
    let mut best = (initial, 0usize, student.params().clone());
    let mut current_val = initial;
    let mut over = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut lr = 0.0;
        for b in 0..per_epoch {
            let size = cfg.batch.min(cfg.samples_per_epoch - b * cfg.batch);
            let idx: Vec<usize> = (0..size).map(|_| rng::below(&mut rng, corpus.len())).collect();
            let obs = corpus.gather_observations(&idx);
            let eps = Tensor::randn([size, l, corpus.channels()], 1.0, &mut rng);
            let target = teacher.map(&obs, &eps)?;
            let c = diffusion.condition(&obs)?;
            lr = step_lr(epoch * per_epoch + b, total, cfg.base_lr, cfg.warmup_frac)?;
            let loss = student.train_step(&mut opt, &mut tape, lr, |m, tape, p| {
                let out = one_step_graph(m, diffusion, tape, p, &eps, &c)?;
                let tv = tape.constant(target.clone())?;
                tape.mse(out, tv)
            });
            sum += match loss {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    return Err(Error::NonFiniteLoss { step: epoch * per_epoch + b, batch_index: b })
                }
                Err(e) => return Err(e),
            };
        }
        let rec = EpochRecord { epoch, train_loss: sum / per_epoch as f64, val_loss: Some(current_val), lr };
        observer(&rec);
        history.push(rec);

        current_val = val_loss(student)?;
        if current_val.is_finite() && current_val < best.0 {
            best = (current_val, epoch + 1, student.params().clone());
        }
        over = if !current_val.is_finite() || current_val > DIVERGENCE_FACTOR * initial { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            log::error!("distillation diverged at epoch {epoch}: val {current_val} vs initial {initial}");
            return Err(Error::Diverged { epoch, loss: current_val, initial });
        }
    }
    if teacher_model.fingerprint() != fingerprint {
        return Err(invalid("teacher parameters changed during distillation"));
    }
    let (best_val, best_epoch, params) = best;
    *student.params_mut() = params;
    Ok(DistillReport {
        history,
        initial_val_loss: initial,
        best_val_loss: best_val,
        best_epoch,
        final_val_loss: current_val,
        teacher_fingerprint: fingerprint,
    })
}

/// Stage 1: exact copy of the teacher, trained against the multi-step
/// sampler. Returns the one-step model and the run report.
pub fn run_stage1(
    teacher: &DenoiserModel,
    diffusion: &Diffusion,
    corpus: &MotionCorpus,
    cfg: &DistillRunConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(DenoiserModel, DistillReport)> {
    if cfg.stage != Stage::One {
        return Err(invalid("run_stage1 called with a stage-2 config"));
    }
    if !teacher.config().is_teacher() {
        return Err(invalid("stage 1 requires a teacher-architecture model"));
    }
    let plan = SamplerPlan::new(diffusion.schedule.len(), cfg.teacher_steps)?;
    let mut student = teacher.clone();
    let target = MultiStepTeacher { model: teacher, diffusion, plan: &plan };
    let report = distill(&mut student, &target, teacher, diffusion, corpus, cfg, observer)?;
    Ok((student, report))
}

/// Stage 2: the given (randomly initialized) student trained against the
/// stage-1 one-step model.
pub fn run_stage2(
    one_step: &DenoiserModel,
    mut student: DenoiserModel,
    diffusion: &Diffusion,
    corpus: &MotionCorpus,
    cfg: &DistillRunConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(DenoiserModel, DistillReport)> {
    if cfg.stage != Stage::Two {
        return Err(invalid("run_stage2 called with a stage-1 config"));
    }
    let target = OneStep { model: one_step, diffusion };
    let report = distill(&mut student, &target, one_step, diffusion, corpus, cfg, observer)?;
    Ok((student, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck_coords;
    use crate::diffusion::make_schedule;
    use crate::models::{ModelConfig, StudentConfig, TeacherConfig};
    use crate::rng::seeded;

    fn setup(h: usize, f: usize, l: usize) -> Diffusion {
        Diffusion::new(make_schedule(50, "cosine").unwrap(), h, f, l).unwrap()
    }

    fn teacher(l: usize, seed: u64) -> DenoiserModel {
        let cfg = TeacherConfig { n_layers: 2, d_model: 16, n_heads: 2, ffn_dim: 32, se_reduction: 4, retained: l, joints: 1 };
        DenoiserModel::new(ModelConfig::Teacher(cfg), &mut seeded(seed)).unwrap()
    }

    fn student(l: usize, seed: u64) -> DenoiserModel {
        DenoiserModel::new(ModelConfig::Student(StudentConfig::new(2, 16, l, 1)), &mut seeded(seed)).unwrap()
    }

    #[test]
    fn loss_values() {
        let mut rng = seeded(1);
        let a = Tensor::randn([2, 3, 3], 1.0, &mut rng);
        assert_eq!(distill_loss(&a, &a).unwrap(), 0.0);
        let z = Tensor::zeros([1, 4, 6]);
        let o = Tensor::full([1, 4, 6], 1.0);
        assert_eq!(distill_loss(&z, &o).unwrap(), 1.0);
        let b = Tensor::randn([2, 3, 3], 1.0, &mut rng);
        let mut naive = 0.0;
        for i in 0..2 {
            for r in 0..3 {
                for c in 0..3 {
                    let j = (i * 3 + r) * 3 + c;
                    naive += (a.data()[j] - b.data()[j]).powi(2);
                }
            }
        }
        assert!((distill_loss(&a, &b).unwrap() - naive / 18.0).abs() < 1e-15);
    }

    #[test]
    fn multi_step_teacher_is_deterministic() {
        let d = setup(3, 3, 6);
        let t = teacher(6, 1);
        let plan = SamplerPlan::new(50, 5).unwrap();
        let map = MultiStepTeacher { model: &t, diffusion: &d, plan: &plan };
        let mut rng = seeded(2);
        let obs = Tensor::randn([2, 3, 3], 1.0, &mut rng);
        let eps = Tensor::randn([2, 6, 3], 1.0, &mut rng);
        let a = teacher_fn(&map, &obs, &eps).unwrap();
        let b = teacher_fn(&map, &obs, &eps).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 6, 3]);
    }

    #[test]
    fn student_output_keeps_observed_rows() {
        let (h, f) = (3, 4);
        let d = setup(h, f, h + f);
        for m in [student(h + f, 3), teacher(h + f, 3)] {
            let mut rng = seeded(4);
            let obs = Tensor::randn([2, h, 3], 1.0, &mut rng);
            let eps = Tensor::randn([2, h + f, 3], 1.0, &mut rng);
            let y = student_fn(&m, &d, &obs, &eps).unwrap();
            let full = d.decode(&y).unwrap();
            for i in 0..2 {
                for t in 0..h {
                    for c in 0..3 {
                        let got = full.data()[(i * (h + f) + t) * 3 + c];
                        let want = obs.data()[(i * h + t) * 3 + c];
                        assert!((got - want).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn distill_loss_gradcheck_wrt_student_params() {
        let d = setup(3, 3, 4);
        let s = student(4, 5);
        let mut rng = seeded(6);
        let obs = Tensor::randn([2, 3, 3], 1.0, &mut rng);
        let eps = Tensor::randn([2, 4, 3], 1.0, &mut rng);
        let target = Tensor::randn([2, 4, 3], 1.0, &mut rng);
        let c = d.condition(&obs).unwrap();
        let flat = Tensor::new([s.param_count()], s.flat_params()).unwrap();
        let coords: Vec<usize> = (0..60).map(|_| rng::below(&mut rng, s.param_count())).collect();
        let err = gradcheck_coords(
            |tape, x| {
                let p = s.params().bind_flat(tape, x)?;
                let out = one_step_graph(&s, &d, tape, &p, &eps, &c)?;
                let tv = tape.constant(target.clone())?;
                tape.mse(out, tv)
            },
            &flat,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    fn corpus(h: usize, f: usize, n: usize) -> MotionCorpus {
        let data = Tensor::randn([n, h + f, 3], 0.5, &mut seeded(9)).into_data();
        MotionCorpus::new(h, f, 3, data, Vec::new()).unwrap()
    }

    fn run_cfg(stage: Stage) -> DistillRunConfig {
        DistillRunConfig {
            stage,
            epochs: 3,
            samples_per_epoch: 32,
            batch: 16,
            base_lr: 1e-3,
            warmup_frac: 0.1,
            weight_decay: 0.0,
            teacher_steps: 4,
            val_fraction: 0.25,
            seed: 11,
        }
    }

    #[test]
    fn stage1_starts_from_exact_copy() {
        let (h, f, l) = (3, 3, 4);
        let d = setup(h, f, l);
        let t = teacher(l, 12);
        let data = corpus(h, f, 20);
        let cfg = run_cfg(Stage::One);
        let plan = SamplerPlan::new(50, cfg.teacher_steps).unwrap();
        let target = MultiStepTeacher { model: &t, diffusion: &d, plan: &plan };
        let val = ValidationSet::build(&target, &data, l, cfg.val_pairs(), cfg.seed, cfg.batch).unwrap();
        let untrained = val.loss(&OneStep { model: &t, diffusion: &d }, cfg.batch).unwrap();
        let mut seen = Vec::new();
        let (one, report) = run_stage1(&t, &d, &data, &cfg, &mut |r| seen.push(r.clone())).unwrap();
        assert_eq!(report.initial_val_loss, untrained);
        assert_eq!(seen[0].val_loss, Some(untrained));
        assert_eq!(one.param_count(), t.param_count());
        assert_eq!(report.teacher_fingerprint, t.fingerprint());
        assert!(report.best_val_loss <= untrained);
    }

    #[test]
    fn stage2_is_bit_reproducible() {
        let (h, f, l) = (3, 3, 4);
        let d = setup(h, f, l);
        let t = teacher(l, 13);
        let data = corpus(h, f, 20);
        let cfg = run_cfg(Stage::Two);
        let run = || run_stage2(&t, student(l, 14), &d, &data, &cfg, &mut |_| {}).unwrap().0.flat_params();
        assert_eq!(run(), run());
    }

    #[test]
    fn stage_tags_are_checked() {
        let d = setup(3, 3, 4);
        let t = teacher(4, 1);
        let data = corpus(3, 3, 4);
        assert!(run_stage1(&t, &d, &data, &run_cfg(Stage::Two), &mut |_| {}).is_err());
        assert!(run_stage2(&t, student(4, 1), &d, &data, &run_cfg(Stage::One), &mut |_| {}).is_err());
    }
}
