//! Bayesian-optimization study over stage-2 hyperparameters, persisted as an
//! append-only JSONL ledger so an interrupted study resumes where it stopped.
//!
//! Each round suggests up to `parallel` points (kriging believer), appends
//! their `pending` records, trains them on worker threads, then appends the
//! outcomes in id order. Latency measurements for case 2 run serially after
//! the workers finish so they do not compete for the CPU.

use std::path::Path;
use std::time::Instant;

use motion_distill_core::bayesopt::{self, BoConfig, Case2, ObjectiveWeights, SearchSpace, Trial, TrialStatus};
use motion_distill_core::diffusion::Diffusion;
use motion_distill_core::distill::{run_stage2, CoeffMap, DistillRunConfig, OneStep, ValidationSet};
use motion_distill_core::metrics::{evaluate, FutureSampler, OneStepSampler};
use motion_distill_core::models::{DenoiserModel, ModelConfig, StudentConfig};
use motion_distill_core::data::MotionCorpus;
use motion_distill_core::rng;
use serde::{Deserialize, Serialize};

use crate::bench::time_sampler;
use crate::error::{CliError, CliResult};
use crate::io;

/// Pairs mapped per forward call when scoring.
pub const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerRecord {
    pub id: usize,
    pub round: usize,
    pub case: u8,
    pub status: TrialStatus,
    /// Unit-cube coordinates.
    pub x: Vec<f64>,
    pub lr: f64,
    pub n_layers: usize,
    pub d_model: usize,
    pub g: Option<f64>,
    pub case2: Option<Case2>,
    pub val_loss: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub wall_seconds: Option<f64>,
    pub error: Option<String>,
}

/// Latest state of every trial, ordered by id.
pub fn load_ledger(path: &Path) -> CliResult<Vec<LedgerRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut latest: Vec<LedgerRecord> = Vec::new();
    for (n, line) in io::read_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: LedgerRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        match rec.id.cmp(&latest.len()) {
            std::cmp::Ordering::Less => {
                let id = rec.id;
                latest[id] = rec;
            }
            std::cmp::Ordering::Equal => latest.push(rec),
            std::cmp::Ordering::Greater => {
                return Err(CliError::Data(format!("{}:{}: trial id {} skips ahead", path.display(), n + 1, rec.id)))
            }
        }
    }
    Ok(latest)
}

fn to_trial(r: &LedgerRecord) -> Trial {
    Trial { x: r.x.clone(), g: r.g, status: r.status }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    One,
    Two,
}

impl Case {
    pub fn parse(v: u8) -> CliResult<Self> {
        match v {
            1 => Ok(Self::One),
            2 => Ok(Self::Two),
            _ => Err(CliError::Usage(format!("--case must be 1 or 2, got {v}"))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Self::One => 1,
            Self::Two => 2,
        }
    }
}

/// Everything a trial needs; shared read-only across worker threads.
pub struct Study<'a> {
    pub case: Case,
    pub space: SearchSpace,
    pub bo: BoConfig,
    pub budget: usize,
    pub parallel: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Stage-2 template; epochs, samples, lr and seed are set per trial.
    pub distill: DistillRunConfig,
    pub student: StudentConfig,
    pub one_step: &'a DenoiserModel,
    pub diffusion: &'a Diffusion,
    pub train: &'a MotionCorpus,
    pub test: &'a MotionCorpus,
    pub val: ValidationSet,
    pub case2: Option<Case2Inputs<'a>>,
}

/// Reference quantities for the case-2 objective.
pub struct Case2Inputs<'a> {
    pub reference: &'a (dyn CoeffMap + Sync),
    pub reference_acc: f64,
    pub weights: ObjectiveWeights,
    pub samples: usize,
    pub tau: f64,
    pub eval_seed: u64,
    pub bench_repeats: usize,
    pub bench_warmup: usize,
    pub bench_batch: usize,
}

/// Best-of-many ADE of a one-step model on the test split.
pub fn one_step_accuracy(sampler: &dyn FutureSampler, test: &MotionCorpus, samples: usize, tau: f64, seed: u64) -> CliResult<f64> {
    Ok(evaluate(sampler, test, samples, tau, &mut rng::seeded(seed))?.0.ade.best)
}

struct Trained {
    model: DenoiserModel,
    val_loss: f64,
    seconds: f64,
}

impl Study<'_> {
    fn trial_seed(&self, id: usize) -> u64 {
        rng::mix(self.seed ^ rng::mix(0x5452_4941_4c00 + id as u64))
    }

    fn decode(&self, x: &[f64]) -> (f64, usize, usize) {
        let raw = self.space.decode(x);
        (raw[0], raw[1].round() as usize, raw[2].round() as usize)
    }

    fn train_trial(&self, id: usize, x: &[f64]) -> CliResult<Trained> {
        let start = Instant::now();
        let (lr, n_layers, d_model) = self.decode(x);
        let seed = self.trial_seed(id);
        let cfg = StudentConfig { n_layers, d_model, ..self.student.clone() };
        let model = DenoiserModel::new(ModelConfig::Student(cfg), &mut rng::derive(seed, 1))?;
        let run = DistillRunConfig { base_lr: lr, seed, ..self.distill.clone() };
        let (model, _) = run_stage2(self.one_step, model, self.diffusion, self.train, &run, &mut |_| {})?;
        let val_loss = bayesopt::objective_case1(&self.val, &OneStep { model: &model, diffusion: self.diffusion }, CHUNK)?;
        Ok(Trained { model, val_loss, seconds: start.elapsed().as_secs_f64() })
    }

    fn score(&self, t: &Trained) -> CliResult<(f64, Option<Case2>)> {
        let Some(c2) = &self.case2 else {
            return Ok((t.val_loss, None));
        };
        let map = OneStep { model: &t.model, diffusion: self.diffusion };
        let ratio_err = bayesopt::ratio_err(&self.val, &map, CHUNK)?;
        let sampler = OneStepSampler { model: &t.model, diffusion: self.diffusion };
        let acc = one_step_accuracy(&sampler, self.test, c2.samples, c2.tau, c2.eval_seed)?;
        let obs = self.test.observation(0);
        let time = |m: &dyn CoeffMap| {
            time_sampler(m, self.diffusion, &obs, c2.bench_batch, c2.bench_repeats, c2.bench_warmup, c2.eval_seed)
        };
        let t_ref = time(c2.reference)?.mean_s;
        let t_student = time(&map)?.mean_s;
        let parts = bayesopt::objective_case2(ratio_err, acc, c2.reference_acc, t_student, t_ref, &c2.weights)?;
        Ok((parts.g, Some(parts)))
    }

    fn record(&self, id: usize, round: usize, x: &[f64], status: TrialStatus) -> LedgerRecord {
        let (lr, n_layers, d_model) = self.decode(x);
        LedgerRecord {
            id,
            round,
            case: self.case.tag(),
            status,
            x: x.to_vec(),
            lr,
            n_layers,
            d_model,
            g: None,
            case2: None,
            val_loss: None,
            seed: self.trial_seed(id),
            config_hash: self.config_hash.clone(),
            wall_seconds: None,
            error: None,
        }
    }

    /// Runs (or resumes) the study against `ledger`; `progress` sees every
    /// record as it is written.
    pub fn run(&self, ledger: &Path, progress: &mut dyn FnMut(&LedgerRecord)) -> CliResult<Vec<LedgerRecord>> {
        let mut records = load_ledger(ledger)?;
        for r in &records {
            if r.case != self.case.tag() || r.config_hash != self.config_hash {
                return Err(CliError::Usage(format!(
                    "{}: ledger was written by case {} with config {}; this run is case {} with config {}",
                    ledger.display(),
                    r.case,
                    r.config_hash,
                    self.case.tag(),
                    self.config_hash
                )));
            }
        }
        let parallel = self.parallel.max(1);
        loop {
            let mut batch: Vec<usize> =
                records.iter().filter(|r| r.status == TrialStatus::Pending).map(|r| r.id).take(parallel).collect();
            let round = records.iter().map(|r| r.round + 1).max().unwrap_or(0);
            let mut fresh = Vec::new();
            while batch.len() < parallel && records.len() < self.budget {
                let history: Vec<Trial> = records.iter().map(to_trial).collect();
                let x = bayesopt::suggest(&self.space, &history, &self.bo)?;
                let rec = self.record(records.len(), round, &x, TrialStatus::Pending);
                batch.push(rec.id);
                fresh.push(rec.clone());
                records.push(rec);
            }
            if batch.is_empty() {
                break;
            }
            io::append_lines(ledger, &fresh.iter().map(json_line).collect::<Vec<_>>())?;
            fresh.iter().for_each(&mut *progress);

            let trained: Vec<CliResult<Trained>> = std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|&id| {
                        let x = records[id].x.clone();
                        s.spawn(move || self.train_trial(id, &x))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err(CliError::Numeric("trial worker panicked".into())))).collect()
            });

            let mut done = Vec::with_capacity(batch.len());
            for (&id, result) in batch.iter().zip(trained) {
                let mut rec = records[id].clone();
                match result.and_then(|t| self.score(&t).map(|s| (t, s))) {
                    Ok((t, (g, parts))) if g.is_finite() => {
                        rec.status = TrialStatus::Done;
                        rec.g = Some(g);
                        rec.case2 = parts;
                        rec.val_loss = Some(t.val_loss);
                        rec.wall_seconds = Some(t.seconds);
                    }
                    Ok((t, (g, _))) => {
                        rec.status = TrialStatus::Failed;
                        rec.wall_seconds = Some(t.seconds);
                        rec.error = Some(format!("non-finite objective {g}"));
                    }
                    Err(e) => {
                        log::warn!("trial {id} failed: {e}");
                        rec.status = TrialStatus::Failed;
                        rec.error = Some(e.to_string());
                    }
                }
                records[id] = rec.clone();
                done.push(rec);
            }
            io::append_lines(ledger, &done.iter().map(json_line).collect::<Vec<_>>())?;
            done.iter().for_each(&mut *progress);
        }
        Ok(records)
    }
}

pub fn json_line(r: &LedgerRecord) -> String {
    serde_json::to_string(r).expect("ledger record serializes")
}

/// Lowest-objective finished trial.
pub fn best(records: &[LedgerRecord]) -> Option<&LedgerRecord> {
    records
        .iter()
        .filter(|r| r.status == TrialStatus::Done)
        .min_by(|a, b| a.g.unwrap_or(f64::INFINITY).total_cmp(&b.g.unwrap_or(f64::INFINITY)))
}
