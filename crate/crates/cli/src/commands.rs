//! Subcommand implementations. Each prints JSON progress records to stdout,
//! one per line, and ends with a `"event": "done"` record.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use motion_distill_core::data::MotionCorpus;
use motion_distill_core::diffusion::{train_teacher, Diffusion, EpochRecord, SamplerPlan};
use motion_distill_core::distill::{run_stage1, run_stage2, MultiStepTeacher, OneStep, Stage, ValidationSet};
use motion_distill_core::metrics::{evaluate, FutureSampler, GroundTruthStub, OneStepSampler, TeacherSampler};
use motion_distill_core::models::{DenoiserModel, ModelConfig};
use motion_distill_core::synth::{generate, SyntheticCorpusSpec};
use motion_distill_core::rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bench::{time_sampler, Sampler};
use crate::checkpoint::{self, Checkpoint, DiffusionSetup, Provenance};
use crate::config::{seeds, sub_seed, ExperimentConfig, Reference};
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::io;
use crate::report::{self, fmt, Table};
use crate::study::{self, Case, Case2Inputs, Study};

#[derive(Parser, Debug)]
#[command(name = "motion-distill", version, about = "Diffusion motion prediction with two-stage one-step distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multimodal corpus (train and test splits).
    GenData(GenDataArgs),
    /// Train the noise-prediction teacher.
    TrainTeacher(TrainTeacherArgs),
    /// Run distillation stage 1 (teacher to one-step) or 2 (one-step to student).
    Distill(DistillArgs),
    /// Bayesian optimization of stage-2 hyperparameters.
    Bayesopt(BayesoptArgs),
    /// Sample futures on the test split and report APD, ADE, FDE, MMADE, MMFDE.
    Eval(EvalArgs),
    /// Time inference of a checkpoint.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct Common {
    /// Override the seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the effective parameters as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    /// TOML corpus spec.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainTeacherArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct DistillArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Teacher checkpoint (stage 1) or stage-1 checkpoint (stage 2).
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct BayesoptArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub case: u8,
    #[arg(long)]
    pub config: PathBuf,
    /// Trial ledger; an existing ledger is resumed.
    #[arg(long)]
    pub ledger: PathBuf,
    /// Concurrent trial evaluations (defaults to the config value).
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Stage-1 checkpoint, the distillation teacher of every trial.
    #[arg(long)]
    pub teacher: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Multi-step teacher checkpoint; needed for case 2 with a multi-step reference.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Total trials (defaults to the config value).
    #[arg(long)]
    pub budget: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long)]
    pub report: PathBuf,
    /// Multimodal ground-truth radius.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Sampler steps for multi-step models (defaults to the checkpoint's).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Replace the model by a sampler that returns the ground truth.
    #[arg(long, hide = true)]
    pub stub_gt: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Futures drawn per timed run.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Sampler steps for multi-step models.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Dataset directory; the first test observation is timed (zeros otherwise).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn emit(v: Value) {
    println!("{v}");
}

fn print_config(command: &str, args: &impl Serialize, extra: Value) {
    let v = json!({ "command": command, "args": args, "config": extra });
    println!("{}", serde_json::to_string_pretty(&v).expect("json serializes"));
}

fn epoch_json(stage: &str, r: &EpochRecord, started: Instant) -> Value {
    json!({
        "event": "epoch",
        "stage": stage,
        "epoch": r.epoch,
        "train_loss": r.train_loss,
        "val_loss": r.val_loss,
        "lr": r.lr,
        "wall_s": started.elapsed().as_secs_f64(),
    })
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainTeacher(a) => train_teacher_cmd(&a),
        Command::Distill(a) => distill_cmd(&a),
        Command::Bayesopt(a) => bayesopt_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Bench(a) => bench_cmd(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let text = io::read_string(&a.spec)?;
    let mut spec: SyntheticCorpusSpec =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", a.spec.display())))?;
    if let Some(s) = a.common.seed {
        spec.seed = s;
    }
    if a.common.print_config {
        print_config("gen-data", a, serde_json::to_value(&spec).expect("spec serializes"));
        return Ok(());
    }
    let corpus = generate(&spec)?;
    let hash = io::short_hash(serde_json::to_string(&spec).expect("spec serializes").as_bytes());
    for (split, c, path) in [
        ("train", &corpus.train, dataset::train_path(&a.out)),
        ("test", &corpus.test, dataset::test_path(&a.out)),
    ] {
        let meta = json!({ "spec": spec, "seed": spec.seed, "config_hash": hash, "split": split, "step_bound": corpus.step_bound });
        dataset::save(&path, c, &meta)?;
        emit(json!({ "event": "wrote", "path": path, "items": c.len() }));
    }
    emit(json!({ "event": "done", "command": "gen-data", "seed": spec.seed, "config_hash": hash }));
    Ok(())
}

fn load_split(dir: &Path, test: bool) -> CliResult<MotionCorpus> {
    let path = if test { dataset::test_path(dir) } else { dataset::train_path(dir) };
    Ok(dataset::load(&path)?.corpus)
}

fn check_geometry(setup: &DiffusionSetup, corpus: &MotionCorpus, model: &ModelConfig) -> CliResult<()> {
    if setup.observed != corpus.observed() || setup.future != corpus.future() || model.channels() != corpus.channels() {
        return Err(CliError::Data(format!(
            "corpus has H={} F={} C={}, checkpoint expects H={} F={} C={}",
            corpus.observed(),
            corpus.future(),
            corpus.channels(),
            setup.observed,
            setup.future,
            model.channels()
        )));
    }
    Ok(())
}

fn train_teacher_cmd(a: &TrainTeacherArgs) -> CliResult<()> {
    let cfg = ExperimentConfig::load(&a.config)?.with_seed(a.common.seed);
    if a.common.print_config {
        print_config("train-teacher", a, serde_json::to_value(&cfg).expect("config serializes"));
        return Ok(());
    }
    let train = load_split(&a.data, false)?;
    let setup = cfg.setup(train.observed(), train.future());
    let diffusion = setup.build()?;
    let mc = ModelConfig::Teacher(cfg.teacher_model(train.joints()));
    let mut model = DenoiserModel::new(mc, &mut rng::seeded(sub_seed(cfg.seed, seeds::TEACHER_INIT)))?;
    let tcfg = cfg.teacher_train(sub_seed(cfg.seed, seeds::TEACHER_TRAIN));
    let started = Instant::now();
    let history = train_teacher(&mut model, &diffusion, &train, &tcfg, &mut |r| emit(epoch_json("teacher", r, started)))?;
    let ck = Checkpoint {
        model,
        diffusion: setup,
        provenance: Provenance {
            role: "teacher".into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            epochs: history.len(),
            final_train_loss: history.last().map(|r| r.train_loss),
            best_val_loss: None,
            best_epoch: None,
            teacher_fingerprint: None,
        },
    };
    checkpoint::save(&a.out, &ck)?;
    emit(json!({ "event": "done", "command": "train-teacher", "out": a.out, "seed": cfg.seed, "config_hash": cfg.hash() }));
    Ok(())
}

fn distill_cmd(a: &DistillArgs) -> CliResult<()> {
    let cfg = ExperimentConfig::load(&a.config)?.with_seed(a.common.seed);
    let stage = if a.stage == 1 { Stage::One } else { Stage::Two };
    if a.common.print_config {
        print_config("distill", a, serde_json::to_value(&cfg).expect("config serializes"));
        return Ok(());
    }
    let teacher = checkpoint::load(&a.teacher)?;
    let want = if stage == Stage::One { "teacher" } else { "stage1" };
    if teacher.provenance.role != want {
        return Err(CliError::Usage(format!(
            "stage {} needs a {want} checkpoint, {} holds a {}",
            a.stage,
            a.teacher.display(),
            teacher.provenance.role
        )));
    }
    let train = load_split(&a.data, false)?;
    check_geometry(&teacher.diffusion, &train, teacher.model.config())?;
    let diffusion = teacher.diffusion.build()?;
    let run_cfg = cfg.distill(stage);
    let started = Instant::now();
    let (model, rep, role) = match stage {
        Stage::One => {
            let (m, r) = run_stage1(&teacher.model, &diffusion, &train, &run_cfg, &mut |r| emit(epoch_json("stage1", r, started)))?;
            (m, r, "stage1")
        }
        Stage::Two => {
            let sc = ModelConfig::Student(cfg.student_model(train.joints()));
            let init = DenoiserModel::new(sc, &mut rng::seeded(sub_seed(cfg.seed, seeds::STUDENT_INIT)))?;
            let (m, r) = run_stage2(&teacher.model, init, &diffusion, &train, &run_cfg, &mut |r| emit(epoch_json("stage2", r, started)))?;
            (m, r, "stage2")
        }
    };
    let ck = Checkpoint {
        model,
        diffusion: teacher.diffusion.clone(),
        provenance: Provenance {
            role: role.into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            epochs: run_cfg.epochs,
            final_train_loss: rep.history.last().map(|r| r.train_loss),
            best_val_loss: Some(rep.best_val_loss),
            best_epoch: Some(rep.best_epoch),
            teacher_fingerprint: Some(rep.teacher_fingerprint),
        },
    };
    checkpoint::save(&a.out, &ck)?;
    emit(json!({
        "event": "done",
        "command": "distill",
        "stage": a.stage,
        "initial_val_loss": rep.initial_val_loss,
        "best_val_loss": rep.best_val_loss,
        "best_epoch": rep.best_epoch,
        "final_val_loss": rep.final_val_loss,
        "out": a.out,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
    }));
    Ok(())
}

fn bayesopt_cmd(a: &BayesoptArgs) -> CliResult<()> {
    let cfg = ExperimentConfig::load(&a.config)?.with_seed(a.common.seed);
    let case = Case::parse(a.case)?;
    if a.common.print_config {
        print_config("bayesopt", a, serde_json::to_value(&cfg).expect("config serializes"));
        return Ok(());
    }
    let b = &cfg.bayesopt;
    let one = checkpoint::load(&a.teacher)?;
    if one.provenance.role != "stage1" {
        return Err(CliError::Usage(format!("--teacher must be a stage-1 checkpoint, {} holds a {}", a.teacher.display(), one.provenance.role)));
    }
    let train = load_split(&a.data, false)?;
    let test = load_split(&a.data, true)?;
    check_geometry(&one.diffusion, &train, one.model.config())?;
    check_geometry(&one.diffusion, &test, one.model.config())?;
    let diffusion = one.diffusion.build()?;
    let one_map = OneStep { model: &one.model, diffusion: &diffusion };
    let val_seed = sub_seed(cfg.seed, seeds::BAYESOPT ^ 0x5641_4c);
    let val = ValidationSet::build(&one_map, &test, diffusion.retained(), b.val_pairs, val_seed, study::CHUNK)?;

    let reference = match (case, b.reference) {
        (Case::Two, Reference::MultiStep) => {
            let path = a.reference.as_ref().ok_or_else(|| {
                CliError::Usage("case 2 with reference = \"multi_step\" needs --reference <teacher checkpoint>".into())
            })?;
            let t = checkpoint::load(path)?;
            if t.provenance.role != "teacher" {
                return Err(CliError::Usage(format!("--reference must be a teacher checkpoint, {} holds a {}", path.display(), t.provenance.role)));
            }
            Some(t)
        }
        _ => None,
    };
    let plan = SamplerPlan::new(diffusion.schedule.len(), cfg.diffusion.teacher_steps)?;
    let multi = reference.as_ref().map(|t| MultiStepTeacher { model: &t.model, diffusion: &diffusion, plan: &plan });
    let eval_seed = sub_seed(cfg.seed, seeds::EVAL);
    let case2 = match case {
        Case::One => None,
        Case::Two => {
            let (map, acc): (&(dyn motion_distill_core::distill::CoeffMap + Sync), f64) = match &multi {
                Some(m) => {
                    let s = TeacherSampler { model: m.model, diffusion: &diffusion, plan: &plan };
                    (m, study::one_step_accuracy(&s, &test, cfg.eval.samples, cfg.eval.tau, eval_seed)?)
                }
                None => {
                    let s = OneStepSampler { model: &one.model, diffusion: &diffusion };
                    (&one_map, study::one_step_accuracy(&s, &test, cfg.eval.samples, cfg.eval.tau, eval_seed)?)
                }
            };
            Some(Case2Inputs {
                reference: map,
                reference_acc: acc,
                weights: b.weights,
                samples: cfg.eval.samples,
                tau: cfg.eval.tau,
                eval_seed,
                bench_repeats: cfg.bench.repeats,
                bench_warmup: cfg.bench.warmup,
                bench_batch: cfg.bench.batch,
            })
        }
    };
    let mut distill = cfg.distill(Stage::Two);
    distill.epochs = b.trial_epochs;
    distill.samples_per_epoch = b.trial_samples_per_epoch;
    let s = Study {
        case,
        space: b.space.resolve()?,
        bo: cfg.bo_config(),
        budget: a.budget.unwrap_or(b.budget),
        parallel: a.parallel.unwrap_or(b.parallel),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        distill,
        student: cfg.student_model(train.joints()),
        one_step: &one.model,
        diffusion: &diffusion,
        train: &train,
        test: &test,
        val,
        case2,
    };
    let records = s.run(&a.ledger, &mut |r| emit(json!({ "event": "trial", "record": r })))?;
    let best = study::best(&records);
    emit(json!({
        "event": "done",
        "command": "bayesopt",
        "trials": records.len(),
        "best": best,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
    }));
    Ok(())
}

/// Multi-step sampling for teachers, one network call otherwise.
fn is_multi_step(ck: &Checkpoint) -> bool {
    ck.provenance.role == "teacher"
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    if a.common.print_config {
        print_config("eval", a, Value::Null);
        return Ok(());
    }
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let bytes = io::read(&a.model)?;
    let model_hash = io::short_hash(&bytes);
    let ck = checkpoint::decode(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", a.model.display())))?;
    let test = load_split(&a.data, true)?;
    check_geometry(&ck.diffusion, &test, ck.model.config())?;
    let diffusion = ck.diffusion.build()?;
    let steps = a.steps.unwrap_or(ck.diffusion.sampler_steps);
    let plan = SamplerPlan::new(diffusion.schedule.len(), steps)?;
    let seed = a.common.seed.unwrap_or_else(|| sub_seed(ck.provenance.seed, seeds::EVAL));
    let teacher = TeacherSampler { model: &ck.model, diffusion: &diffusion, plan: &plan };
    let one = OneStepSampler { model: &ck.model, diffusion: &diffusion };
    let stub = GroundTruthStub { corpus: &test };
    let (sampler, kind): (&dyn FutureSampler, &str) = if a.stub_gt {
        (&stub, "ground_truth_stub")
    } else if is_multi_step(&ck) {
        (&teacher, "multi_step")
    } else {
        (&one, "one_step")
    };
    let (summary, items) = evaluate(sampler, &test, a.samples, a.tau, &mut rng::seeded(seed))?;
    let bmw = [
        ("ADE", summary.ade),
        ("FDE", summary.fde),
        ("MMADE", summary.mmade),
        ("MMFDE", summary.mmfde),
    ];
    let table = Table {
        title: format!("eval {} ({kind}, S={}, tau={})", a.model.display(), a.samples, a.tau),
        notes: vec![
            format!("items={} seed={} model_hash={} config_hash={}", summary.items, seed, model_hash, ck.provenance.config_hash),
            "APD: mean L2 over unordered sample pairs; B/M/W: mean over items of per-item min/median/max over samples".into(),
        ],
        columns: ["metric", "best", "median", "worst"].map(String::from).to_vec(),
        rows: std::iter::once(vec!["APD".into(), fmt(summary.apd), "-".into(), "-".into()])
            .chain(bmw.iter().map(|(n, b)| vec![n.to_string(), fmt(b.best), fmt(b.median), fmt(b.worst)]))
            .collect(),
    };
    let mut records = vec![json!({
        "kind": "eval_summary",
        "model": a.model,
        "model_hash": model_hash,
        "sampler": kind,
        "steps": if kind == "multi_step" { Some(steps) } else { None },
        "seed": seed,
        "config_hash": ck.provenance.config_hash,
        "summary": summary,
    })];
    records.extend(items.iter().enumerate().map(|(i, m)| json!({ "kind": "eval_item", "item": i, "metrics": m })));
    report::write(&a.report, &table, &records)?;
    emit(json!({ "event": "done", "command": "eval", "report": a.report, "summary": summary }));
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> CliResult<()> {
    if a.common.print_config {
        print_config("bench", a, Value::Null);
        return Ok(());
    }
    if a.repeats == 0 || a.batch == 0 || a.steps == 0 {
        return Err(CliError::Usage("--repeats, --batch and --steps must be positive".into()));
    }
    let bytes = io::read(&a.model)?;
    let model_hash = io::short_hash(&bytes);
    let ck = checkpoint::decode(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", a.model.display())))?;
    let diffusion: Diffusion = ck.diffusion.build()?;
    let obs = match &a.data {
        Some(dir) => {
            let test = load_split(dir, true)?;
            check_geometry(&ck.diffusion, &test, ck.model.config())?;
            test.observation(0)
        }
        None => motion_distill_core::Tensor::zeros([ck.diffusion.observed, ck.model.config().channels()]),
    };
    let plan = SamplerPlan::new(diffusion.schedule.len(), a.steps)?;
    let multi = is_multi_step(&ck);
    let sampler = Sampler::new(&ck.model, &diffusion, multi.then_some(&plan));
    let seed = a.common.seed.unwrap_or_else(|| sub_seed(ck.provenance.seed, seeds::BENCH));
    let timing = time_sampler(sampler.map(), &diffusion, &obs, a.batch, a.repeats, a.warmup, seed)?;
    let steps = if multi { a.steps } else { 1 };
    let table = Table {
        title: format!("bench {} ({} network evaluations per sample)", a.model.display(), steps),
        notes: vec![format!(
            "params={} batch={} repeats={} warmup={} model_hash={}",
            ck.model.param_count(),
            a.batch,
            timing.repeats,
            timing.warmup,
            model_hash
        )],
        columns: ["mean_s", "min_s", "std_s"].map(String::from).to_vec(),
        rows: vec![vec![fmt(timing.mean_s), fmt(timing.min_s), fmt(timing.std_s)]],
    };
    let record = json!({
        "kind": "bench",
        "model": a.model,
        "model_hash": model_hash,
        "role": ck.provenance.role,
        "steps": steps,
        "params": ck.model.param_count(),
        "batch": a.batch,
        "seed": seed,
        "config_hash": ck.provenance.config_hash,
        "timing": timing,
    });
    report::write(&a.report, &table, &[record])?;
    emit(json!({ "event": "done", "command": "bench", "report": a.report, "timing": timing }));
    Ok(())
}
