//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and fails if any criterion fails. The smoke pipeline runs twice through
//! the real binary, so this test takes tens of minutes on a single core.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use motion_distill::bench::time_sampler;
use motion_distill_core::bayesopt::{
    branin, combine_case2, expected_improvement, matern52, minimize, objective_case2, ratio_err, BoConfig, Dimension, Gp,
    GpHyper, ObjectiveWeights, SearchSpace,
};
use motion_distill_core::diffusion::{make_schedule, Diffusion, SamplerPlan};
use motion_distill_core::distill::{CoeffMap, MultiStepTeacher, OneStep, ValidationSet};
use motion_distill_core::metrics::{evaluate, item_metrics, OneStepSampler, PredictionSet};
use motion_distill_core::models::{DenoiserModel, ModelConfig, StudentConfig, TeacherConfig};
use motion_distill_core::synth::{generate, SyntheticCorpusSpec};
use motion_distill_core::{gradsuite, rng, Tensor};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_motion-distill");
const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cli(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).current_dir(dir).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn jsonl(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).expect("json line")).collect()
}

fn read_jsonl(path: &Path) -> Result<Vec<Value>, String> {
    std::fs::read_to_string(path).map(|t| jsonl(&t)).map_err(|e| format!("{}: {e}", path.display()))
}

fn done(out: &str) -> Value {
    jsonl(out).pop().expect("done record")
}

fn f(v: &Value) -> f64 {
    v.as_f64().expect("number")
}

/// Removes every key in `keys`, at any depth.
fn strip(v: &mut Value, keys: &[&str]) {
    match v {
        Value::Object(m) => {
            m.retain(|k, _| !keys.contains(&k.as_str()));
            m.values_mut().for_each(|x| strip(x, keys));
        }
        Value::Array(a) => a.iter_mut().for_each(|x| strip(x, keys)),
        _ => {}
    }
}

/// One run of the smoke pipeline in its own directory.
struct Pipeline {
    dir: PathBuf,
    /// Stdout of every command, in order.
    logs: Vec<(String, String)>,
    /// Wall time from gen-data through the three evals.
    core_secs: f64,
}

const MODELS: [&str; 3] = ["t", "s1", "s2"];

fn pipeline(dir: &Path) -> Result<Pipeline, String> {
    let data = format!("{CONFIGS}/smoke_data.toml");
    let cfg = format!("{CONFIGS}/smoke.toml");
    let started = Instant::now();
    let mut logs = Vec::new();
    let mut step = |name: &str, args: &[&str]| -> Result<(), String> {
        logs.push((name.to_string(), cli(dir, args)?));
        Ok(())
    };
    step("gen-data", &["gen-data", "--spec", &data, "--out", "d"])?;
    step("train-teacher", &["train-teacher", "--config", &cfg, "--data", "d", "--out", "t.ck"])?;
    step("stage1", &["distill", "--stage", "1", "--teacher", "t.ck", "--config", &cfg, "--data", "d", "--out", "s1.ck"])?;
    step("stage2", &["distill", "--stage", "2", "--teacher", "s1.ck", "--config", &cfg, "--data", "d", "--out", "s2.ck"])?;
    for m in MODELS {
        let (ck, rep) = (format!("{m}.ck"), format!("eval_{m}.txt"));
        step(&format!("eval-{m}"), &["eval", "--model", &ck, "--data", "d", "--samples", "10", "--report", &rep])?;
    }
    let core_secs = started.elapsed().as_secs_f64();
    for m in MODELS {
        let (ck, rep) = (format!("{m}.ck"), format!("bench_{m}.txt"));
        step(
            &format!("bench-{m}"),
            &["bench", "--model", &ck, "--data", "d", "--repeats", "30", "--warmup", "3", "--steps", "20", "--report", &rep],
        )?;
    }
    step(
        "bayesopt",
        &["bayesopt", "--case", "1", "--config", &cfg, "--ledger", "bo.jsonl", "--parallel", "5", "--teacher", "s1.ck", "--data", "d", "--budget", "10"],
    )?;
    Ok(Pipeline { dir: dir.to_path_buf(), logs, core_secs })
}

impl Pipeline {
    fn log(&self, name: &str) -> &str {
        &self.logs.iter().find(|(n, _)| n == name).expect("logged step").1
    }

    fn eval_summary(&self, m: &str) -> Result<Value, String> {
        Ok(read_jsonl(&self.dir.join(format!("eval_{m}.jsonl")))?[0]["summary"].clone())
    }

    fn bench_mean(&self, m: &str) -> Result<f64, String> {
        Ok(f(&read_jsonl(&self.dir.join(format!("bench_{m}.jsonl")))?[0]["timing"]["mean_s"]))
    }
}

/// Means of consecutive non-overlapping windows of `w` values.
fn window_means(v: &[f64], w: usize) -> Vec<f64> {
    v.chunks_exact(w).map(|c| c.iter().sum::<f64>() / w as f64).collect()
}

fn val_curve(log: &str) -> Vec<f64> {
    jsonl(log).iter().filter(|r| r["event"] == "epoch").filter_map(|r| r["val_loss"].as_f64()).collect()
}

fn criterion1(p: &Pipeline) -> Check {
    let teacher = p.bench_mean("t")?;
    let one_step = p.bench_mean("s1")?;
    let student = p.bench_mean("s2")?;
    let ratio = teacher / one_step;
    let detail = format!(
        "20-step teacher {teacher:.6}s, matched one-step {one_step:.6}s, ratio {ratio:.2}; mlp student {student:.6}s, ratio {:.2}",
        teacher / student
    );
    ensure((10.0..=30.0).contains(&ratio), || detail.clone())?;
    Ok(detail)
}

fn criterion2(p: &Pipeline) -> Check {
    let t = p.eval_summary("t")?;
    let s1 = p.eval_summary("s1")?;
    let s2 = p.eval_summary("s2")?;
    let (ta, sa) = (f(&t["ade"]["best"]), f(&s2["ade"]["best"]));
    let ratio = sa / ta;
    let d1 = done(p.log("stage1"));
    let d2 = done(p.log("stage2"));
    let (i1, v1) = (f(&d1["initial_val_loss"]), f(&d1["final_val_loss"]));
    let (i2, v2) = (f(&d2["initial_val_loss"]), f(&d2["final_val_loss"]));
    let detail = format!(
        "ADE-best teacher {ta:.4} one-step {:.4} student {sa:.4}, ratio {ratio:.3}; stage-1 val {i1:.4} -> {v1:.4}; stage-2 val {i2:.4} -> {v2:.4}; {:.0}s",
        f(&s1["ade"]["best"]),
        p.core_secs
    );
    ensure(ratio <= 1.15, || format!("student/teacher ADE-best above 1.15: {detail}"))?;
    ensure(v1 <= 0.3 * i1, || format!("stage-1 final val above 0.3x initial: {detail}"))?;
    ensure(v2 <= 0.5 * i2, || format!("stage-2 final val above 0.5x untrained: {detail}"))?;
    for stage in ["stage1", "stage2"] {
        let w = window_means(&val_curve(p.log(stage)), 10);
        let rises = w.windows(2).filter(|p| p[1] > p[0] * 1.02).count();
        ensure(rises == 0, || format!("{stage} smoothed val curve rises: {w:?}"))?;
    }
    ensure(p.core_secs < 20.0 * 60.0, || format!("pipeline over 20 min: {detail}"))?;
    Ok(detail)
}

fn criterion3() -> Check {
    let (h, fut, joints) = (4, 8, 3);
    let n = h + fut;
    let c = 3 * joints;
    let d = Diffusion::new(make_schedule(1000, "cosine").map_err(|e| e.to_string())?, h, fut, n).map_err(|e| e.to_string())?;
    let mut r = rng::seeded(31);
    let tcfg = TeacherConfig { n_layers: 2, d_model: 16, n_heads: 2, ffn_dim: 32, se_reduction: 4, retained: n, joints };
    let teacher = DenoiserModel::new(ModelConfig::Teacher(tcfg), &mut r).map_err(|e| e.to_string())?;
    let student = DenoiserModel::new(ModelConfig::Student(StudentConfig::new(2, 16, n, joints)), &mut r).map_err(|e| e.to_string())?;
    let plan = SamplerPlan::new(1000, 10).map_err(|e| e.to_string())?;
    let maps: [(&str, &dyn CoeffMap); 3] = [
        ("multi-step", &MultiStepTeacher { model: &teacher, diffusion: &d, plan: &plan }),
        ("one-step teacher", &OneStep { model: &teacher, diffusion: &d }),
        ("one-step student", &OneStep { model: &student, diffusion: &d }),
    ];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for round in 0..4 {
        let obs = Tensor::randn([16, h, c], 1.0 + round as f64, &mut r);
        let eps = Tensor::randn([16, n, c], 1.0, &mut r);
        for (name, map) in maps {
            let full = d.decode(&map.map(&obs, &eps).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            for b in 0..16 {
                let rows = &full.data()[b * n * c..(b * n + h) * c];
                let want = &obs.data()[b * h * c..(b + 1) * h * c];
                let err = rows.iter().zip(want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                ensure(err <= 1e-8, || format!("{name}: observed rows off by {err:e}"))?;
                worst = worst.max(err);
                count += 1;
            }
        }
    }
    Ok(format!("{count} samples at L=N, max deviation {worst:.2e}"))
}

/// Gauss-Jordan inverse with partial pivoting.
fn dense_inverse(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs())).unwrap();
        for k in 0..n {
            m.swap(col * n + k, piv * n + k);
            inv.swap(col * n + k, piv * n + k);
        }
        let p = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for row in 0..n {
            if row != col {
                let s = m[row * n + col];
                for k in 0..n {
                    m[row * n + k] -= s * m[col * n + k];
                    inv[row * n + k] -= s * inv[col * n + k];
                }
            }
        }
    }
    inv
}

/// Posterior by explicit inversion of the jittered Gram matrix.
fn gp_oracle(x: &[Vec<f64>], g: &[f64], h: &GpHyper, q: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mean = g.iter().sum::<f64>() / n as f64;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = matern52(&x[i], &x[j], &h.lengthscales, h.variance);
        }
        k[i * n + i] += h.jitter * h.variance;
    }
    let inv = dense_inverse(&k, n);
    let kq: Vec<f64> = x.iter().map(|xi| matern52(xi, q, &h.lengthscales, h.variance)).collect();
    let (mut mu, mut var) = (mean, h.variance);
    for i in 0..n {
        for j in 0..n {
            mu += kq[i] * inv[i * n + j] * (g[j] - mean);
            var -= kq[i] * inv[i * n + j] * kq[j];
        }
    }
    (mu, var.max(0.0))
}

fn criterion4() -> Check {
    let mut r = rng::seeded(41);
    let hypers = [
        GpHyper::isotropic(3, 0.35, 1.7),
        GpHyper { variance: 0.6, lengthscales: vec![0.2, 0.5, 0.9], jitter: 1e-10 },
    ];
    let (mut dm, mut dv, mut interp): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for hyper in &hypers {
        let x: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng::uniform(&mut r)).collect()).collect();
        let g: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin() + p[1] * p[2] + 0.1 * rng::normal(&mut r)).collect();
        let gp = Gp::fit(&x, &g, hyper).map_err(|e| e.to_string())?;
        for _ in 0..1000 {
            let q: Vec<f64> = (0..3).map(|_| rng::uniform(&mut r)).collect();
            let (mu, var) = gp.posterior(&q);
            let (omu, ovar) = gp_oracle(&x, &g, gp.hyper(), &q);
            dm = dm.max((mu - omu).abs());
            dv = dv.max((var - ovar).abs());
        }
        for (p, gi) in x.iter().zip(&g) {
            let (mu, var) = gp.posterior(p);
            interp = interp.max((mu - gi).abs()).max(var);
        }
    }
    let detail = format!("2x1000 queries: max |dmu| {dm:.2e}, |dvar| {dv:.2e}; interpolation {interp:.2e}");
    ensure(dm <= 1e-8 && dv <= 1e-8 && interp <= 1e-6, || detail.clone())?;
    Ok(detail)
}

fn criterion5() -> Check {
    let mut r = rng::seeded(51);
    let g_best = 0.7;
    let mut worst: f64 = 0.0;
    for z in [-0.5, 0.0, 0.5, 1.0, 2.0] {
        for sigma in [0.1, 0.5, 1.0, 3.0] {
            let mu = g_best - z * sigma;
            let draws = 1_000_000;
            let mc = (0..draws).map(|_| (g_best - (mu + sigma * rng::normal(&mut r))).max(0.0)).sum::<f64>() / draws as f64;
            let ei = expected_improvement(mu, sigma, g_best);
            let rel = (ei - mc).abs() / mc;
            ensure(rel <= 0.01, || format!("z={z} sigma={sigma}: closed form {ei} vs mc {mc}"))?;
            worst = worst.max(rel);
        }
    }
    for (mu, gb) in [(0.3, 0.7), (0.7, 0.3), (1.25, 1.25), (-2.0, 5.5)] {
        let ei = expected_improvement(mu, 0.0, gb);
        ensure(ei == (gb - mu).max(0.0), || format!("EI(sigma=0) at mu={mu} g_best={gb} is {ei}"))?;
    }
    Ok(format!("20-point grid, max relative gap {:.3}%; sigma=0 exact", 100.0 * worst))
}

fn criterion6() -> Check {
    let space = SearchSpace {
        dims: vec![
            Dimension::Continuous { name: "x1".into(), low: -5.0, high: 10.0, log: false },
            Dimension::Continuous { name: "x2".into(), low: 0.0, high: 15.0, log: false },
        ],
    };
    let grid = 1000;
    let mut grid_best = f64::INFINITY;
    for i in 0..grid {
        for j in 0..grid {
            let x1 = -5.0 + 15.0 * i as f64 / (grid - 1) as f64;
            let x2 = 15.0 * j as f64 / (grid - 1) as f64;
            grid_best = grid_best.min(branin(x1, x2));
        }
    }
    let mut bests = Vec::new();
    for seed in 0..10 {
        let cfg = BoConfig { seed, ..BoConfig::default() };
        let trials = minimize(&space, &cfg, 40, 5, &mut |v| branin(v[0], v[1])).map_err(|e| e.to_string())?;
        ensure(trials.len() == 40, || format!("seed {seed}: {} evaluations", trials.len()))?;
        bests.push(trials.iter().filter_map(|t| t.g).fold(f64::INFINITY, f64::min));
    }
    let hits = bests.iter().filter(|b| **b - grid_best <= 0.05).count();
    let detail = format!("grid optimum {grid_best:.6}; {hits}/10 runs within 0.05; bests {bests:.4?}");
    ensure(hits >= 8, || detail.clone())?;
    Ok(detail)
}

/// Lower median by rank counting.
fn naive_bmw(e: &[f64]) -> [f64; 3] {
    let k = (e.len() - 1) / 2;
    let median = *e
        .iter()
        .find(|&&x| {
            let below = e.iter().filter(|&&y| y < x).count();
            let at_most = e.iter().filter(|&&y| y <= x).count();
            below <= k && k < at_most
        })
        .unwrap();
    let best = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let worst = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    [best, median, worst]
}

fn frame_dist(a: &[f64], b: &[f64], fr: usize, c: usize) -> f64 {
    let mut s = 0.0;
    for ch in 0..c {
        let d = a[fr * c + ch] - b[fr * c + ch];
        s += d * d;
    }
    s.sqrt()
}

fn criterion7() -> Check {
    let mut r = rng::seeded(71);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-10;
    for set_idx in 0..100 {
        let s = 1 + rng::below(&mut r, 8);
        let fr = 1 + rng::below(&mut r, 6);
        let c = 3 * (1 + rng::below(&mut r, 2));
        let samples = Tensor::randn([s, fr, c], 1.0, &mut r);
        let gt = Tensor::randn([fr, c], 1.0, &mut r);
        let obs = Tensor::randn([2, c], 1.0, &mut r);
        let mut futures = vec![gt.clone()];
        for _ in 0..rng::below(&mut r, 4) {
            futures.push(Tensor::randn([fr, c], 1.0, &mut r));
        }
        let set = PredictionSet::new(samples.clone(), gt.clone(), obs).map_err(|e| e.to_string())?;
        let m = item_metrics(&set, &futures).map_err(|e| e.to_string())?;

        let sample = |i: usize| &samples.data()[i * fr * c..(i + 1) * fr * c];
        let mut pair_sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..s {
            for j in 0..s {
                if i < j {
                    let d: f64 = sample(i).iter().zip(sample(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    pair_sum += d.sqrt();
                    pairs += 1;
                }
            }
        }
        let apd = if pairs == 0 { 0.0 } else { pair_sum / pairs as f64 };
        let ade_to = |i: usize, g: &Tensor| (0..fr).map(|t| frame_dist(sample(i), g.data(), t, c)).sum::<f64>() / fr as f64;
        let fde_to = |i: usize, g: &Tensor| frame_dist(sample(i), g.data(), fr - 1, c);
        let ade: Vec<f64> = (0..s).map(|i| ade_to(i, &gt)).collect();
        let fde: Vec<f64> = (0..s).map(|i| fde_to(i, &gt)).collect();
        let mmade: Vec<f64> = (0..s).map(|i| futures.iter().map(|g| ade_to(i, g)).fold(f64::INFINITY, f64::min)).collect();
        let mmfde: Vec<f64> = (0..s).map(|i| futures.iter().map(|g| fde_to(i, g)).fold(f64::INFINITY, f64::min)).collect();

        ensure(close(m.apd, apd), || format!("set {set_idx}: apd {} vs {apd}", m.apd))?;
        for (name, got, errs) in [("ade", m.ade, &ade), ("fde", m.fde, &fde), ("mmade", m.mmade, &mmade), ("mmfde", m.mmfde, &mmfde)] {
            let [b, md, w] = naive_bmw(errs);
            ensure(close(got.best, b) && close(got.median, md) && close(got.worst, w), || {
                format!("set {set_idx} {name}: {got:?} vs [{b}, {md}, {w}]")
            })?;
            ensure(got.best <= got.median && got.median <= got.worst, || format!("set {set_idx} {name}: order {got:?}"))?;
        }
        ensure(m.mmade.best <= m.ade.best, || format!("set {set_idx}: mmade-B {} > ade-B {}", m.mmade.best, m.ade.best))?;
    }
    Ok("100 random sets agree within 1e-10; orderings hold".into())
}

fn criterion8() -> Check {
    let w = ObjectiveWeights::default();
    ensure(w.err == 15.0 && w.acc == 15.0 && w.inf == 1.0, || format!("default weights {w:?}"))?;
    let mut r = rng::seeded(81);
    for _ in 0..200 {
        let (e, a, i) = (rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r));
        let g = combine_case2(e, a, i, &w).g;
        ensure(g == 15.0 * e + 15.0 * a + 1.0 * i, || format!("g({e}, {a}, {i}) = {g}"))?;
    }
    let hand = combine_case2(0.1, 0.02, -0.9, &w).g;
    ensure((hand - 0.9).abs() < 1e-12, || format!("g(0.1, 0.02, -0.9) = {hand}"))?;
    let halved = objective_case2(0.0, 2.0, 2.0, 0.5, 1.0, &w).map_err(|e| e.to_string())?;
    ensure(halved.g == -0.5, || format!("half-time student g = {}", halved.g))?;

    // A model scored against itself: zero error and accuracy terms, timing
    // term only as large as run-to-run noise.
    let spec = SyntheticCorpusSpec {
        joints: 3,
        observed: 4,
        future: 8,
        n_train: 60,
        n_test: 12,
        n_modes: 3,
        n_families: 4,
        band_limit: 3,
        noise_floor: 0.005,
        seed: 82,
    };
    let corpus = generate(&spec).map_err(|e| e.to_string())?;
    let d = Diffusion::new(make_schedule(1000, "cosine").map_err(|e| e.to_string())?, 4, 8, 6).map_err(|e| e.to_string())?;
    let model = DenoiserModel::new(ModelConfig::Student(StudentConfig::new(2, 32, 6, 3)), &mut rng::seeded(83)).map_err(|e| e.to_string())?;
    let map = OneStep { model: &model, diffusion: &d };
    let val = ValidationSet::build(&map, &corpus.train, 6, 32, 84, 64).map_err(|e| e.to_string())?;
    let err = ratio_err(&val, &map, 64).map_err(|e| e.to_string())?;
    let sampler = OneStepSampler { model: &model, diffusion: &d };
    let acc = |seed| evaluate(&sampler, &corpus.test, 10, 0.5, &mut rng::seeded(seed)).map(|(s, _)| s.ade.best);
    let (acc_a, acc_b) = (acc(85).map_err(|e| e.to_string())?, acc(85).map_err(|e| e.to_string())?);
    let obs = corpus.test.observation(0);
    let time = || time_sampler(&map, &d, &obs, 16, 20, 3, 86).map_err(|e| e.to_string());
    let (ta, tb) = (time()?, time()?);
    let case = objective_case2(err, acc_a, acc_b, ta.mean_s, tb.mean_s, &w).map_err(|e| e.to_string())?;
    let noise = 3.0 * (ta.std_s / ta.mean_s + tb.std_s / tb.mean_s) + 0.05;
    let detail = format!(
        "hand-set g exact; identical model: err {:.1e} acc {:.1e} inf {:.4} g {:.4} (noise bound {noise:.3})",
        case.ratio_err, case.ratio_acc, case.ratio_inf, case.g
    );
    ensure(case.ratio_err == 0.0 && case.ratio_acc == 0.0, || detail.clone())?;
    ensure(case.g.abs() <= noise, || detail.clone())?;
    Ok(detail)
}

fn criterion9() -> Check {
    let reports = gradsuite::run(100, 91).map_err(|e| e.to_string())?;
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    for want in ["loss/teacher", "loss/distill", "layer/"] {
        ensure(names.iter().any(|n| n.contains(want)), || format!("no {want} case in {names:?}"))?;
    }
    let worst = reports.iter().max_by(|a, b| a.max_err.total_cmp(&b.max_err)).unwrap();
    let failing: Vec<String> =
        reports.iter().filter(|r| !(r.max_err < 1e-4) || r.trials < 100).map(|r| format!("{} {:.2e}", r.name, r.max_err)).collect();
    ensure(failing.is_empty(), || format!("failing cases: {failing:?}"))?;
    Ok(format!("{} cases x 100 trials, worst {} at {:.2e}", reports.len(), worst.name, worst.max_err))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion10(a: &Pipeline, b: &Pipeline) -> Check {
    let files = files_under(&a.dir);
    ensure(files == files_under(&b.dir), || "runs wrote different file sets".into())?;
    let timing_keys = ["wall_s", "wall_seconds", "timing"];
    let mut compared = 0;
    for rel in &files {
        let (pa, pb) = (a.dir.join(rel), b.dir.join(rel));
        let name = rel.to_string_lossy();
        let timed = name.starts_with("bench_") || name == "bo.jsonl";
        if timed && name.ends_with(".txt") {
            // Rendered bench tables are timing values only.
            continue;
        }
        if timed {
            let (mut ja, mut jb) = (read_jsonl(&pa)?, read_jsonl(&pb)?);
            ja.iter_mut().chain(jb.iter_mut()).for_each(|v| strip(v, &timing_keys));
            ensure(ja == jb, || format!("{name} differs outside timing fields"))?;
        } else {
            ensure(std::fs::read(&pa).ok() == std::fs::read(&pb).ok(), || format!("{name} differs"))?;
        }
        compared += 1;
    }
    for ((name, la), (_, lb)) in a.logs.iter().zip(&b.logs) {
        let (mut ja, mut jb) = (jsonl(la), jsonl(lb));
        ja.iter_mut().chain(jb.iter_mut()).for_each(|v| strip(v, &timing_keys));
        ensure(ja == jb, || format!("{name} progress records differ"))?;
    }
    Ok(format!("{compared} files and {} progress logs identical", a.logs.len()))
}

fn check(id: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = started.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // Written to the handle directly so the line survives libtest capture.
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id}: {tag} {name} ({secs:.1}s): {detail}").expect("stdout");
    out.flush().expect("stdout");
    outcome.is_ok()
}

#[test]
fn acceptance() {
    let mut passed = Vec::new();
    passed.push(check(3, "inpainting identity", criterion3));
    passed.push(check(4, "gp posterior", criterion4));
    passed.push(check(5, "expected improvement", criterion5));
    passed.push(check(7, "metric oracles", criterion7));
    passed.push(check(8, "objective composition", criterion8));
    passed.push(check(9, "gradient integrity", criterion9));
    passed.push(check(6, "bo effectiveness", criterion6));

    let root = tempfile::tempdir().expect("temp dir");
    let (da, db) = (root.path().join("a"), root.path().join("b"));
    std::fs::create_dir_all(&da).unwrap();
    std::fs::create_dir_all(&db).unwrap();
    let first = pipeline(&da);
    let runs = first.as_ref().map_err(String::clone);
    passed.push(check(1, "speedup", || criterion1(runs.clone()?)));
    passed.push(check(2, "distillation fidelity", || criterion2(runs.clone()?)));
    passed.push(check(10, "determinism", || {
        let second = pipeline(&db)?;
        criterion10(runs.clone()?, &second)
    }));

    let failed = passed.iter().filter(|p| !**p).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
