//! Gaussian-process Bayesian optimization over a small box of
//! hyperparameters.
//!
//! Points live in the unit cube. Integer dimensions are optimized as
//! continuous values and snapped to their grid afterwards. Parallel
//! suggestions use the kriging believer: pending trials are imputed at the
//! posterior mean before the next acquisition step.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::distill::{CoeffMap, ValidationSet};
use crate::error::{invalid, Error, Result};
use crate::math;
use crate::rng::{self, Rng};

const SQRT5: f64 = 2.236_067_977_499_79;

/// ARD Matérn 5/2 covariance.
pub fn matern52(a: &[f64], b: &[f64], lengthscales: &[f64], variance: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(lengthscales).map(|((x, y), l)| ((x - y) / l) * ((x - y) / l)).sum();
    let r = math::sqrt(r2);
    variance * (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * math::exp(-SQRT5 * r)
}

/// Minimization-form expected improvement.
pub fn expected_improvement(mu: f64, sigma: f64, g_best: f64) -> f64 {
    let gain = g_best - mu;
    if sigma <= 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    (gain * math::normal_cdf(z) + sigma * math::normal_pdf(z)).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpHyper {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    /// Diagonal jitter relative to `variance`; escalated on failure.
    pub jitter: f64,
}

impl GpHyper {
    pub fn isotropic(dim: usize, lengthscale: f64, variance: f64) -> Self {
        Self { variance, lengthscales: vec![lengthscale; dim], jitter: JITTER_START }
    }
}

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-6;

/// Lower Cholesky factor of the row-major `n x n` matrix `a`.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = math::sqrt(s);
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn solve_lower(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

fn solve_upper_t(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Exact GP regression on mean-centered targets with a cached factor.
#[derive(Clone, Debug)]
pub struct Gp {
    x: Vec<Vec<f64>>,
    mean: f64,
    hyper: GpHyper,
    chol: Vec<f64>,
    centered: Vec<f64>,
    alpha: Vec<f64>,
}

impl Gp {
    /// Factorizes `K + jitter * variance * I`, multiplying the jitter by 10
    /// up to `JITTER_MAX` until the factorization succeeds.
    pub fn fit(x: &[Vec<f64>], g: &[f64], hyper: &GpHyper) -> Result<Self> {
        let n = x.len();
        if n == 0 || g.len() != n {
            return Err(invalid("gp: need at least one observation and matching targets"));
        }
        if hyper.lengthscales.iter().any(|l| !(*l > 0.0)) || !(hyper.variance > 0.0) {
            return Err(invalid("gp: lengthscales and variance must be positive"));
        }
        let mean = g.iter().sum::<f64>() / n as f64;
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = matern52(&x[i], &x[j], &hyper.lengthscales, hyper.variance);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        let mut jitter = hyper.jitter.max(JITTER_START);
        loop {
            let mut kj = k.clone();
            for i in 0..n {
                kj[i * n + i] += jitter * hyper.variance;
            }
            if let Some(chol) = cholesky(&kj, n) {
                let centered: Vec<f64> = g.iter().map(|v| v - mean).collect();
                let mut alpha = centered.clone();
                solve_lower(&chol, n, &mut alpha);
                solve_upper_t(&chol, n, &mut alpha);
                let hyper = GpHyper { jitter, ..hyper.clone() };
                return Ok(Self { x: x.to_vec(), mean, hyper, chol, centered, alpha });
            }
            if jitter >= JITTER_MAX {
                return Err(Error::Factorization { jitter });
            }
            jitter = (jitter * 10.0).min(JITTER_MAX);
        }
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Posterior mean and variance at `q`.
    pub fn posterior(&self, q: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let mut k: Vec<f64> =
            self.x.iter().map(|xi| matern52(xi, q, &self.hyper.lengthscales, self.hyper.variance)).collect();
        let mu = self.mean + k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        solve_lower(&self.chol, n, &mut k);
        let mut var = self.hyper.variance - k.iter().map(|v| v * v).sum::<f64>();
        if var < -1e-9 {
            log::warn!("gp posterior variance {var:e} clamped to 0");
        }
        if var < 0.0 {
            var = 0.0;
        }
        (mu, var)
    }

    /// Log marginal likelihood of the centered targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.x.len();
        let fit: f64 = self.alpha.iter().zip(&self.centered).map(|(a, y)| a * y).sum();
        let logdet: f64 = (0..n).map(|i| math::ln(self.chol[i * n + i])).sum();
        -0.5 * fit - logdet - 0.5 * n as f64 * math::ln(2.0 * math::PI)
    }
}

/// Derivative-free simplex minimizer. `f` may return `+inf` for infeasible
/// points.
pub fn nelder_mead(f: &mut dyn FnMut(&[f64]) -> f64, start: &[f64], step: f64, iters: usize) -> (Vec<f64>, f64) {
    let d = start.len();
    let mut simplex: Vec<Vec<f64>> = (0..=d)
        .map(|i| {
            let mut p = start.to_vec();
            if i > 0 {
                p[i - 1] += step;
            }
            p
        })
        .collect();
    let mut vals: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    for _ in 0..iters {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if (vals[d] - vals[0]).abs() < 1e-12 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|p| p[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|j| centroid[j] + t * (simplex[d][j] - centroid[j])).collect() };
        let reflected = along(-1.0);
        let fr = f(&reflected);
        if fr < vals[0] {
            let expanded = along(-2.0);
            let fe = f(&expanded);
            if fe < fr {
                simplex[d] = expanded;
                vals[d] = fe;
            } else {
                simplex[d] = reflected;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            simplex[d] = reflected;
            vals[d] = fr;
        } else {
            let contracted = if fr < vals[d] { along(-0.5) } else { along(0.5) };
            let fc = f(&contracted);
            if fc < vals[d].min(fr) {
                simplex[d] = contracted;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    simplex[i] = (0..d).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    (simplex[best].clone(), vals[best])
}

const LOG_LS: (f64, f64) = (-4.6, 2.3);
const LOG_VAR: (f64, f64) = (-9.0, 4.6);

/// Fits variance and lengthscales by maximizing the marginal likelihood of
/// standardized targets from `restarts` random starts. Falls back to a
/// log-normal prior on the lengthscales if no start yields a finite value.
pub fn fit_hyper(x: &[Vec<f64>], g: &[f64], restarts: usize, rng: &mut Rng) -> Result<GpHyper> {
    let n = g.len();
    if n == 0 || x.len() != n {
        return Err(invalid("fit_hyper: need matching, non-empty data"));
    }
    let dim = x[0].len();
    let mean = g.iter().sum::<f64>() / n as f64;
    let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { math::sqrt(var) } else { 1.0 };
    let z: Vec<f64> = g.iter().map(|v| (v - mean) / scale).collect();
    let starts: Vec<Vec<f64>> = (0..restarts.max(1))
        .map(|_| {
            let mut t = vec![math::ln(0.3) + (math::ln(3.0) - math::ln(0.3)) * rng::uniform(rng)];
            t.extend((0..dim).map(|_| math::ln(0.05) + (math::ln(2.0) - math::ln(0.05)) * rng::uniform(rng)));
            t
        })
        .collect();
    let decode = |t: &[f64]| GpHyper {
        variance: math::exp(t[0].clamp(LOG_VAR.0, LOG_VAR.1)),
        lengthscales: t[1..].iter().map(|v| math::exp(v.clamp(LOG_LS.0, LOG_LS.1))).collect(),
        jitter: JITTER_START,
    };
    for prior in [0.0, 1.0] {
        let mut objective = |t: &[f64]| -> f64 {
            match Gp::fit(x, &z, &decode(t)) {
                Ok(gp) => {
                    let penalty: f64 = t[1..].iter().map(|v| (v - math::ln(0.5)) * (v - math::ln(0.5)) / 2.0).sum();
                    let nll = -gp.log_marginal_likelihood() + prior * penalty;
                    if nll.is_finite() {
                        nll
                    } else {
                        f64::INFINITY
                    }
                }
                Err(_) => f64::INFINITY,
            }
        };
        let mut best: Option<(Vec<f64>, f64)> = None;
        for s in &starts {
            let (t, v) = nelder_mead(&mut objective, s, 0.5, 200);
            if v.is_finite() && best.as_ref().is_none_or(|b| v < b.1) {
                best = Some((t, v));
            }
        }
        if let Some((t, _)) = best {
            let mut h = decode(&t);
            h.variance *= scale * scale;
            return Ok(h);
        }
    }
    Err(Error::Factorization { jitter: JITTER_MAX })
}

/// Scrambled Halton points in `[0, 1)^dim`: a random digit permutation per
/// dimension and digit position.
pub struct Halton {
    perms: Vec<Vec<Vec<u32>>>,
    index: u64,
}

const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

impl Halton {
    pub fn new(dim: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || dim > PRIMES.len() {
            return Err(invalid("halton: dimension out of range"));
        }
        let perms = PRIMES[..dim]
            .iter()
            .map(|&b| {
                let digits = (52.0 / math::ln(b as f64) * math::ln(2.0)) as usize;
                (0..digits)
                    .map(|_| {
                        let mut p: Vec<u32> = (0..b).collect();
                        for i in (1..p.len()).rev() {
                            p.swap(i, rng::below(rng, i + 1));
                        }
                        p
                    })
                    .collect()
            })
            .collect();
        Ok(Self { perms, index: 0 })
    }

    /// Skips the first `n` points.
    pub fn skip(&mut self, n: u64) {
        self.index += n;
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        self.index += 1;
        let i = self.index;
        self.perms
            .iter()
            .zip(PRIMES)
            .map(|(perm, b)| {
                let (mut k, mut f, mut v) = (i, 1.0 / b as f64, 0.0);
                for p in perm {
                    v += f * p[(k % b as u64) as usize] as f64;
                    k /= b as u64;
                    f /= b as f64;
                }
                v
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum Dimension {
    Continuous { name: String, low: f64, high: f64, log: bool },
    Integer { name: String, low: i64, high: i64, step: i64 },
}

impl Dimension {
    pub fn name(&self) -> &str {
        match self {
            Self::Continuous { name, .. } | Self::Integer { name, .. } => name,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Continuous { low, high, log, .. } => {
                if !(low < high) || !low.is_finite() || !high.is_finite() || (*log && !(*low > 0.0)) {
                    return Err(invalid("search space: bad continuous bounds"));
                }
            }
            Self::Integer { low, high, step, .. } => {
                if low > high || *step <= 0 {
                    return Err(invalid("search space: bad integer bounds"));
                }
            }
        }
        Ok(())
    }

    fn grid_len(&self) -> Option<u64> {
        match self {
            Self::Continuous { .. } => None,
            Self::Integer { low, high, step, .. } => Some(((high - low) / step) as u64 + 1),
        }
    }

    fn decode(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Self::Continuous { low, high, log: false, .. } => low + u * (high - low),
            Self::Continuous { low, high, log: true, .. } => math::exp(math::ln(*low) + u * (math::ln(*high) - math::ln(*low))),
            Self::Integer { low, step, .. } => {
                let n = self.grid_len().unwrap_or(1);
                let idx = if n > 1 { math::round(u * (n - 1) as f64) as i64 } else { 0 };
                (low + idx * step) as f64
            }
        }
    }

    fn encode(&self, v: f64) -> f64 {
        match self {
            Self::Continuous { low, high, log: false, .. } => (v - low) / (high - low),
            Self::Continuous { low, high, log: true, .. } => (math::ln(v) - math::ln(*low)) / (math::ln(*high) - math::ln(*low)),
            Self::Integer { low, step, .. } => {
                let n = self.grid_len().unwrap_or(1);
                if n > 1 {
                    ((v as i64 - low) / step) as f64 / (n - 1) as f64
                } else {
                    0.0
                }
            }
        }
    }
}

/// Box of hyperparameters mapped to the unit cube.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

impl SearchSpace {
    /// lr in [1e-4, 1e-3] (log), layers in [6, 12], width in [256, 768]
    /// with step 64.
    pub fn primary() -> Self {
        Self::student(1e-4, 1e-3, 6, 12, 256, 768)
    }

    /// lr in [1e-4, 1.5e-3] (log), layers in [10, 16], width in [384, 896].
    pub fn secondary() -> Self {
        Self::student(1e-4, 1.5e-3, 10, 16, 384, 896)
    }

    pub fn student(lr_lo: f64, lr_hi: f64, layers_lo: i64, layers_hi: i64, dim_lo: i64, dim_hi: i64) -> Self {
        Self {
            dims: vec![
                Dimension::Continuous { name: "lr".into(), low: lr_lo, high: lr_hi, log: true },
                Dimension::Integer { name: "n_layers".into(), low: layers_lo, high: layers_hi, step: 1 },
                Dimension::Integer { name: "d_model".into(), low: dim_lo, high: dim_hi, step: 64 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.len() > PRIMES.len() {
            return Err(invalid("search space: dimension count out of range"));
        }
        self.dims.iter().try_for_each(Dimension::validate)
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    /// Unit-cube point to raw values (integers snapped to their grid).
    pub fn decode(&self, u: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(u).map(|(d, v)| d.decode(*v)).collect()
    }

    pub fn encode(&self, raw: &[f64]) -> Vec<f64> {
        self.dims.iter().zip(raw).map(|(d, v)| d.encode(*v)).collect()
    }

    /// Snaps integer coordinates of a unit-cube point to grid positions.
    pub fn snap(&self, u: &[f64]) -> Vec<f64> {
        let clamped: Vec<f64> = u.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        self.dims
            .iter()
            .zip(&clamped)
            .map(|(d, &v)| match d {
                Dimension::Continuous { .. } => v,
                Dimension::Integer { .. } => d.encode(d.decode(v)),
            })
            .collect()
    }

    fn grid_size(&self) -> Option<u64> {
        self.dims.iter().try_fold(1u64, |acc, d| d.grid_len().and_then(|n| acc.checked_mul(n)))
    }

    fn grid_point(&self, mut idx: u64) -> Vec<f64> {
        self.dims
            .iter()
            .map(|d| {
                let n = d.grid_len().unwrap_or(1);
                let i = idx % n;
                idx /= n;
                if n > 1 {
                    i as f64 / (n - 1) as f64
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrialStatus {
    Pending,
    Done,
    Failed,
}

/// One point of the optimization history, in unit-cube coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub x: Vec<f64>,
    pub g: Option<f64>,
    pub status: TrialStatus,
}

impl Trial {
    pub fn done(x: Vec<f64>, g: f64) -> Self {
        Self { x, g: Some(g), status: TrialStatus::Done }
    }

    pub fn pending(x: Vec<f64>) -> Self {
        Self { x, g: None, status: TrialStatus::Pending }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BoConfig {
    /// Quasi-random points issued before the GP takes over.
    pub n_init: usize,
    pub n_candidates: usize,
    pub n_refine: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self { n_init: 5, n_candidates: 1024, n_refine: 8, restarts: 5, seed: 0 }
    }
}

fn same_point(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
}

/// Next point to evaluate, in unit-cube coordinates.
///
/// The random stream is derived from the config seed and the history length
/// so a resumed study reproduces the same suggestions.
pub fn suggest(space: &SearchSpace, history: &[Trial], cfg: &BoConfig) -> Result<Vec<f64>> {
    space.validate()?;
    let mut rng = rng::derive(cfg.seed, history.len() as u64);
    let taken = |p: &[f64]| history.iter().any(|t| same_point(&t.x, p));
    let done: Vec<&Trial> = history.iter().filter(|t| t.status == TrialStatus::Done && t.g.is_some()).collect();
    if done.len() < cfg.n_init.max(1) {
        let mut seq = Halton::new(space.dim(), &mut rng::derive(cfg.seed, u64::MAX))?;
        seq.skip(history.len() as u64);
        for _ in 0..1000 {
            let p = space.snap(&seq.next_point());
            if !taken(&p) {
                return Ok(p);
            }
        }
        return nearest_free(space, &space.snap(&seq.next_point()), history);
    }

    let x: Vec<Vec<f64>> = done.iter().map(|t| t.x.clone()).collect();
    let g: Vec<f64> = done.iter().filter_map(|t| t.g).collect();
    let hyper = fit_hyper(&x, &g, cfg.restarts, &mut rng)?;
    let g_best = g.iter().copied().fold(f64::INFINITY, f64::min);
    let mut gp = Gp::fit(&x, &g, &hyper)?;
    let pending: Vec<&Trial> = history.iter().filter(|t| t.status == TrialStatus::Pending).collect();
    if !pending.is_empty() {
        let mut fx = x.clone();
        let mut fg = g.clone();
        for t in &pending {
            let (mu, _) = gp.posterior(&t.x);
            fx.push(t.x.clone());
            fg.push(mu);
        }
        gp = Gp::fit(&fx, &fg, &hyper)?;
    }
    let ei = |p: &[f64]| {
        let (mu, var) = gp.posterior(p);
        expected_improvement(mu, math::sqrt(var), g_best)
    };

    let mut seq = Halton::new(space.dim(), &mut rng)?;
    let mut scored: Vec<(Vec<f64>, f64)> = (0..cfg.n_candidates.max(1))
        .map(|_| {
            let p = seq.next_point();
            let v = ei(&p);
            (p, v)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut refined = Vec::new();
    for (start, _) in scored.iter().take(cfg.n_refine) {
        let mut neg = |p: &[f64]| -> f64 {
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return f64::INFINITY;
            }
            -ei(p)
        };
        let (p, v) = nelder_mead(&mut neg, start, 0.05, 100);
        refined.push((p, -v));
    }
    scored.extend(refined);
    let mut snapped: Vec<(Vec<f64>, f64)> = scored
        .into_iter()
        .map(|(p, _)| {
            let s = space.snap(&p);
            let v = ei(&s);
            (s, v)
        })
        .collect();
    snapped.sort_by(|a, b| b.1.total_cmp(&a.1));
    if let Some((p, _)) = snapped.iter().find(|(p, _)| !taken(p)) {
        return Ok(p.clone());
    }
    nearest_free(space, &snapped[0].0, history)
}

/// Closest grid point to `target` that no trial occupies.
fn nearest_free(space: &SearchSpace, target: &[f64], history: &[Trial]) -> Result<Vec<f64>> {
    let taken = |p: &[f64]| history.iter().any(|t| same_point(&t.x, p));
    match space.grid_size() {
        Some(n) if n <= 1 << 22 => (0..n)
            .map(|i| space.grid_point(i))
            .filter(|p| !taken(p))
            .min_by(|a, b| {
                let da: f64 = a.iter().zip(target).map(|(x, y)| (x - y) * (x - y)).sum();
                let db: f64 = b.iter().zip(target).map(|(x, y)| (x - y) * (x - y)).sum();
                da.total_cmp(&db)
            })
            .ok_or(Error::GridExhausted),
        Some(_) => Err(invalid("suggest: integer grid too large to enumerate")),
        None => {
            // Continuous coordinates: nudge until free.
            let mut rng = rng::derive(history.len() as u64, 0x4e55_4447);
            for _ in 0..1000 {
                let p: Vec<f64> = target.iter().map(|v| v + 1e-3 * (2.0 * rng::uniform(&mut rng) - 1.0)).collect();
                let p = space.snap(&p);
                if !taken(&p) {
                    return Ok(p);
                }
            }
            Err(Error::GridExhausted)
        }
    }
}

/// Sequential rounds of `parallel` kriging-believer suggestions, each round
/// evaluated before the next, until `budget` evaluations are done.
pub fn minimize(
    space: &SearchSpace,
    cfg: &BoConfig,
    budget: usize,
    parallel: usize,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> Result<Vec<Trial>> {
    let mut history: Vec<Trial> = Vec::with_capacity(budget);
    while history.len() < budget {
        let start = history.len();
        for _ in 0..parallel.max(1).min(budget - start) {
            let p = suggest(space, &history, cfg)?;
            history.push(Trial::pending(p));
        }
        for t in &mut history[start..] {
            let g = f(&space.decode(&t.x));
            *t = if g.is_finite() {
                Trial::done(core::mem::take(&mut t.x), g)
            } else {
                Trial { x: core::mem::take(&mut t.x), g: None, status: TrialStatus::Failed }
            };
        }
    }
    Ok(history)
}

/// Case-1 objective: mean over held-out pairs of the summed squared error
/// between teacher and student outputs.
pub fn objective_case1(val: &ValidationSet, student: &dyn CoeffMap, chunk: usize) -> Result<f64> {
    if val.is_empty() {
        return Err(invalid("objective: empty validation set"));
    }
    let out = crate::distill::map_chunked(student, &val.obs, &val.eps, chunk)?;
    Ok(val.target.sub(&out)?.sum_sq() / val.len() as f64)
}

/// Mean over held-out pairs of `||T - S|| / ||T||`.
pub fn ratio_err(val: &ValidationSet, student: &dyn CoeffMap, chunk: usize) -> Result<f64> {
    if val.is_empty() {
        return Err(invalid("objective: empty validation set"));
    }
    let out = crate::distill::map_chunked(student, &val.obs, &val.eps, chunk)?;
    let per = val.target.numel() / val.len();
    let mut total = 0.0;
    for (t, s) in val.target.data().chunks(per).zip(out.data().chunks(per)) {
        let num: f64 = t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = t.iter().map(|a| a * a).sum();
        total += if den > 0.0 { math::sqrt(num / den) } else { math::sqrt(num) };
    }
    Ok(total / val.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ObjectiveWeights {
    pub err: f64,
    pub acc: f64,
    pub inf: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { err: 15.0, acc: 15.0, inf: 1.0 }
    }
}

/// Components and value of the case-2 objective.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Case2 {
    pub ratio_err: f64,
    pub ratio_acc: f64,
    pub ratio_inf: f64,
    pub g: f64,
}

/// Relative change of a student quantity against the reference.
pub fn relative(student: f64, reference: f64, what: &str) -> Result<f64> {
    if !(reference > 0.0) {
        return Err(invalid(alloc::format!("objective: reference {what} must be positive")));
    }
    Ok((student - reference) / reference)
}

pub fn combine_case2(ratio_err: f64, ratio_acc: f64, ratio_inf: f64, w: &ObjectiveWeights) -> Case2 {
    Case2 { ratio_err, ratio_acc, ratio_inf, g: w.err * ratio_err + w.acc * ratio_acc + w.inf * ratio_inf }
}

/// Case-2 objective from measured accuracies (best-of-many ADE) and mean
/// latencies of student and reference.
pub fn objective_case2(
    ratio_err: f64,
    acc_student: f64,
    acc_reference: f64,
    time_student: f64,
    time_reference: f64,
    w: &ObjectiveWeights,
) -> Result<Case2> {
    let ratio_acc = relative(acc_student, acc_reference, "accuracy")?;
    let ratio_inf = relative(time_student, time_reference, "time")?;
    Ok(combine_case2(ratio_err, ratio_acc, ratio_inf, w))
}

/// Branin-Hoo on `[-5, 10] x [0, 15]`, global minimum about 0.397887.
pub fn branin(x1: f64, x2: f64) -> f64 {
    let b = 5.1 / (4.0 * math::PI * math::PI);
    let c = 5.0 / math::PI;
    let t = 1.0 / (8.0 * math::PI);
    let a = x2 - b * x1 * x1 + c * x1 - 6.0;
    a * a + 10.0 * (1.0 - t) * math::cos(x1) + 10.0
}
