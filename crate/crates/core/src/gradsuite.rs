//! Randomized finite-difference checks of every differentiable op, every
//! layer type and both training losses.
//!
//! Each case draws fresh shapes and values per trial and reduces the output
//! to a scalar with a random weighting, so no gradient is trivially zero.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{gradcheck_coords, Tape, Var};
use crate::diffusion::{make_schedule, teacher_loss, Diffusion};
use crate::distill::one_step_graph;
use crate::error::Result;
use crate::models::{
    Attention, Builder, DenoiserModel, Init, ModelConfig, Mlp, ParamStore, SeBlock, StudentConfig, TeacherConfig,
};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Worst relative error of one case over all trials.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub trials: usize,
    pub max_err: f64,
}

const H: f64 = 1e-5;
const COORDS: usize = 40;

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng::below(rng, hi - lo + 1)
}

fn coords(n: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= COORDS {
        (0..n).collect()
    } else {
        (0..COORDS).map(|_| rng::below(rng, n)).collect()
    }
}

/// `sum(w * y)` for a fixed random `w` shaped like `y`.
fn project(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone())?;
    let m = tape.mul(y, wv)?;
    tape.sum(m)
}

fn check_input(x: &Tensor, rng: &mut Rng, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut probe = Tape::new();
    let v = probe.constant(x.clone())?;
    let out = f(&mut probe, v)?;
    let shape = probe.value(out).shape().to_vec();
    let w = Tensor::randn(shape, 1.0, rng);
    let c = coords(x.numel(), rng);
    gradcheck_coords(|tape, v| { let y = f(tape, v)?; project(tape, y, &w) }, x, H, &c)
}

/// Checks a layer with respect to both its input and its parameters.
fn check_layer(store: &ParamStore, x: &Tensor, rng: &mut Rng, f: impl Fn(&mut Tape, &[Var], Var) -> Result<Var>) -> Result<f64> {
    let wrt_x = check_input(x, rng, |tape, v| {
        let p = store.bind(tape, false)?;
        f(tape, &p, v)
    })?;
    let flat = Tensor::new([store.count()], store.flat())?;
    let xc = x.clone();
    let wrt_p = check_input(&flat, rng, |tape, v| {
        let p = store.bind_flat(tape, v)?;
        let xv = tape.constant(xc.clone())?;
        f(tape, &p, xv)
    })?;
    Ok(wrt_x.max(wrt_p))
}

type Case = fn(&mut Rng) -> Result<f64>;

fn op_cases() -> Vec<(&'static str, Case)> {
    alloc::vec![
        ("matmul", |r| {
            let (b, m, k, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            let a = Tensor::randn([b, m, k], 1.0, r);
            let w = Tensor::randn([k, n], 1.0, r);
            let e1 = check_input(&a, r, |t, v| { let c = t.constant(w.clone())?; t.matmul(v, c) })?;
            let e2 = check_input(&w, r, |t, v| { let c = t.constant(a.clone())?; t.matmul(c, v) })?;
            let l = Tensor::randn([m, m], 1.0, r);
            let e3 = check_input(&a, r, |t, v| { let c = t.constant(l.clone())?; t.matmul(c, v) })?;
            Ok(e1.max(e2).max(e3))
        }),
        ("linear", |r| {
            let (b, k, n) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 5));
            let x = Tensor::randn([b, 2, k], 1.0, r);
            let w = Tensor::randn([k, n], 1.0, r);
            let bias = Tensor::randn([n], 1.0, r);
            let (wc, bc, xc) = (w.clone(), bias.clone(), x.clone());
            let e1 = check_input(&x, r, |t, v| { let w = t.constant(wc.clone())?; let b = t.constant(bc.clone())?; t.linear(v, w, b) })?;
            let e2 = check_input(&w, r, |t, v| { let x = t.constant(xc.clone())?; let b = t.constant(bc.clone())?; t.linear(x, v, b) })?;
            let e3 = check_input(&bias, r, |t, v| { let x = t.constant(xc.clone())?; let w = t.constant(wc.clone())?; t.linear(x, w, v) })?;
            Ok(e1.max(e2).max(e3))
        }),
        ("add_sub_mul", |r| {
            let (a, b) = (dim(r, 1, 3), dim(r, 1, 4));
            let x = Tensor::randn([a, b], 1.0, r);
            let y = Tensor::randn([a, b], 1.0, r);
            let row = Tensor::randn([b], 1.0, r);
            let e1 = check_input(&x, r, |t, v| { let c = t.constant(y.clone())?; let s = t.add(v, c)?; let d = t.sub(s, v)?; let m = t.mul(v, d)?; t.mul(m, v) })?;
            let e2 = check_input(&row, r, |t, v| { let c = t.constant(x.clone())?; let m = t.mul(c, v)?; t.add(m, v) })?;
            Ok(e1.max(e2))
        }),
        ("scale_transpose_reshape", |r| {
            let (b, m, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
            let x = Tensor::randn([b, m, n], 1.0, r);
            check_input(&x, r, |t, v| { let s = t.scale(v, -1.7)?; let tr = t.transpose(s)?; t.reshape(tr, &[b * n, m]) })
        }),
        ("concat_slice", |r| {
            let (b, m, n) = (dim(r, 1, 3), dim(r, 2, 4), dim(r, 2, 4));
            let x = Tensor::randn([b, m, n], 1.0, r);
            let axis = rng::below(r, 3);
            let len = [b, m, n][axis];
            let cut = 1 + rng::below(r, len.max(2) - 1).min(len - 1);
            check_input(&x, r, |t, v| {
                let a = t.slice(v, axis, 0, cut.min(len))?;
                let c = t.concat(&[v, a], axis)?;
                let s = t.sum(a)?;
                let c2 = t.scale(c, 0.5)?;
                let m = t.mean(c2)?;
                let both = t.add(s, m)?;
                t.reshape(both, &[1])
            })
        }),
        ("reductions", |r| {
            let (b, m, n) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 5));
            let x = Tensor::randn([b, m, n], 1.0, r);
            check_input(&x, r, |t, v| { let a = t.mean_last(v)?; let sq = t.mul(a, a)?; t.sum(sq) })
        }),
        ("layernorm", |r| {
            let (b, d) = (dim(r, 1, 4), dim(r, 2, 6));
            let x = Tensor::randn([b, 2, d], 1.0, r);
            let g = Tensor::randn([d], 1.0, r);
            let be = Tensor::randn([d], 1.0, r);
            let (gc, bc) = (g.clone(), be.clone());
            let e1 = check_input(&x, r, |t, v| { let g = t.constant(gc.clone())?; let b = t.constant(bc.clone())?; t.layernorm(v, g, b) })?;
            let xc = x.clone();
            let e2 = check_input(&g, r, |t, v| { let x = t.constant(xc.clone())?; let b = t.constant(bc.clone())?; t.layernorm(x, v, b) })?;
            Ok(e1.max(e2))
        }),
        ("softmax", |r| {
            let (b, n) = (dim(r, 1, 4), dim(r, 2, 6));
            let x = Tensor::randn([b, n], 2.0, r);
            check_input(&x, r, |t, v| t.softmax(v))
        }),
        ("sigmoid", |r| {
            let x = Tensor::randn([dim(r, 1, 4), dim(r, 1, 6)], 2.0, r);
            check_input(&x, r, |t, v| t.sigmoid(v))
        }),
        ("gelu", |r| {
            let x = Tensor::randn([dim(r, 1, 4), dim(r, 1, 6)], 2.0, r);
            check_input(&x, r, |t, v| t.gelu(v))
        }),
        ("mse", |r| {
            let x = Tensor::randn([dim(r, 1, 3), dim(r, 1, 4)], 1.0, r);
            let y = Tensor::randn(x.shape().to_vec(), 1.0, r);
            let c = coords(x.numel(), r);
            gradcheck_coords(|t, v| { let c = t.constant(y.clone())?; t.mse(v, c) }, &x, H, &c)
        }),
    ]
}

fn layer_cases() -> Vec<(&'static str, Case)> {
    alloc::vec![
        ("layer/linear", |r| {
            let (k, n) = (dim(r, 1, 6), dim(r, 1, 6));
            let mut b = Builder::new(Init::Random(r));
            let lin = b.linear("l", k, n);
            let mut store = b.store;
            perturb(&mut store, r);
            let x = Tensor::randn([dim(r, 1, 3), 3, k], 1.0, r);
            check_layer(&store, &x, r, |t, p, v| lin.forward(t, p, v))
        }),
        ("layer/layernorm", |r| {
            let d = dim(r, 2, 8);
            let mut b = Builder::new(Init::Random(r));
            let norm = b.norm("n", d);
            let mut store = b.store;
            perturb(&mut store, r);
            let x = Tensor::randn([dim(r, 1, 3), 3, d], 1.0, r);
            check_layer(&store, &x, r, |t, p, v| norm.forward(t, p, v))
        }),
        ("layer/mlp", |r| {
            let (i, h, o) = (dim(r, 1, 6), dim(r, 1, 8), dim(r, 1, 6));
            let mut b = Builder::new(Init::Random(r));
            let mlp = Mlp::build(&mut b, "m", i, h, o);
            let mut store = b.store;
            perturb(&mut store, r);
            let x = Tensor::randn([dim(r, 1, 3), 2, i], 1.0, r);
            check_layer(&store, &x, r, |t, p, v| mlp.forward(t, p, v))
        }),
        ("layer/se", |r| {
            let (tokens, d) = (dim(r, 2, 9), dim(r, 1, 6));
            let reduction = 1 + rng::below(r, 4);
            let mut b = Builder::new(Init::Random(r));
            let se = SeBlock::build(&mut b, "se", tokens, reduction);
            let mut store = b.store;
            perturb(&mut store, r);
            let x = Tensor::randn([dim(r, 1, 3), tokens, d], 1.0, r);
            check_layer(&store, &x, r, |t, p, v| se.forward(t, p, v))
        }),
        ("layer/attention", |r| {
            let heads = 1 + rng::below(r, 2);
            let d = heads * dim(r, 2, 4);
            let mut b = Builder::new(Init::Random(r));
            let att = Attention::build(&mut b, "a", d, heads);
            let mut store = b.store;
            perturb(&mut store, r);
            let x = Tensor::randn([dim(r, 1, 2), dim(r, 2, 5), d], 1.0, r);
            check_layer(&store, &x, r, |t, p, v| att.forward(t, p, v))
        }),
    ]
}

/// Random biases and norm gains so every parameter is exercised away from
/// its initial value.
fn perturb(store: &mut ParamStore, rng: &mut Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng::normal(rng);
        }
    }
}

fn tiny_teacher(r: &mut Rng, l: usize) -> Result<DenoiserModel> {
    let heads = 1 + rng::below(r, 2);
    let cfg = TeacherConfig {
        n_layers: dim(r, 1, 3),
        d_model: 8 * heads,
        n_heads: heads,
        ffn_dim: 16,
        se_reduction: 4,
        retained: l,
        joints: 1,
    };
    let mut m = DenoiserModel::new(ModelConfig::Teacher(cfg), r)?;
    perturb(m.params_mut(), r);
    Ok(m)
}

fn tiny_student(r: &mut Rng, l: usize) -> Result<DenoiserModel> {
    let mut m = DenoiserModel::new(ModelConfig::Student(StudentConfig::new(dim(r, 1, 2), 8, l, 1)), r)?;
    perturb(m.params_mut(), r);
    Ok(m)
}

fn param_check(m: &DenoiserModel, r: &mut Rng, loss: impl Fn(&DenoiserModel, &mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let flat = Tensor::new([m.param_count()], m.flat_params())?;
    let c = coords(m.param_count(), r);
    gradcheck_coords(|tape, v| { let p = m.params().bind_flat(tape, v)?; loss(m, tape, &p) }, &flat, H, &c)
}

fn loss_cases() -> Vec<(&'static str, Case)> {
    alloc::vec![
        ("loss/teacher", |r| {
            let l = dim(r, 2, 5);
            let m = tiny_teacher(r, l)?;
            let b = dim(r, 1, 3);
            let y = Tensor::randn([b, l, 3], 1.0, r);
            let c = Tensor::randn([b, l, 3], 1.0, r);
            let eps = Tensor::randn([b, l, 3], 1.0, r);
            let steps: Vec<usize> = (0..b).map(|_| rng::below(r, 1000)).collect();
            param_check(&m, r, |m, tape, p| teacher_loss(m, tape, p, &y, &c, &steps, &eps))
        }),
        ("loss/distill", |r| {
            let (h, f) = (dim(r, 1, 3), dim(r, 1, 3));
            let l = dim(r, 1, h + f);
            let d = Diffusion::new(make_schedule(100, "cosine")?, h, f, l)?;
            let m = if rng::below(r, 2) == 0 { tiny_teacher(r, l)? } else { tiny_student(r, l)? };
            let b = dim(r, 1, 3);
            let obs = Tensor::randn([b, h, 3], 1.0, r);
            let c = d.condition(&obs)?;
            let eps = Tensor::randn([b, l, 3], 1.0, r);
            let target = Tensor::randn([b, l, 3], 1.0, r);
            param_check(&m, r, |m, tape, p| {
                let out = one_step_graph(m, &d, tape, p, &eps, &c)?;
                let tv = tape.constant(target.clone())?;
                tape.mse(out, tv)
            })
        }),
    ]
}

/// Runs every case `trials` times with independent random draws.
pub fn run(trials: usize, seed: u64) -> Result<Vec<GradReport>> {
    let mut cases = op_cases();
    cases.extend(layer_cases());
    cases.extend(loss_cases());
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, case))| {
            let mut r = rng::derive(seed, i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                worst = worst.max(case(&mut r)?);
            }
            Ok(GradReport { name: name.into(), trials, max_err: worst })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn quick_suite_passes() {
        for rep in super::run(5, 1).unwrap() {
            assert!(rep.max_err < 1e-4, "{}: {}", rep.name, rep.max_err);
        }
    }
}
