//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mstnet::data::{generate, Dataset, GeneratorConfig};
use mstnet::gradcheck::{check, random_tensor, rel_err};
use mstnet::metrics::ConfusionMatrix;
use mstnet::nn::{Ctx, ParamStore};
use mstnet::tape::PAD;
use mstnet::{Graph, ModelConfig, Result, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// O(T²) DFT of one real sequence.
pub fn naive_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| {
                    let ang = -2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
                    Complex64::from_polar(v, ang)
                })
                .sum()
        })
        .collect()
}

/// Channel-averaged DFT magnitudes for frequencies `1..=T/2` of `[T × C]`.
pub fn naive_amplitudes(x: &Tensor<f64>) -> Vec<f64> {
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let mut amp = vec![0.0; t / 2];
    for ch in 0..c {
        let col: Vec<f64> = (0..t).map(|i| x.data()[i * c + ch]).collect();
        let spec = naive_dft(&col);
        for f in 1..=t / 2 {
            amp[f - 1] += spec[f].norm() / c as f64;
        }
    }
    amp
}

/// Attention computed with explicit loops: `q[Nq×d]`, `k[Nk×d]`, `v[Nk×d]`
/// already projected, split into `heads` slices of the columns.
pub fn loop_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut wh = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|v| v / s).collect();
            for (j, vj) in v.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += p[j] * vj[c];
                }
            }
            wh.push(p);
        }
        weights.push(wh);
    }
    (out, weights)
}

/// Multiclass MCC from the covariance definition over one-hot indicator
/// vectors: cov(X, Y) / sqrt(cov(X, X) · cov(Y, Y)).
pub fn definitional_mcc(m: &ConfusionMatrix) -> f64 {
    let mut pairs = Vec::new();
    for (t, row) in m.counts.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            for _ in 0..c {
                pairs.push((t, p));
            }
        }
    }
    let n = pairs.len() as f64;
    let k = 3;
    let mean = |f: &dyn Fn(usize, usize) -> f64| pairs.iter().map(|&(t, p)| f(t, p)).sum::<f64>() / n;
    let cov = |a: &dyn Fn(usize, usize, usize) -> f64, b: &dyn Fn(usize, usize, usize) -> f64| {
        let mut s = 0.0;
        for c in 0..k {
            let ma = mean(&|t, p| a(t, p, c));
            let mb = mean(&|t, p| b(t, p, c));
            s += pairs.iter().map(|&(t, p)| (a(t, p, c) - ma) * (b(t, p, c) - mb)).sum::<f64>();
        }
        s / n
    };
    let x = |t: usize, _p: usize, c: usize| (t == c) as u8 as f64;
    let y = |_t: usize, p: usize, c: usize| (p == c) as u8 as f64;
    let cxy = cov(&x, &y);
    let cxx = cov(&x, &x);
    let cyy = cov(&y, &y);
    if cxx * cyy == 0.0 {
        0.0
    } else {
        cxy / (cxx * cyy).sqrt()
    }
}

/// Per-class precision/recall/F1 by counting label/prediction pairs.
pub fn definitional_scores(labels: &[usize], preds: &[usize]) -> (f64, f64, f64, f64) {
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    for c in 0..3 {
        let tp = labels.iter().zip(preds).filter(|&(&l, &p)| l == c && p == c).count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let actual = labels.iter().filter(|&&l| l == c).count() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let acc = labels.iter().zip(preds).filter(|(l, p)| l == p).count() as f64 / labels.len() as f64;
    (p_sum / 3.0, r_sum / 3.0, f_sum / 3.0, acc)
}

/// Finite-difference check of a parameterized forward pass on `picks`
/// randomly chosen parameter entries. The loss is `sum(out ⊙ R)` for a
/// fixed random `R`. Returns the largest relative error.
pub fn param_check<F>(store: &mut ParamStore<f64>, picks: usize, h: f64, seed: u64, forward: F) -> Result<f64>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let mut r = rng(seed);
    let probe = {
        let mut ctx = Ctx::eval(store);
        let out = forward(&mut ctx)?;
        ctx.graph.shape(out).to_vec()
    };
    let proj = random_tensor(&probe, &mut r);
    let loss = |ctx: &mut Ctx<'_, f64>| -> Result<Var> {
        let out = forward(ctx)?;
        let p = ctx.constant(proj.clone());
        let prod = ctx.graph.mul(out, p)?;
        Ok(ctx.graph.sum(prod))
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let analytic: Vec<(mstnet::nn::ParamId, Vec<f64>)> = {
        let mut ctx = Ctx::eval(store);
        let l = loss(&mut ctx)?;
        ctx.graph.backward(l)?;
        let mut grads: Vec<(mstnet::nn::ParamId, Vec<f64>)> =
            ids.iter().map(|&id| (id, vec![0.0; store.get(id).value.len()])).collect();
        for (id, g) in ctx.param_grads() {
            if let Some(slot) = grads.iter_mut().find(|(i, _)| *i == id) {
                slot.1.copy_from_slice(g);
            }
        }
        grads
    };
    let value = |store: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::eval(store);
        let l = loss(&mut ctx)?;
        Ok(ctx.graph.value(l).data()[0])
    };
    let mut worst = 0.0f64;
    for _ in 0..picks {
        let (id, grad) = &analytic[r.random_range(0..analytic.len())];
        let i = r.random_range(0..grad.len());
        let orig = store.get(*id).value.data()[i];
        store.value_mut(*id).data_mut()[i] = orig + h;
        let up = value(store)?;
        store.value_mut(*id).data_mut()[i] = orig - h;
        let down = value(store)?;
        store.value_mut(*id).data_mut()[i] = orig;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

type OpBuild = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One tape primitive with its input shapes.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Shift added to every input so that non-smooth points are avoided.
    pub offset: f64,
    pub build: OpBuild,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        offset: 0.0,
        build: Box::new(build),
    }
}

/// Every differentiable primitive of the tape.
pub fn op_cases() -> Vec<OpCase> {
    let mask = Arc::new(vec![0.0, 2.0, 1.5, -1.0, 0.5, 3.0]);
    let fold_map = Arc::new(vec![0, 1, 2, 3, 4, PAD, 5, PAD]);
    let mut v = vec![
        case("matmul", &[&[2, 3], &[3, 4]], |g, x| g.matmul(x[0], x[1])),
        case("matmul_nt", &[&[2, 3], &[4, 3]], |g, x| g.matmul_nt(x[0], x[1])),
        case("add", &[&[2, 3], &[2, 3]], |g, x| g.add(x[0], x[1])),
        case("sub", &[&[2, 3], &[2, 3]], |g, x| g.sub(x[0], x[1])),
        case("mul", &[&[2, 3], &[2, 3]], |g, x| g.mul(x[0], x[1])),
        case("scale", &[&[2, 3]], |g, x| Ok(g.scale(x[0], -1.7))),
        case("mul_const", &[&[2, 3]], move |g, x| g.mul_const(x[0], mask.clone())),
        case("add_row", &[&[3, 4], &[4]], |g, x| g.add_row(x[0], x[1])),
        case("mul_row", &[&[3, 4], &[4]], |g, x| g.mul_row(x[0], x[1])),
        case("add_col", &[&[3, 4], &[3]], |g, x| g.add_col(x[0], x[1])),
        case("mul_col", &[&[3, 4], &[3]], |g, x| g.mul_col(x[0], x[1])),
        case("sum", &[&[2, 3]], |g, x| Ok(g.sum(x[0]))),
        case("mean", &[&[2, 3]], |g, x| Ok(g.mean(x[0]))),
        case("softmax_rows", &[&[3, 4]], |g, x| Ok(g.softmax_rows(x[0]))),
        case("cross_entropy", &[&[3]], |g, x| g.cross_entropy(x[0], 1)),
        case("gelu", &[&[2, 5]], |g, x| Ok(g.gelu(x[0]))),
        case("normalize_rows", &[&[3, 5]], |g, x| g.normalize_rows(x[0])),
        case("layer_norm", &[&[3, 4], &[4], &[4]], |g, x| g.layer_norm(x[0], x[1], x[2])),
        case("conv2d", &[&[2, 4, 5], &[3, 2, 3, 3]], |g, x| g.conv2d(x[0], x[1])),
        case("conv3d", &[&[2, 3, 4, 4], &[2, 2, 3, 3, 3]], |g, x| g.conv3d(x[0], x[1])),
        case("avg_pool3d", &[&[2, 4, 2, 4]], |g, x| g.avg_pool3d(x[0])),
        case("gather", &[&[2, 3]], move |g, x| g.gather(x[0], fold_map.clone(), &[2, 4])),
        case("transpose", &[&[2, 3]], |g, x| g.transpose(x[0])),
        case("slice_cols", &[&[3, 5]], |g, x| g.slice_cols(x[0], 1, 4)),
        case("slice_rows", &[&[4, 2]], |g, x| g.slice_rows(x[0], 1, 3)),
        case("concat", &[&[2, 3], &[1, 3]], |g, x| g.concat(&[x[0], x[1]])),
        case("reshape", &[&[2, 3]], |g, x| g.reshape(x[0], &[3, 2])),
        case("mean_rows", &[&[4, 3]], |g, x| g.mean_rows(x[0])),
    ];
    v.push(case("relu", &[&[2, 5]], |g, x| Ok(g.relu(x[0]))));
    let mut sqrt = case("sqrt", &[&[2, 3]], |g, x| Ok(g.sqrt(x[0])));
    sqrt.offset = 2.0;
    v.push(sqrt);
    v
}

/// Runs the finite-difference check for one primitive in 64-bit.
pub fn check_op(c: &OpCase, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = c
        .shapes
        .iter()
        .map(|s| {
            let t = random_tensor(s, &mut r);
            Tensor::from_fn(s, |i| {
                let v = t.data()[i] + c.offset;
                // keep ReLU inputs away from its kink
                if c.name == "relu" && v.abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            })
        })
        .collect();
    check(&inputs, 1e-6, seed ^ 0xABCD, |g, vars| (c.build)(g, vars))
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        tab_heads: 2,
        tab_layers: 2,
        growth_rate: 2,
        dense_layers: 2,
        dense_blocks: 1,
        fusion_dim: 8,
        fusion_heads: 2,
        agg_hidden: 8,
        times_blocks: 2,
        k_top: 2,
        eeg3d_channels: 2,
        ..Default::default()
    }
}

pub fn tiny_dataset(seed: u64) -> Dataset {
    generate(&GeneratorConfig {
        n: 6,
        seed,
        eeg_len: 16,
        eeg_channels: 2,
        volume: [8, 8, 8],
        class_freqs: [2, 3, 5],
        ..Default::default()
    })
    .expect("tiny dataset")
}

/// The synthetic cohort geometry used by the training experiments.
pub fn experiment_generator(n: usize, seed: u64, noise: f64) -> GeneratorConfig {
    GeneratorConfig {
        n,
        seed,
        noise,
        eeg_len: 64,
        eeg_channels: 4,
        volume: [16, 16, 16],
        ..Default::default()
    }
}
