//! Finite-difference checks of tape gradients in 64-bit.

mod common;

use common::{check_op, op_cases, param_check, rng, tiny_config, tiny_dataset};
use mstnet::fusion::{EegTo3d, FusionDims, FusionHead};
use mstnet::gradcheck::random_tensor;
use mstnet::imaging::{standardize, DenseBlockParams, ImagingEncoder};
use mstnet::nn::{Ctx, Init, MultiHeadAttention, ParamStore};
use mstnet::tabular::TabularEncoder;
use mstnet::temporal::TimesBlock;
use mstnet::{InputDims, ModelInput, Mstnet, Normalizer};

#[test]
fn every_primitive_matches_central_differences() {
    let mut failures = Vec::new();
    for (i, c) in op_cases().iter().enumerate() {
        let err = check_op(c, 100 + i as u64).unwrap();
        if err >= 1e-4 {
            failures.push(format!("{}: {err:.2e}", c.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn multi_head_attention_gradients() {
    let mut store = ParamStore::<f64>::new();
    let attn = MultiHeadAttention::new(&mut store, &mut Init::new(1), "attn", 4, 2).unwrap();
    let mut r = rng(2);
    let q = random_tensor(&[2, 4], &mut r);
    let k = random_tensor(&[3, 4], &mut r);
    let err = param_check(&mut store, 30, 1e-6, 3, |ctx| {
        let (qv, kv) = (ctx.constant(q.clone()), ctx.constant(k.clone()));
        Ok(attn.forward(ctx, qv, kv)?.out)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn tabular_encoder_gradients() {
    let ds = tiny_dataset(1);
    let mut store = ParamStore::<f64>::new();
    let enc = TabularEncoder::new(&mut store, &mut Init::new(4), ds.schema(), 8, 2, 2, 2, true, true).unwrap();
    let (num, cat) = ds.schema().encode(&ds.samples[0].tabular).unwrap();
    let num: Vec<f64> = num.iter().map(|v| v / 30.0).collect();
    let err = param_check(&mut store, 30, 1e-6, 5, |ctx| enc.forward(ctx, &num, &cat)).unwrap();
    assert!(err < 1e-4, "{err}");
}

fn times_stack_error(blocks: usize, amplitude_grad: bool) -> f64 {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(6);
    let stack: Vec<TimesBlock> = (0..blocks)
        .map(|i| TimesBlock::new(&mut store, &mut init, i, 3, 2, &[1, 3], amplitude_grad).unwrap())
        .collect();
    let x = random_tensor(&[20, 3], &mut rng(7));
    param_check(&mut store, 30, 1e-6, 8, |ctx| {
        let mut h = ctx.constant(x.clone());
        for b in &stack {
            h = b.forward(ctx, h)?;
        }
        Ok(h)
    })
    .unwrap()
}

#[test]
fn times_block_gradients() {
    for amplitude_grad in [false, true] {
        let err = times_stack_error(1, amplitude_grad);
        assert!(err < 1e-4, "amplitude_grad={amplitude_grad}: {err}");
    }
}

#[test]
fn times_block_stack_gradients_with_amplitude_path() {
    // later blocks see earlier parameters through their aggregation weights,
    // which only flow back when the amplitude path is enabled
    let err = times_stack_error(2, true);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn imaging_encoder_gradients_on_small_volume() {
    let p = DenseBlockParams {
        growth_rate: 2,
        layers_per_block: 2,
        blocks: 2,
    };
    let mut store = ParamStore::<f64>::new();
    let enc = ImagingEncoder::dense(&mut store, &mut Init::new(9), 1, &p);
    let vol = standardize(&random_tensor(&[1, 8, 8, 8], &mut rng(10)));
    let err = param_check(&mut store, 5, 1e-5, 11, |ctx| {
        let v = ctx.constant(vol.clone());
        enc.forward(ctx, v)
    })
    .unwrap();
    assert!(err < 1e-2, "{err}");
}

#[test]
fn eeg_to_3d_gradients() {
    let mut store = ParamStore::<f64>::new();
    let map = EegTo3d::new(&mut store, &mut Init::new(12), 6, 2, [2, 2, 1, 2]);
    let x = random_tensor(&[6, 2], &mut rng(13));
    let err = param_check(&mut store, 20, 1e-6, 14, |ctx| {
        let v = ctx.constant(x.clone());
        map.forward(ctx, v)
    })
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn fusion_head_gradients() {
    for cmaa in [true, false] {
        let mut store = ParamStore::<f64>::new();
        let dims = FusionDims {
            eeg_channels: 2,
            mri_channels: 3,
            tab_width: 4,
            d_f: 4,
            heads: 2,
            hidden: 6,
        };
        let mut init = Init::new(15);
        let head = FusionHead::new(&mut store, &mut init, &dims, cmaa).unwrap();
        // the classifier starts near zero; widen it so every path matters
        let cls = store.find("fusion.classifier.weight").unwrap();
        *store.value_mut(cls) = init.normal(&[6, 3], 0.5);
        let mut r = rng(16);
        let e = random_tensor(&[2, 2, 1, 2], &mut r);
        let m = random_tensor(&[3, 1, 2, 2], &mut r);
        let t = random_tensor(&[1, 4], &mut r);
        let err = param_check(&mut store, 40, 1e-6, 17, |ctx| {
            let (ev, mv, tv) = (ctx.constant(e.clone()), ctx.constant(m.clone()), ctx.constant(t.clone()));
            let feats = head.project(ctx, ev, mv, tv)?;
            head.aggregate_and_classify(ctx, &feats)
        })
        .unwrap();
        assert!(err < 1e-4, "cmaa={cmaa}: {err}");
    }
}

#[test]
fn end_to_end_spot_check() {
    let ds = tiny_dataset(2);
    let dims = InputDims::of(&ds);
    let norm = Normalizer::fit_train(&ds).unwrap();
    let (net, mut store) = Mstnet::build::<f64>(&tiny_config(), &dims).unwrap();
    let input = ModelInput::<f64>::prepare(&ds.samples[1], ds.schema(), &norm).unwrap();
    let err = param_check(&mut store, 10, 1e-5, 18, |ctx| net.forward(ctx, &input)).unwrap();
    assert!(err < 1e-2, "{err}");
}

#[test]
fn input_gradient_through_times_block_matches() {
    // gradients with respect to the series itself, amplitude path included
    let mut store = ParamStore::<f64>::new();
    let block = TimesBlock::new(&mut store, &mut Init::new(19), 0, 2, 2, &[3], true).unwrap();
    let x = random_tensor(&[12, 2], &mut rng(20));
    let err = mstnet::gradcheck::check(&[x], 1e-6, 21, |g, vars| {
        let mut ctx = Ctx::eval(&store);
        std::mem::swap(&mut ctx.graph, g);
        let out = block.forward(&mut ctx, vars[0]);
        std::mem::swap(&mut ctx.graph, g);
        out
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
