mod common;

use common::rng;
use mstnet::gradcheck::random_tensor;
use mstnet::nn::{Ctx, Init, ParamStore};
use mstnet::tabular::{CategoricalField, TabularEncoder, TabularSchema};
use proptest::prelude::*;

fn schema() -> TabularSchema {
    TabularSchema {
        numerical: vec!["age".into(), "score".into()],
        categorical: vec![CategoricalField {
            name: "sex".into(),
            vocabulary: vec!["F".into(), "M".into()],
        }],
    }
}

fn encoder(layers: usize, remove_first_norm: bool, feature_biases: bool) -> (TabularEncoder, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let enc = TabularEncoder::new(&mut store, &mut Init::new(21), &schema(), 8, layers, 2, 2, remove_first_norm, feature_biases).unwrap();
    (enc, store)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn zero_projections_pass_cls_through() {
    let (enc, mut store) = encoder(1, true, true);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.get(id).name.clone();
        if name.contains(".attn.") || name.contains(".ff_in.") || name.contains(".ff_out.") {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut ctx = Ctx::eval(&store);
    let tokens = enc.tokenizer.tokenize(&mut ctx, &[0.3, -1.2], &[1]).unwrap();
    let cls_in = ctx.graph.value(tokens).data()[3 * 8..].to_vec();
    let cls_out = enc.encode(&mut ctx, tokens).unwrap();
    assert_eq!(ctx.graph.value(cls_out).data(), cls_in.as_slice());
}

#[test]
fn attention_rows_are_probability_vectors() {
    let (enc, store) = encoder(2, true, true);
    let mut ctx = Ctx::eval(&store);
    let tokens = enc.tokenizer.tokenize(&mut ctx, &[1.5, 0.2], &[0]).unwrap();
    let encoded = enc.encode_tokens(&mut ctx, tokens).unwrap();
    assert_eq!(encoded.attention.len(), 2);
    for layer in &encoded.attention {
        assert_eq!(layer.len(), 2);
        for &w in layer {
            let v = ctx.graph.value(w);
            let n = v.shape()[1];
            for row in v.data().chunks(n) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn cls_output_ignores_order_of_feature_tokens() {
    let (enc, store) = encoder(2, true, true);
    let feats = random_tensor(&[3, 8], &mut rng(22));
    let mut ctx = Ctx::eval(&store);
    let cls = {
        let c = ctx.param(enc.tokenizer.cls);
        ctx.graph.reshape(c, &[1, 8]).unwrap()
    };
    let mut outputs = Vec::new();
    for perm in [[0, 1, 2], [2, 0, 1], [1, 2, 0], [2, 1, 0]] {
        let rows: Vec<f64> = perm.iter().flat_map(|&r| feats.data()[r * 8..(r + 1) * 8].to_vec()).collect();
        let f = ctx.constant(mstnet::Tensor::new(vec![3, 8], rows).unwrap());
        let tokens = ctx.graph.concat(&[f, cls]).unwrap();
        let out = enc.encode(&mut ctx, tokens).unwrap();
        outputs.push(ctx.graph.value(out).data().to_vec());
    }
    for o in &outputs[1..] {
        assert!(max_diff(o, &outputs[0]) < 1e-12);
    }
}

#[test]
fn removing_the_first_norm_changes_the_output() {
    let run = |remove: bool| {
        let (enc, store) = encoder(1, remove, true);
        let mut ctx = Ctx::eval(&store);
        let out = enc.forward(&mut ctx, &[2.0, -0.5], &[1]).unwrap();
        ctx.graph.value(out).data().to_vec()
    };
    let (modified, standard) = (run(true), run(false));
    assert!(max_diff(&modified, &standard) > 1e-3);
    // regression lock for the modified block
    assert!(max_diff(&modified, &GOLDEN_MODIFIED) < 1e-9, "{modified:?}");
}

const GOLDEN_MODIFIED: [f64; 8] = [
    -0.5694281724134489,
    -0.7367990716887175,
    -0.09332774216922923,
    -0.008325694319565646,
    0.9917559724125762,
    -0.6648873657918128,
    -0.8076947388351139,
    -0.6828139874898635,
];

#[test]
fn disabled_biases_zero_tokens_and_receive_no_gradients() {
    let (enc, store) = encoder(1, true, false);
    assert!(!enc.tokenizer.has_feature_biases());
    assert!(store.iter().all(|p| !p.name.contains("bias") || !p.name.starts_with("tab.tok")));
    let mut ctx = Ctx::eval(&store);
    let tokens = enc.tokenizer.tokenize(&mut ctx, &[0.0, 0.0], &[0]).unwrap();
    let v = ctx.graph.value(tokens).data().to_vec();
    assert!(v[..16].iter().all(|&x| x == 0.0));

    let out = enc.encode(&mut ctx, tokens).unwrap();
    let loss = ctx.graph.sum(out);
    ctx.graph.backward(loss).unwrap();
    for (id, _) in ctx.param_grads() {
        let name = &store.get(id).name;
        assert!(!name.starts_with("tab.tok.num_bias") && !name.starts_with("tab.tok.cat_bias"), "{name}");
    }
}

#[test]
fn out_of_range_category_is_rejected() {
    let (enc, store) = encoder(1, true, true);
    let mut ctx = Ctx::eval(&store);
    assert!(enc.tokenizer.tokenize(&mut ctx, &[0.0, 0.0], &[2]).is_err());
    assert!(enc.tokenizer.tokenize(&mut ctx, &[0.0], &[0]).is_err());
}

proptest! {
    #[test]
    fn numerical_tokens_scale_linearly(x in prop::collection::vec(-5.0f64..5.0, 2), alpha in -3.0f64..3.0) {
        let (enc, store) = encoder(1, true, true);
        let mut ctx = Ctx::eval(&store);
        let zero = enc.tokenizer.tokenize(&mut ctx, &[0.0, 0.0], &[0]).unwrap();
        let base = enc.tokenizer.tokenize(&mut ctx, &x, &[0]).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * alpha).collect();
        let sc = enc.tokenizer.tokenize(&mut ctx, &scaled, &[0]).unwrap();
        let (z, b, s) = (ctx.graph.value(zero).data(), ctx.graph.value(base).data(), ctx.graph.value(sc).data());
        for i in 0..16 {
            prop_assert!(((s[i] - z[i]) - alpha * (b[i] - z[i])).abs() < 1e-12);
        }
    }
}
