mod common;

use common::{definitional_mcc, definitional_scores, rng};
use mstnet::metrics::{confusion, macro_scores, mcc, ConfusionMatrix, Metrics};
use proptest::prelude::*;
use rand::Rng;

fn random_pairs(r: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let n = r.random_range(1..60);
    // bias predictions toward the label so matrices cover the whole range
    let skill: f64 = r.random_range(0.0..1.0);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
    let preds = labels
        .iter()
        .map(|&l| if r.random_bool(skill) { l } else { r.random_range(0..3) })
        .collect();
    (labels, preds)
}

#[test]
fn agrees_with_definitional_formulas_on_random_matrices() {
    let mut r = rng(1);
    for _ in 0..1000 {
        let (labels, preds) = random_pairs(&mut r);
        let m = confusion(&labels, &preds).unwrap();
        assert_eq!(m.total(), labels.len() as u64);
        let s = macro_scores(&m).unwrap();
        let (p, rc, f, acc) = definitional_scores(&labels, &preds);
        for (a, b) in [(s.precision, p), (s.recall, rc), (s.f1, f), (s.accuracy, acc), (mcc(&m), definitional_mcc(&m))] {
            assert!((a - b).abs() < 1e-10, "{a} vs {b} for {:?}", m.counts);
        }
    }
}

#[test]
fn one_class_everywhere_follows_zero_conventions() {
    for k in 0..3 {
        // every prediction is class k, labels mixed
        let m = confusion(&[0, 1, 2, 0], &[k; 4]).unwrap();
        assert_eq!(mcc(&m), 0.0);
        // every label and prediction is class k
        let m = confusion(&[k; 5], &[k; 5]).unwrap();
        let s = macro_scores(&m).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(mcc(&m), 0.0);
        for (c, cls) in s.per_class.iter().enumerate() {
            let want = if c == k { 1.0 } else { 0.0 };
            assert_eq!((cls.precision, cls.recall, cls.f1), (want, want, want));
        }
    }
    assert!(Metrics::from_confusion(&ConfusionMatrix::default()).is_err());
}

#[test]
fn csv_row_has_header_arity() {
    let m = confusion(&[0, 1, 2], &[0, 2, 2]).unwrap();
    let row = Metrics::from_confusion(&m).unwrap().csv_row();
    assert_eq!(row.split(',').count(), Metrics::CSV_HEADER.split(',').count());
}

proptest! {
    #[test]
    fn scores_are_invariant_to_sample_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (labels, preds) = random_pairs(&mut r);
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        for i in (1..idx.len()).rev() {
            idx.swap(i, r.random_range(0..=i));
        }
        let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let p2: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let a = Metrics::from_confusion(&confusion(&labels, &preds).unwrap()).unwrap();
        let b = Metrics::from_confusion(&confusion(&l2, &p2).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mcc_is_symmetric_under_relabeling(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (labels, preds) = random_pairs(&mut r);
        let relabel = [2, 0, 1];
        let l2: Vec<usize> = labels.iter().map(|&l| relabel[l]).collect();
        let p2: Vec<usize> = preds.iter().map(|&p| relabel[p]).collect();
        let a = mcc(&confusion(&labels, &preds).unwrap());
        let b = mcc(&confusion(&l2, &p2).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }
}
