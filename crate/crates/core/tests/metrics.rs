mod common;

use common::*;
use maccal_core::metrics::{aece, auroc, ece, fpr95, mce, weighted_gap, CalibrationReport};
use maccal_core::{Matrix, PredictionSet};
use proptest::prelude::*;

#[test]
fn binned_errors_match_brute_force() {
    for seed in 0..100 {
        let p = random_predictions(200, 5, 1.0 + (seed % 4) as f64, seed);
        let (conf, correct) = conf_and_correct(&p);
        let (e, m) = brute_ece_mce(&conf, &correct, 15);
        assert!((ece(&p, 15).unwrap().value - e).abs() <= 1e-12, "seed {seed}");
        assert!((mce(&p, 15).unwrap() - m).abs() <= 1e-12, "seed {seed}");
        let a = brute_aece(&conf, &correct, 15);
        assert!((aece(&p, 15).unwrap().value - a).abs() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn ood_scores_match_brute_force() {
    for seed in 0..100 {
        let ins = random_predictions(200, 5, 3.0, seed).confidences();
        let outs = random_predictions(150, 5, 1.0, seed + 1000).confidences();
        assert_eq!(auroc(&ins, &outs).unwrap(), brute_auroc(&ins, &outs));
        assert_eq!(fpr95(&ins, &outs).unwrap(), brute_fpr95(&ins, &outs));
    }
}

#[test]
fn tied_and_quantized_scores_match_brute_force() {
    let ins: Vec<f64> = (0..57).map(|i| (i % 7) as f64 / 6.0).collect();
    let outs: Vec<f64> = (0..43).map(|i| (i % 5) as f64 / 4.0).collect();
    assert_eq!(auroc(&ins, &outs).unwrap(), brute_auroc(&ins, &outs));
    assert_eq!(fpr95(&ins, &outs).unwrap(), brute_fpr95(&ins, &outs));
}

#[test]
fn bin_edges_follow_half_open_convention() {
    // Confidence exactly on an interior edge belongs to the upper bin.
    let rows = vec![vec![0.6, 0.4], vec![0.8, 0.2]];
    let p = PredictionSet::new(Matrix::from_rows(&rows).unwrap(), vec![0, 1]).unwrap();
    let bins = ece(&p, 5).unwrap().bins;
    assert_eq!(bins[3].count, 1);
    assert_eq!(bins[4].count, 1);
    let (conf, correct) = conf_and_correct(&p);
    assert_eq!(brute_ece_mce(&conf, &correct, 5).0, ece(&p, 5).unwrap().value);
}

fn prediction_strategy() -> impl Strategy<Value = PredictionSet<f64>> {
    (2usize..6, 15usize..80).prop_flat_map(|(k, n)| {
        (
            proptest::collection::vec(-6.0f64..6.0, n * k),
            proptest::collection::vec(0..k, n),
        )
            .prop_map(move |(logits, labels)| {
                PredictionSet::from_logits(&Matrix::new(n, k, logits).unwrap(), labels).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn ece_bounded_and_below_mce(p in prediction_strategy(), bins in 1usize..20) {
        let e = ece(&p, bins).unwrap().value;
        let m = mce(&p, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!(e <= m + 1e-12);
        prop_assert!(aece(&p, bins.min(p.len())).unwrap().value <= 1.0);
    }

    #[test]
    fn ece_is_count_weighted_bin_gap(p in prediction_strategy()) {
        let out = ece(&p, 15).unwrap();
        let total: usize = out.bins.iter().map(|b| b.count).sum();
        prop_assert_eq!(total, p.len());
        let manual: f64 = out
            .bins
            .iter()
            .map(|b| b.count as f64 / total as f64 * (b.avg_accuracy - b.avg_confidence).abs())
            .sum();
        prop_assert!((manual - out.value).abs() < 1e-12);
        prop_assert!((weighted_gap(&out.bins) - out.value).abs() < 1e-15);
    }

    #[test]
    fn metrics_invariant_under_sample_permutation(p in prediction_strategy(), seed in 0u64..1000) {
        let order = maccal_core::RngStream::new(seed, 0).permutation(p.len());
        let q = PredictionSet::new(
            p.probs().select_rows(&order),
            order.iter().map(|&i| p.labels()[i]).collect(),
        ).unwrap();
        prop_assert!((ece(&p, 15).unwrap().value - ece(&q, 15).unwrap().value).abs() < 1e-12);
        prop_assert!((mce(&p, 15).unwrap() - mce(&q, 15).unwrap()).abs() < 1e-12);
        let a = CalibrationReport::from_predictions(&p, 10).unwrap();
        let b = CalibrationReport::from_predictions(&q, 10).unwrap();
        prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        prop_assert!((a.nll - b.nll).abs() < 1e-12);
    }

    #[test]
    fn auroc_is_antisymmetric(
        ins in proptest::collection::vec(0u8..20, 1..60),
        outs in proptest::collection::vec(0u8..20, 1..60),
    ) {
        let ins: Vec<f64> = ins.into_iter().map(f64::from).collect();
        let outs: Vec<f64> = outs.into_iter().map(f64::from).collect();
        let ab = auroc(&ins, &outs).unwrap();
        let ba = auroc(&outs, &ins).unwrap();
        prop_assert!((ab + ba - 1.0).abs() < 1e-12);
        prop_assert_eq!(ab, brute_auroc(&ins, &outs));
        prop_assert_eq!(fpr95(&ins, &outs).unwrap(), brute_fpr95(&ins, &outs));
    }

    #[test]
    fn auroc_ignores_monotone_rescaling(
        ins in proptest::collection::vec(0.0f64..1.0, 1..50),
        outs in proptest::collection::vec(0.0f64..1.0, 1..50),
    ) {
        let f = |v: &[f64]| v.iter().map(|x| 3.0 * x + 1.0).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&ins, &outs).unwrap(), auroc(&f(&ins), &f(&outs)).unwrap());
    }
}
