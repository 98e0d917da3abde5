use maccal_core::maccal::{
    clip_threshold, masked_inference, sparsity_step, stage2_epoch, transition, Stage2State,
};
use maccal_core::{
    gen_blobs, run_stage2, split, stage1_train, AblationRow, ControllerMode, Dataset, MaskResample,
    Method, Split, TrainConfig,
};
use proptest::prelude::*;

fn small_split() -> Split<f64> {
    let data: Dataset<f64> = gen_blobs(3, 6, 80, 1.2, 11).unwrap();
    split(&data, [0.6, 0.2, 0.2], 11).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        hidden_widths: vec![12, 10],
        stage1_epochs: 4,
        stage2_epochs: 5,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn retention_one_is_bit_identical_to_unmasked_retraining() {
    let s = small_split();
    let cfg = small_cfg();
    let stage1 = stage1_train(&s.train, &cfg).unwrap().model;
    let unmasked = TrainConfig { masking: false, ..cfg.clone() };
    let reference = run_stage2(&stage1, &s.train, &unmasked).unwrap();
    for resample in [MaskResample::Batch, MaskResample::Epoch] {
        let pinned = TrainConfig {
            mask_resample: resample,
            controller: ControllerMode::Fixed,
            q_init: 1.0,
            ..cfg.clone()
        };
        let out = run_stage2(&stage1, &s.train, &pinned).unwrap();
        assert_eq!(out.model.head, reference.model.head, "{resample:?}");
        for (a, b) in out.stats.iter().zip(&reference.stats) {
            assert_eq!((a.acc, a.conf, a.loss), (b.acc, b.conf, b.loss));
        }
    }
}

#[test]
fn extractor_hash_constant_through_stage2() {
    let s = small_split();
    let cfg = small_cfg();
    let stage1 = stage1_train(&s.train, &cfg).unwrap().model;
    let before = stage1.extractor.param_hash();
    let (frozen, head) = transition(&stage1.extractor, 3, &cfg).unwrap();
    let mut state = Stage2State::new(frozen, head, &s.train, &cfg).unwrap();
    let hash = state.extractor.param_hash();
    assert_ne!(hash, before, "hash covers the frozen flag");
    for _ in 0..cfg.stage2_epochs {
        stage2_epoch(&mut state, &cfg).unwrap();
        assert_eq!(state.extractor.param_hash(), hash);
    }
}

#[test]
fn unfrozen_extractor_is_rejected() {
    let s = small_split();
    let cfg = small_cfg();
    let stage1 = stage1_train(&s.train, &cfg).unwrap().model;
    let (_, head) = transition(&stage1.extractor, 3, &cfg).unwrap();
    assert!(Stage2State::new(stage1.extractor.clone(), head, &s.train, &cfg).is_err());
}

#[test]
fn runs_are_reproducible_and_seed_sensitive() {
    let s = small_split();
    let cfg = small_cfg();
    let a = maccal_core::train(&s, &cfg).unwrap();
    let b = maccal_core::train(&s, &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.stats, b.stats);
    let c = maccal_core::train(&s, &TrainConfig { seed: 2, ..cfg }).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn final_inference_is_deterministic() {
    let s = small_split();
    let out = maccal_core::train(&s, &small_cfg()).unwrap();
    assert_eq!(out.model.logits(s.test.features()).unwrap(), out.model.logits(s.test.features()).unwrap());
}

#[test]
fn every_method_and_ablation_row_completes() {
    let s = small_split();
    for method in Method::ALL {
        let cfg = TrainConfig { method, ..small_cfg() };
        let out = maccal_core::train(&s, &cfg).unwrap();
        assert_eq!(out.final_q.is_some(), method.is_two_stage());
        assert!(out.report.ece.is_finite());
    }
    for row in AblationRow::LADDER {
        let mut cfg = small_cfg();
        row.apply(&mut cfg);
        maccal_core::train(&s, &cfg).unwrap();
    }
}

#[test]
fn single_precision_pipeline_runs() {
    let data: Dataset<f32> = gen_blobs(3, 6, 80, 1.2, 11).unwrap();
    let s = split(&data, [0.6, 0.2, 0.2], 11).unwrap();
    let out = maccal_core::train(&s, &small_cfg()).unwrap();
    assert!(out.report.accuracy > 0.5);
}

#[test]
fn masked_probe_endpoint_is_uniform() {
    let s = small_split();
    let cfg = TrainConfig { method: Method::Vanilla, ..small_cfg() };
    let model = stage1_train(&s.train, &cfg).unwrap().model;
    let probe = masked_inference(&model, &s.test, 0.0, 4, 3).unwrap();
    assert_eq!(probe.conf, 1.0 / 3.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn sparsity_step_is_clipped_and_bounded(
        q in 0.0f64..=1.0,
        acc in 0.0f64..=1.0,
        conf in 0.0f64..=1.0,
        gamma in 0.01f64..=1.0,
        eta in 0.0f64..0.5,
    ) {
        let next = sparsity_step(q, conf, acc, gamma, eta);
        prop_assert!((0.0..=1.0).contains(&next));
        prop_assert!((next - q).abs() <= eta + 1e-15);
    }

    #[test]
    fn clip_threshold_monotone_between_endpoints(t in 0usize..200, total in 1usize..200) {
        let t = t.min(total);
        let eta = clip_threshold(t, total, 0.1, 0.001);
        prop_assert!((0.001..=0.1).contains(&eta));
        if t < total {
            prop_assert!(clip_threshold(t + 1, total, 0.1, 0.001) < eta);
        }
    }

    #[test]
    fn calibrated_trajectory_keeps_initial_retention(acc in proptest::collection::vec(0.0f64..=1.0, 1..50)) {
        let cfg = TrainConfig { gamma: 1.0, stage2_epochs: acc.len(), ..TrainConfig::default() };
        let mut ctrl = maccal_core::SparsityController::new(&cfg);
        for a in acc {
            prop_assert_eq!(ctrl.update(a, a).q_next, 0.5);
        }
    }
}
