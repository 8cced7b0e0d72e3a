use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::data::{generate_synthetic_pair, DomainDatasetPair, DomainShiftSpec};
use crate::losses::classifier_loss;
use crate::model::{build_model, BlockId, UNetConfig};

fn tiny_config() -> UNetConfig {
    UNetConfig {
        base_width: 4,
        depth: 2,
        input_size: (16, 16),
        ..UNetConfig::default()
    }
}

fn tiny_pair(seed: u64) -> DomainDatasetPair {
    generate_synthetic_pair(2, 2, &DomainShiftSpec::desk_benchmark(seed), seed, (16, 16)).unwrap()
}

#[test]
fn grl_forward_is_identity_and_backward_scales() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for eta in [0.5f64, 1.0, 1.4] {
        let grl = Grl::new(eta).unwrap();
        let x = Array4::from_shape_simple_fn((2, 3, 4, 4), || rng.gen_range(-2.0..2.0f32));
        assert_eq!(grl.forward(&x), x, "forward must be bit-identical");
        // linear downstream loss L = sum(y): dL/dy = 1 everywhere
        let ones = Array4::<f32>::ones(x.raw_dim());
        let up = grl.backward(&ones);
        assert!(up.iter().all(|&v| v == -(eta as f32)), "upstream must be -eta exactly");
    }
    // quadratic hand oracle: L = sum(grl(x)^2) at x = 3, eta = 1.4
    let grl = Grl::new(1.4).unwrap();
    let down = Array4::<f32>::from_elem((1, 1, 1, 1), 6.0); // dL/dy = 2x = 6
    let up = grl.backward(&down);
    assert_eq!(up[[0, 0, 0, 0]], -1.4f32 * 6.0);
    assert!((up[[0, 0, 0, 0]] as f64 + 8.4).abs() < 1e-6);

    assert!(Grl::new(0.0).is_err());
    assert!(Grl::new(-1.4).is_err());
}

#[test]
fn adapt_defaults_match_training_regime() {
    let cfg = AdaptConfig::default();
    assert_eq!(cfg.lr_adversary, 1e-6);
    assert_eq!(cfg.lr_classifier, 1e-3);
    assert_eq!(cfg.lr_encoder, 1e-3 * 2.0 / 3.0);
    assert_eq!(cfg.lr_decoder, 1e-3 * 4.0 / 9.0);
    assert_eq!(cfg.eta, 1.4);
    assert_eq!(cfg.margin.gamma, 0.08);
    assert_eq!(cfg.xi, 0.02);
    assert_eq!(cfg.freeze_spec, vec![BlockId::encoder(0), BlockId::encoder(1)]);
    cfg.validate().unwrap();

    let pre = PretrainConfig::default();
    assert_eq!((pre.epochs, pre.lr_initial, pre.lr_halving_period), (60, 1e-3, 10));

    for bad in [
        AdaptConfig { lr_classifier: 0.0, ..AdaptConfig::default() },
        AdaptConfig { eta: -1.0, ..AdaptConfig::default() },
        AdaptConfig { xi: -0.1, ..AdaptConfig::default() },
        AdaptConfig { batch_size: 0, ..AdaptConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn pretrain_lr_schedule_halves() {
    let cfg = PretrainConfig::default();
    for e in 0..10 {
        assert_eq!(cfg.lr_at_epoch(e), 1e-3);
    }
    for e in 10..20 {
        assert_eq!(cfg.lr_at_epoch(e), 5e-4);
    }
    assert_eq!(cfg.lr_at_epoch(20), 2.5e-4);
}

#[test]
fn early_stop_boundaries() {
    assert!(!early_stop_check(0.019, 0.02));
    assert!(early_stop_check(0.021, 0.02));
    assert!(!early_stop_check(0.02, 0.02), "strict inequality");
    assert!(!early_stop_check(1e9, f64::INFINITY));
    assert!(early_stop_check(1e-9, 0.0));
}

#[test]
fn early_stop_monotone_in_xi() {
    // raising xi never makes a fixed loss sequence stop earlier
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for _ in 0..100 {
        let seq: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..0.1)).collect();
        let (lo, hi) = {
            let a = rng.gen_range(0.0..0.1);
            let b = a + rng.gen_range(0.0..0.05);
            (a, b)
        };
        let stop_at = |xi: f64| seq.iter().position(|&l| early_stop_check(l, xi)).unwrap_or(seq.len());
        assert!(stop_at(hi) >= stop_at(lo));
    }
}

#[test]
fn seed_env_override() {
    std::env::remove_var("MDDLAB_SEED");
    assert_eq!(seed_from_env(7), 7);
    std::env::set_var("MDDLAB_SEED", "123");
    assert_eq!(seed_from_env(7), 123);
    std::env::set_var("MDDLAB_SEED", "not-a-number");
    assert_eq!(seed_from_env(7), 7);
    std::env::remove_var("MDDLAB_SEED");
}

#[test]
fn pretrain_reduces_loss_and_ignores_adversary() {
    let pair = tiny_pair(1);
    let mut model = build_model(tiny_config(), 1).unwrap();
    let cfg = PretrainConfig {
        epochs: 2,
        lr_initial: 1e-3,
        batch_size: 4,
        seed: 1,
        ..PretrainConfig::default()
    };

    let eval_loss = |m: &crate::model::ModelSplit| {
        let idx: Vec<usize> = (0..pair.source.len()).collect();
        let x = pair.source.image_batch(&idx);
        let y = pair.source.label_batch(&idx).unwrap();
        let scores = m.forward_scores(Part::Classifier, &x).unwrap();
        classifier_loss(&scores, &y).unwrap()
    };
    let before = eval_loss(&model);
    let adv_before: Vec<Vec<f32>> = model
        .arena()
        .iter()
        .filter(|(_, p)| p.part == Part::Adversary)
        .map(|(_, p)| p.value.iter().copied().collect())
        .collect();

    let curve = pretrain(&mut model, &pair.source, &cfg, "t").unwrap();
    assert_eq!(curve.len(), 2);
    assert!(curve.iter().all(|r| r.phase == "pretrain" && !r.stopped));
    let after = eval_loss(&model);
    assert!(after < before, "loss must drop: {before} -> {after}");

    let adv_after: Vec<Vec<f32>> = model
        .arena()
        .iter()
        .filter(|(_, p)| p.part == Part::Adversary)
        .map(|(_, p)| p.value.iter().copied().collect())
        .collect();
    assert_eq!(adv_before, adv_after, "adversary must be untouched, bit-exact");

    // unlabeled split is rejected
    let mut m2 = build_model(tiny_config(), 1).unwrap();
    assert!(matches!(
        pretrain(&mut m2, &pair.target, &cfg, "t"),
        Err(AdaptError::MissingLabels)
    ));
}

#[test]
fn adaptation_respects_freeze_and_stop_reasons() {
    let pair = tiny_pair(2);
    let mut model = build_model(tiny_config(), 2).unwrap();
    let pre = PretrainConfig {
        epochs: 1,
        batch_size: 4,
        seed: 2,
        ..PretrainConfig::default()
    };
    pretrain(&mut model, &pair.source, &pre, "t").unwrap();

    let cfg = AdaptConfig {
        freeze_spec: vec![BlockId::encoder(0)],
        xi: f64::INFINITY,
        max_epochs: 2,
        batch_size: 4,
        seed: 2,
        ..AdaptConfig::default()
    };
    let frozen_before: Vec<Vec<f32>> = model
        .arena()
        .iter()
        .filter(|(_, p)| p.part == Part::Encoder && p.block == 0)
        .map(|(_, p)| p.value.iter().copied().collect())
        .collect();
    let outcome = run_adaptation(&mut model, &pair.source, &pair.target, &cfg, "t").unwrap();
    assert_eq!(outcome.stop_reason, StopReason::MaxEpochs);
    assert_eq!(outcome.curve.len(), 2);
    assert!(outcome.curve.iter().all(|r| r.phase == "adapt"));
    assert!(!outcome.steps.is_empty());
    let frozen_after: Vec<Vec<f32>> = model
        .arena()
        .iter()
        .filter(|(_, p)| p.part == Part::Encoder && p.block == 0)
        .map(|(_, p)| p.value.iter().copied().collect())
        .collect();
    assert_eq!(frozen_before, frozen_after, "frozen blocks must not move, bit-exact");

    // xi = 0: any positive adversary source loss stops at the first step
    let mut m2 = build_model(tiny_config(), 2).unwrap();
    pretrain(&mut m2, &pair.source, &pre, "t").unwrap();
    let cfg0 = AdaptConfig { xi: 0.0, ..cfg.clone() };
    let outcome = run_adaptation(&mut m2, &pair.source, &pair.target, &cfg0, "t").unwrap();
    assert_eq!(outcome.stop_reason, StopReason::EarlyStop);
    assert_eq!(outcome.steps.len(), 1);
    assert!(outcome.curve.last().unwrap().stopped);
}

#[test]
fn eta_zero_step_equals_classifier_only_step() {
    // degenerate eta = 0: psi must receive zero adversarial gradient, so the
    // encoder/decoder/classifier update matches a pure Eq.-2 step bit-exactly
    let pair = tiny_pair(3);
    let idx = [0usize, 1, 2, 3];
    let xs = pair.source.image_batch(&idx);
    let ys = pair.source.label_batch(&idx).unwrap();
    let xt = pair.target.image_batch(&idx);

    let cfg = AdaptConfig {
        eta: 0.0,
        batch_size: 4,
        ..AdaptConfig::default()
    };

    let mut a = build_model(tiny_config(), 3).unwrap();
    a.copy_head();
    let mut opt_a = Adam::new(a.arena());
    adapt_step(&mut a, &mut opt_a, &xs, &ys, &xt, &cfg, 0).unwrap();

    let mut b = build_model(tiny_config(), 3).unwrap();
    b.copy_head();
    let mut opt_b = Adam::new(b.arena());
    b.arena_mut().zero_grads();
    let (feats, psi_cache) = b.forward_features_cached(&xs).unwrap();
    let (scores, head_cache) = b.forward_head_cached(Part::Classifier, &feats).unwrap();
    let (_, dscores) = crate::losses::classifier_loss_grad(&scores, &ys).unwrap();
    let dfeats = b.backward_head(Part::Classifier, &head_cache, dscores).unwrap();
    b.backward_features(&psi_cache, dfeats);
    opt_b.step(b.arena_mut(), |p| cfg.lr_for(p.part));

    for ((_, pa), (_, pb)) in a.arena().iter().zip(b.arena().iter()) {
        assert_eq!(pa.name, pb.name);
        if pa.part == Part::Adversary {
            continue; // only the adversary trains off its own loss here
        }
        assert_eq!(
            pa.value.as_slice().unwrap(),
            pb.value.as_slice().unwrap(),
            "{} must match bit-exactly",
            pa.name
        );
    }
}

#[test]
fn per_part_update_magnitudes_follow_learning_rates() {
    let cfg = AdaptConfig::default();
    let mut model = build_model(tiny_config(), 4).unwrap();
    for (_, p) in model.arena_mut().iter_mut() {
        p.grad.fill(1.0); // identical gradients injected into every part
    }
    let before: Vec<(Part, f32)> = model
        .arena()
        .iter()
        .map(|(_, p)| (p.part, *p.value.iter().next().unwrap()))
        .collect();
    let mut opt = Adam::new(model.arena());
    opt.step(model.arena_mut(), |p| cfg.lr_for(p.part));

    let mut max_delta = std::collections::HashMap::new();
    for ((part, b), (_, p)) in before.iter().zip(model.arena().iter()) {
        let d = (p.value.iter().next().unwrap() - b).abs();
        let e = max_delta.entry(*part).or_insert(0.0f32);
        *e = e.max(d);
    }
    let (dc, de, dd, da) = (
        max_delta[&Part::Classifier],
        max_delta[&Part::Encoder],
        max_delta[&Part::Decoder],
        max_delta[&Part::Adversary],
    );
    assert!(dc > de && de > dd && dd > da, "expected {dc} > {de} > {dd} > {da}");
}

#[test]
fn adapt_step_rejects_mismatched_spatial_sizes() {
    let mut model = build_model(tiny_config(), 5).unwrap();
    let mut opt = Adam::new(model.arena());
    let xs = Array4::<f32>::zeros((1, 1, 16, 16));
    let ys = ndarray::Array3::<u8>::zeros((1, 16, 16));
    let xt = Array4::<f32>::zeros((1, 1, 8, 8));
    let cfg = AdaptConfig::default();
    assert!(adapt_step(&mut model, &mut opt, &xs, &ys, &xt, &cfg, 0).is_err());
}
