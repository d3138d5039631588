use std::collections::BTreeMap;

use proptest::prelude::*;

use torpido_core::domain::{build_instance, generate_instance, DomainKind, InstanceSpec, NAV_GOAL_CHANNEL};
use torpido_core::eval::{alpha, evaluate_policy, evaluate_random, optimal_value, random_policy_value, RunManifest};
use torpido_core::networks::PreparedInstance;
use torpido_core::training::new_bundle;
use torpido_core::{ModelBundle, RngStream, State, TrainConfig};

/// 1×2 corridor, robot on the left, goal on the right.
fn corridor() -> InstanceSpec {
    let mut features = vec![0.0; 4];
    features[2 + NAV_GOAL_CHANNEL] = 1.0;
    build_instance(
        DomainKind::Navigation,
        "corridor".into(),
        2,
        Some((1, 2)),
        vec![0, 1, 1, 0],
        features,
        BTreeMap::new(),
        State::one_hot(2, 0),
        40,
        0.99,
    )
    .unwrap()
}

fn zero_bundle(spec: &InstanceSpec) -> ModelBundle {
    let cfg = TrainConfig::default();
    let sig = new_bundle(std::slice::from_ref(spec), &cfg).unwrap().signature();
    ModelBundle::from_signature(&sig, cfg.optimizer())
}

#[test]
fn always_right_reaches_the_goal_in_one_step() {
    let spec = corridor();
    let mut bundle = zero_bundle(&spec);
    let bias = bundle.decoder("corridor").unwrap().output.bias;
    bundle.param_mut(bias).data_mut()[3] = 1.0;
    let inst = PreparedInstance::new(spec.clone()).unwrap();
    let est = evaluate_policy(&bundle, &inst, 10, &mut RngStream::new(0), true).unwrap();
    assert_eq!(est.mean, -1.0);
    assert_eq!(est.stderr, 0.0);
    assert_eq!(optimal_value(&spec).unwrap(), -1.0);
}

#[test]
fn always_left_never_arrives() {
    let spec = corridor();
    let mut bundle = zero_bundle(&spec);
    let bias = bundle.decoder("corridor").unwrap().output.bias;
    bundle.param_mut(bias).data_mut()[2] = 1.0;
    let inst = PreparedInstance::new(spec.clone()).unwrap();
    let est = evaluate_policy(&bundle, &inst, 3, &mut RngStream::new(0), true).unwrap();
    let expected: f64 = -(0..40).map(|t| 0.99f64.powi(t)).sum::<f64>();
    assert!((est.mean - expected).abs() < 1e-9);
}

#[test]
fn evaluation_is_reproducible() {
    let spec = generate_instance(DomainKind::SysAdmin, 5, 2).unwrap();
    let bundle = new_bundle(std::slice::from_ref(&spec), &TrainConfig::default()).unwrap();
    let inst = PreparedInstance::new(spec.clone()).unwrap();
    let run = || evaluate_policy(&bundle, &inst, 20, &mut RngStream::new(4), false).unwrap();
    assert_eq!(run(), run());
    let rnd = || evaluate_random(&spec, 20, &mut RngStream::new(4)).unwrap();
    assert_eq!(rnd(), rnd());
}

#[test]
fn sampled_random_matches_the_exact_value() {
    let spec = generate_instance(DomainKind::GameOfLife, 4, 9).unwrap();
    let est = evaluate_random(&spec, 3000, &mut RngStream::new(1)).unwrap();
    let exact = random_policy_value(&spec).unwrap();
    assert!((est.mean - exact).abs() < 4.0 * est.stderr.max(1e-9), "{} vs {exact}", est.mean);
}

proptest! {
    #[test]
    fn alpha_is_invariant_under_positive_affine_maps(
        lo in -100.0f64..100.0,
        span in 0.1f64..100.0,
        v in -300.0f64..300.0,
        scale in 0.01f64..50.0,
        shift in -1000.0f64..1000.0,
    ) {
        let mut a = RunManifest::default();
        a.observe("x", lo);
        a.observe("x", lo + span);
        let mut b = RunManifest::default();
        b.observe("x", scale * lo + shift);
        b.observe("x", scale * (lo + span) + shift);
        let x = alpha(v, &a, "x").unwrap();
        let y = alpha(scale * v + shift, &b, "x").unwrap();
        prop_assert!((x.value - y.value).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&x.value));
    }
}
