use proptest::collection::vec;
use proptest::prelude::*;

use torpido_core::domain::{generate_instance, generate_instances, DomainKind};
use torpido_core::networks::{Graph, PreparedInstance};
use torpido_core::training::{
    a3c_baseline, learning_phase, n_step_returns, near_zero_shot, transfer_decoder_training, NoClock,
};
use torpido_core::{ModelBundle, RngStream, TrainConfig, Variant};

fn quick() -> TrainConfig {
    TrainConfig {
        workers_per_instance: 1,
        total_env_steps: 400,
        eval_interval: 200,
        eval_episodes: 2,
        decoder_pairs: 300,
        decoder_max_updates: 50,
        embed: 6,
        hidden: 12,
        ..TrainConfig::default()
    }
}

fn shared(bundle: &ModelBundle, target: &str) -> Vec<(String, Vec<f64>)> {
    bundle
        .entries()
        .filter(|(name, _, _)| !name.starts_with(&format!("decoder[{target}].")))
        .map(|(name, value, _)| (name.to_string(), value.data().to_vec()))
        .collect()
}

#[test]
fn decoder_training_leaves_everything_else_untouched() {
    let specs = generate_instances(DomainKind::SysAdmin, 4, 3, 11).unwrap();
    let (mut bundle, _) = learning_phase(&specs[..2], &quick(), "t", &NoClock).unwrap();
    let before = shared(&bundle, &specs[2].instance_id);
    let report = transfer_decoder_training(&mut bundle, &specs[2], &quick()).unwrap();
    assert!(report.pairs_generated > 0);
    assert_eq!(shared(&bundle, &specs[2].instance_id), before);
    let decoder = bundle.decoder_params(&specs[2].instance_id);
    assert!(!decoder.is_empty());
}

#[test]
fn single_source_without_auxiliaries_is_the_baseline() {
    let target = generate_instance(DomainKind::SysAdmin, 4, 5).unwrap();
    let cfg = TrainConfig {
        lambda: 0.0,
        lambda_tr: 0.0,
        use_sad_tr: false,
        use_ic: false,
        ..quick()
    };
    let (a, out_a) = learning_phase(std::slice::from_ref(&target), &cfg, "t", &NoClock).unwrap();
    let (b, out_b) = a3c_baseline(&target, &cfg, "t", &NoClock).unwrap();
    assert_eq!(out_a.env_steps, out_b.env_steps);
    let returns = |o: &torpido_core::training::PhaseOutput| o.curves.iter().map(|r| r.mean_return).collect::<Vec<_>>();
    assert_eq!(returns(&out_a), returns(&out_b));
    for ((na, va, _), (nb, vb, _)) in a.entries().zip(b.entries()) {
        assert_eq!(na, nb);
        assert_eq!(va, vb, "{na}");
    }
}

#[test]
fn gcn_variant_ignores_auxiliary_weights() {
    let specs = generate_instances(DomainKind::SysAdmin, 4, 2, 3).unwrap();
    let run = |lambda, lambda_tr| {
        let mut cfg = TrainConfig {
            lambda,
            lambda_tr,
            ..quick()
        };
        Variant::Gcn.apply(&mut cfg);
        let (bundle, _) = learning_phase(&specs, &cfg, "t", &NoClock).unwrap();
        bundle.entries().map(|(_, v, _)| v.data().to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(run(0.1, 1.0), run(3.0, 40.0));
}

#[test]
fn gcn_variant_leaves_the_target_decoder_untrained() {
    let specs = generate_instances(DomainKind::SysAdmin, 4, 3, 8).unwrap();
    let mut cfg = quick();
    Variant::Gcn.apply(&mut cfg);
    let (mut bundle, _) = learning_phase(&specs[..2], &cfg, "t", &NoClock).unwrap();
    let id = specs[2].instance_id.clone();
    let mut fresh = bundle.clone();
    fresh.add_decoder(&id, cfg.seed).unwrap();
    let report = near_zero_shot(&mut bundle, &specs[2], &cfg).unwrap();
    assert_eq!(report.pairs_generated, 0);
    let values = |m: &ModelBundle| {
        m.decoder_params(&id)
            .iter()
            .map(|&p| m.param(p).clone())
            .collect::<Vec<_>>()
    };
    assert!(!values(&bundle).is_empty());
    assert_eq!(values(&bundle), values(&fresh));
}

#[test]
fn learning_phase_is_reproducible() {
    let specs = generate_instances(DomainKind::GameOfLife, 4, 2, 21).unwrap();
    let (a, oa) = learning_phase(&specs, &quick(), "t", &NoClock).unwrap();
    let (b, ob) = learning_phase(&specs, &quick(), "t", &NoClock).unwrap();
    assert_eq!(oa.curves, ob.curves);
    assert!(a.entries().zip(b.entries()).all(|(x, y)| x.1 == y.1));
}

#[test]
fn mismatched_sources_are_rejected() {
    let a = generate_instance(DomainKind::SysAdmin, 4, 0).unwrap();
    let b = generate_instance(DomainKind::SysAdmin, 5, 0).unwrap();
    assert!(learning_phase(&[a, b], &quick(), "t", &NoClock).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn returns_satisfy_the_recursion(rewards in vec(-5.0f64..5.0, 0..30), bootstrap in -10.0f64..10.0, gamma in 0.0f64..1.0) {
        let g = n_step_returns(&rewards, bootstrap, gamma);
        prop_assert_eq!(g.len(), rewards.len());
        for t in 0..rewards.len() {
            let next = if t + 1 < rewards.len() { g[t + 1] } else { bootstrap };
            prop_assert!((g[t] - (rewards[t] + gamma * next)).abs() < 1e-9);
        }
    }

    #[test]
    fn decoder_and_classifier_outputs_are_distributions(seed in any::<u64>(), pick in any::<u64>(), lambda in 0.0f64..2.0) {
        let specs = generate_instances(DomainKind::SysAdmin, 5, 3, seed % 1000).unwrap();
        let cfg = TrainConfig { seed, ..quick() };
        let bundle = torpido_core::training::new_bundle(&specs, &cfg).unwrap();
        let inst = PreparedInstance::new(specs[0].clone()).unwrap();
        let s = torpido_core::State::from_index(5, pick % 32);
        let mut g = Graph::new(&bundle);
        let e = g.encode_state(&inst, &s).unwrap();
        let z = g.policy(e).unwrap();
        let p = g.decode(inst.id(), &s, z).unwrap();
        let c = g.classify(z, lambda).unwrap();
        for v in [p, c] {
            let d = g.tape.value(v).data();
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(d.iter().all(|&x| x >= 0.0));
        }
        let mut rng = RngStream::new(seed);
        let probs = bundle.action_probs(&inst, &s).unwrap();
        prop_assert!(rng.categorical(&probs) < specs[0].num_actions());
    }
}
