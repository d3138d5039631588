use proptest::prelude::*;

use torpido_core::domain::{build_instance, generate_instance, DomainKind, InstanceSpec, State};
use torpido_core::dynamics::{
    action_posterior, enumerate_successors, next_var_prob, reward, rollout, step, transition_prob, DynamicsError,
};
use torpido_core::RngStream;

fn sysadmin(n: usize, adjacency: Vec<u8>, init: State) -> InstanceSpec {
    let constants = [("a", 0.45), ("b", 0.5), ("d", 0.1)]
        .iter()
        .map(|&(k, v)| (k.to_string(), v))
        .collect();
    build_instance(DomainKind::SysAdmin, "fixture".into(), n, None, adjacency, vec![], constants, init, 40, 0.99)
        .unwrap()
}

fn pair() -> InstanceSpec {
    sysadmin(2, vec![0, 1, 1, 0], State::zeros(2))
}

fn st(bits: &[u8]) -> State {
    State::from_bits(bits).unwrap()
}

#[test]
fn sysadmin_on_probability_with_all_neighbors_up() {
    let spec = pair();
    let p = next_var_prob(&spec, &st(&[1, 1]), 2, 0).unwrap();
    assert!((p - 0.95).abs() < 1e-15);
}

#[test]
fn reboot_forces_the_computer_on() {
    let spec = pair();
    for s in [[0, 0], [0, 1], [1, 0], [1, 1]] {
        assert_eq!(next_var_prob(&spec, &st(&s), 0, 0).unwrap(), 1.0);
    }
}

#[test]
fn noiseless_birth() {
    let mut spec = generate_instance(DomainKind::GameOfLife, 9, 0).unwrap();
    spec.constants.insert("p_noise".into(), 0.0);
    // centre cell of a 3×3 grid, three live neighbours
    let s = st(&[1, 1, 1, 0, 0, 0, 0, 0, 0]);
    assert_eq!(next_var_prob(&spec, &s, 9, 4).unwrap(), 1.0);
}

#[test]
fn joint_probabilities_of_the_pair_fixture() {
    let spec = pair();
    let (s, s2) = (st(&[0, 0]), st(&[1, 0]));
    let p = |a| transition_prob(&spec, &s, a, &s2).unwrap();
    assert!((p(0) - 0.9).abs() < 1e-15);
    assert_eq!(p(1), 0.0);
    assert!((p(2) - 0.09).abs() < 1e-15);
}

#[test]
fn worked_posterior() {
    let post = action_posterior(&pair(), &st(&[0, 0]), &st(&[1, 0])).unwrap();
    let expected = [10.0 / 11.0, 0.0, 1.0 / 11.0];
    for (p, e) in post.probs.iter().zip(expected) {
        assert!((p - e).abs() < 1e-12);
    }
    assert_eq!(post.best_actions(), vec![0]);
}

#[test]
fn noop_successor_expansion() {
    let mut succ = enumerate_successors(&pair(), &st(&[0, 0]), 2).unwrap();
    succ.sort_by_key(|(s, _)| s.to_index());
    let probs: Vec<f64> = succ.iter().map(|(_, p)| *p).collect();
    let expected = [0.81, 0.09, 0.09, 0.01];
    assert_eq!(succ.len(), 4);
    for (p, e) in probs.iter().zip(expected) {
        assert!((p - e).abs() < 1e-15);
    }
}

#[test]
fn unreachable_pair_is_rejected() {
    // with d = 0 a single reboot cannot bring two computers up
    let mut no_d = sysadmin(3, vec![0, 1, 0, 1, 0, 1, 0, 1, 0], State::zeros(3));
    no_d.constants.insert("d".into(), 0.0);
    let err = action_posterior(&no_d, &st(&[0, 0, 0]), &st(&[1, 1, 0])).unwrap_err();
    assert!(matches!(err, DynamicsError::UnreachableSuccessor));
}

#[test]
fn deterministic_move_has_one_hot_posterior() {
    let spec = generate_instance(DomainKind::Navigation, 9, 2).unwrap();
    let start = spec.initial_state.clone();
    let cell = start.one_hot_index().unwrap();
    // moving down from the bottom row is a clamp, as is every move that stays
    let stays: Vec<usize> = (0..4)
        .filter(|&a| torpido_core::dynamics::navigation_move(&spec, cell, a) == cell)
        .collect();
    let post = action_posterior(&spec, &start, &start).unwrap();
    for a in 0..4 {
        let expected = if stays.contains(&a) { 1.0 / stays.len() as f64 } else { 0.0 };
        assert!((post.probs[a] - expected).abs() < 1e-12);
    }
}

#[test]
fn rewards() {
    let spec = sysadmin(3, vec![0, 1, 0, 1, 0, 1, 0, 1, 0], State::zeros(3));
    assert_eq!(reward(&spec, &st(&[1, 0, 1])), 2.0);
    let gol = generate_instance(DomainKind::GameOfLife, 4, 0).unwrap();
    assert_eq!(reward(&gol, &State::zeros(4)), 0.0);
    let nav = generate_instance(DomainKind::Navigation, 6, 1).unwrap();
    let goal = nav.goal_cell().unwrap();
    assert_eq!(reward(&nav, &State::one_hot(6, goal)), 0.0);
    assert_eq!(reward(&nav, &State::zeros(6)), -1.0);
}

#[test]
fn rollout_is_reproducible() {
    let spec = generate_instance(DomainKind::SysAdmin, 6, 4).unwrap();
    let run = |seed| rollout(&spec, |_, rng| rng.below(7), &mut RngStream::new(seed)).unwrap();
    let (a, b) = (run(3), run(3));
    assert_eq!(a.states, b.states);
    assert_eq!(a.rewards, b.rewards);
    assert_eq!(a.states.len(), a.actions.len() + 1);
    assert_eq!(a.rewards.len(), a.actions.len());
    assert!(a.actions.len() <= spec.horizon);
}

fn domain() -> impl Strategy<Value = DomainKind> {
    prop_oneof![
        Just(DomainKind::SysAdmin),
        Just(DomainKind::GameOfLife),
        Just(DomainKind::Navigation)
    ]
}

fn instance() -> impl Strategy<Value = InstanceSpec> {
    (domain(), 2usize..=9, any::<u64>()).prop_filter_map("grid size", |(k, n, seed)| generate_instance(k, n, seed).ok())
}

fn state_in(spec: &InstanceSpec, pick: u64) -> State {
    match spec.domain {
        DomainKind::Navigation => State::one_hot(spec.num_vars, pick as usize % spec.num_vars),
        _ => State::from_index(spec.num_vars, pick % (1 << spec.num_vars)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn successors_are_normalized(spec in instance(), pick in any::<u64>(), a in any::<usize>()) {
        let s = state_in(&spec, pick);
        let a = a % spec.num_actions();
        let total: f64 = enumerate_successors(&spec, &s, a).unwrap().iter().map(|(_, p)| p).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_is_proportional_to_the_joint(spec in instance(), pick in any::<u64>(), a in any::<usize>(), seed in any::<u64>()) {
        let s = state_in(&spec, pick);
        let a = a % spec.num_actions();
        let s2 = step(&spec, &s, a, &mut RngStream::new(seed)).unwrap().next;
        let post = action_posterior(&spec, &s, &s2).unwrap();
        let joint: Vec<f64> = (0..spec.num_actions()).map(|b| transition_prob(&spec, &s, b, &s2).unwrap()).collect();
        let z: f64 = joint.iter().sum();
        prop_assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (p, j) in post.probs.iter().zip(&joint) {
            prop_assert!((p - j / z).abs() < 1e-12);
        }
    }

    #[test]
    fn popcount_reward(n in 2usize..12, index in any::<u64>(), seed in any::<u64>()) {
        let spec = generate_instance(DomainKind::SysAdmin, n, seed).unwrap();
        let s = State::from_index(n, index % (1 << n));
        prop_assert_eq!(reward(&spec, &s), s.count_ones() as f64);
    }

    #[test]
    fn generation_is_pure(k in domain(), n in 2usize..16, seed in any::<u64>()) {
        let a = generate_instance(k, n, seed);
        prop_assert_eq!(a, generate_instance(k, n, seed));
    }
}
