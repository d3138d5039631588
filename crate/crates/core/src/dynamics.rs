//! Exact factored transition model, reward, sampler and action posterior.
//!
//! Rewards follow the planning convention: the reward of a step is the reward
//! of the state the action is taken in. Navigation's goal and drowned states
//! are absorbing; a step that enters one reports `terminal`, and the rest of
//! the horizon is accounted for by [`terminal_tail`].

use alloc::vec;
use alloc::vec::Vec;

use crate::domain::{DomainKind, InstanceSpec, State, NAV_DROWN_CHANNEL};
use crate::rng::RngStream;

/// Largest instance `enumerate_successors` accepts.
pub const MAX_ENUMERATION_VARS: usize = 20;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum DynamicsError {
    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("state has {found} bits, instance has {expected} variables")]
    StateLength { expected: usize, found: usize },
    #[error("navigation state must be one-hot or all zeros")]
    InvalidNavigationState,
    #[error("unreachable successor")]
    UnreachableSuccessor,
    #[error("instance too large to enumerate ({0} variables, limit {MAX_ENUMERATION_VARS})")]
    InstanceTooLarge(usize),
}

/// Normalized distribution over actions explaining a transition.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionPosterior {
    pub probs: Vec<f64>,
}

impl ActionPosterior {
    /// Indices of the most probable actions (ties included).
    pub fn best_actions(&self) -> Vec<usize> {
        let max = self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..self.probs.len())
            .filter(|&a| self.probs[a] >= max - 1e-12)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub states: Vec<State>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminated_early: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: State,
    pub reward: f64,
    pub terminal: bool,
}

fn check_state(spec: &InstanceSpec, s: &State) -> Result<(), DynamicsError> {
    if s.len() != spec.num_vars {
        return Err(DynamicsError::StateLength {
            expected: spec.num_vars,
            found: s.len(),
        });
    }
    if spec.domain == DomainKind::Navigation && s.count_ones() > 1 {
        return Err(DynamicsError::InvalidNavigationState);
    }
    Ok(())
}

fn check_action(spec: &InstanceSpec, a: usize) -> Result<(), DynamicsError> {
    if a >= spec.num_actions() {
        return Err(DynamicsError::IndexOutOfRange {
            what: "action",
            index: a,
            len: spec.num_actions(),
        });
    }
    Ok(())
}

/// Cell the robot moves into from `cell` under navigation action `a`,
/// clamped at the grid border.
pub fn navigation_move(spec: &InstanceSpec, cell: usize, a: usize) -> usize {
    let (rows, cols) = spec.grid.unwrap_or((1, spec.num_vars));
    let (r, c) = (cell / cols, cell % cols);
    let (r, c) = match a {
        0 => (r.saturating_sub(1), c),
        1 => ((r + 1).min(rows - 1), c),
        2 => (r, c.saturating_sub(1)),
        _ => (r, (c + 1).min(cols - 1)),
    };
    r * cols + c
}

/// `P(x_i' = 1 | s, a)` for the current instance.
pub fn next_var_prob(spec: &InstanceSpec, s: &State, a: usize, i: usize) -> Result<f64, DynamicsError> {
    check_state(spec, s)?;
    check_action(spec, a)?;
    if i >= spec.num_vars {
        return Err(DynamicsError::IndexOutOfRange {
            what: "variable",
            index: i,
            len: spec.num_vars,
        });
    }
    Ok(var_prob_unchecked(spec, s, a, i))
}

fn var_prob_unchecked(spec: &InstanceSpec, s: &State, a: usize, i: usize) -> f64 {
    let n = spec.num_vars;
    match spec.domain {
        DomainKind::SysAdmin => {
            if a == i {
                return 1.0;
            }
            if s.get(i) {
                let (mut on, mut total) = (0usize, 0usize);
                for j in spec.neighbors(i) {
                    total += 1;
                    on += s.get(j) as usize;
                }
                let p = spec.constant("a") + spec.constant("b") * (1 + on) as f64 / (1 + total) as f64;
                p.clamp(0.0, 1.0)
            } else {
                spec.constant("d")
            }
        }
        DomainKind::GameOfLife => {
            if a == i && a < n {
                return 1.0;
            }
            let live = spec.neighbors(i).filter(|&j| s.get(j)).count();
            let conway = if s.get(i) { live == 2 || live == 3 } else { live == 3 };
            let noise = spec.constant("p_noise");
            if conway {
                1.0 - noise
            } else {
                noise
            }
        }
        DomainKind::Navigation => match navigation_successor(spec, s, a) {
            NavSuccessor::Drowned => 0.0,
            NavSuccessor::Stay(cell) => (cell == i) as u8 as f64,
            NavSuccessor::Move { dest, drown } => {
                if dest == i {
                    1.0 - drown
                } else {
                    0.0
                }
            }
        },
    }
}

enum NavSuccessor {
    /// Absorbing drowned state.
    Drowned,
    /// Absorbing goal.
    Stay(usize),
    Move { dest: usize, drown: f64 },
}

fn navigation_successor(spec: &InstanceSpec, s: &State, a: usize) -> NavSuccessor {
    match s.one_hot_index() {
        None => NavSuccessor::Drowned,
        Some(cell) if Some(cell) == spec.goal_cell() => NavSuccessor::Stay(cell),
        Some(cell) => {
            let dest = navigation_move(spec, cell, a);
            NavSuccessor::Move {
                dest,
                drown: spec.node_feature(dest, NAV_DROWN_CHANNEL),
            }
        }
    }
}

/// Exact `Pr(s, a, s2)`.
pub fn transition_prob(spec: &InstanceSpec, s: &State, a: usize, s2: &State) -> Result<f64, DynamicsError> {
    check_state(spec, s)?;
    check_state(spec, s2)?;
    check_action(spec, a)?;
    Ok(transition_prob_unchecked(spec, s, a, s2))
}

fn transition_prob_unchecked(spec: &InstanceSpec, s: &State, a: usize, s2: &State) -> f64 {
    match spec.domain {
        DomainKind::Navigation => match navigation_successor(spec, s, a) {
            NavSuccessor::Drowned => (s2.count_ones() == 0) as u8 as f64,
            NavSuccessor::Stay(cell) => (s2.one_hot_index() == Some(cell)) as u8 as f64,
            NavSuccessor::Move { dest, drown } => match s2.one_hot_index() {
                Some(c) if c == dest => 1.0 - drown,
                Some(_) => 0.0,
                None if s2.count_ones() == 0 => drown,
                None => 0.0,
            },
        },
        _ => {
            let mut p = 1.0;
            for i in 0..spec.num_vars {
                let q = var_prob_unchecked(spec, s, a, i);
                p *= if s2.get(i) { q } else { 1.0 - q };
                if p == 0.0 {
                    break;
                }
            }
            p
        }
    }
}

/// `p(a) = Pr(s,a,s2) / sum_a' Pr(s,a',s2)`.
pub fn action_posterior(spec: &InstanceSpec, s: &State, s2: &State) -> Result<ActionPosterior, DynamicsError> {
    check_state(spec, s)?;
    check_state(spec, s2)?;
    let mut probs: Vec<f64> = (0..spec.num_actions())
        .map(|a| transition_prob_unchecked(spec, s, a, s2))
        .collect();
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(DynamicsError::UnreachableSuccessor);
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(ActionPosterior { probs })
}

/// Reward of being in `s`.
pub fn reward(spec: &InstanceSpec, s: &State) -> f64 {
    match spec.domain {
        DomainKind::SysAdmin | DomainKind::GameOfLife => s.count_ones() as f64,
        DomainKind::Navigation => match (s.one_hot_index(), spec.goal_cell()) {
            (Some(c), Some(g)) if c == g => 0.0,
            _ => -1.0,
        },
    }
}

/// Whether `s` is absorbing (Navigation goal or drowned).
pub fn is_terminal(spec: &InstanceSpec, s: &State) -> bool {
    spec.domain == DomainKind::Navigation
        && match s.one_hot_index() {
            None => true,
            Some(c) => Some(c) == spec.goal_cell(),
        }
}

/// Samples one transition. Draws exactly one uniform per state variable.
pub fn step(spec: &InstanceSpec, s: &State, a: usize, rng: &mut RngStream) -> Result<StepOutcome, DynamicsError> {
    check_state(spec, s)?;
    check_action(spec, a)?;
    let mut next = State::zeros(spec.num_vars);
    for i in 0..spec.num_vars {
        let p = var_prob_unchecked(spec, s, a, i);
        let u = rng.uniform();
        next.set(i, u < p);
    }
    Ok(StepOutcome {
        reward: reward(spec, s),
        terminal: is_terminal(spec, &next),
        next,
    })
}

/// Discounted reward collected while sitting in absorbing state `s` for
/// `remaining` steps.
pub fn terminal_tail(spec: &InstanceSpec, s: &State, remaining: usize) -> f64 {
    let r = reward(spec, s);
    if r == 0.0 {
        return 0.0;
    }
    let g = spec.discount;
    let factor = if g == 1.0 {
        remaining as f64
    } else {
        (1.0 - libm::pow(g, remaining as f64)) / (1.0 - g)
    };
    r * factor
}

/// All successors with positive probability.
pub fn enumerate_successors(spec: &InstanceSpec, s: &State, a: usize) -> Result<Vec<(State, f64)>, DynamicsError> {
    if spec.num_vars > MAX_ENUMERATION_VARS {
        return Err(DynamicsError::InstanceTooLarge(spec.num_vars));
    }
    check_state(spec, s)?;
    check_action(spec, a)?;
    let probs: Vec<f64> = (0..spec.num_vars).map(|i| var_prob_unchecked(spec, s, a, i)).collect();
    let mut out = vec![(State::zeros(spec.num_vars), 1.0)];
    for (i, &p) in probs.iter().enumerate() {
        if p >= 1.0 {
            for (st, _) in &mut out {
                st.set(i, true);
            }
        } else if p > 0.0 {
            let mut branched = Vec::with_capacity(out.len() * 2);
            for (st, q) in out {
                let mut on = st.clone();
                on.set(i, true);
                branched.push((st, q * (1.0 - p)));
                branched.push((on, q * p));
            }
            out = branched;
        }
    }
    Ok(out)
}

/// Runs one episode from the initial state for at most `horizon` steps.
pub fn rollout<F>(spec: &InstanceSpec, mut policy: F, rng: &mut RngStream) -> Result<Episode, DynamicsError>
where
    F: FnMut(&State, &mut RngStream) -> usize,
{
    let mut states = vec![spec.initial_state.clone()];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut terminated_early = false;
    for t in 0..spec.horizon {
        let s = &states[t];
        let a = policy(s, rng);
        let out = step(spec, s, a, rng)?;
        actions.push(a);
        rewards.push(out.reward);
        states.push(out.next);
        if out.terminal {
            terminated_early = t + 1 < spec.horizon;
            break;
        }
    }
    Ok(Episode {
        states,
        actions,
        rewards,
        terminated_early,
    })
}

/// Discounted return of an episode over the full horizon, including the
/// absorbing tail of an early-terminated episode.
pub fn episode_return(spec: &InstanceSpec, episode: &Episode) -> f64 {
    let g = spec.discount;
    let mut total = 0.0;
    let mut w = 1.0;
    for r in &episode.rewards {
        total += w * r;
        w *= g;
    }
    if episode.terminated_early {
        let last = episode.states.last().expect("episode has states");
        total += w * terminal_tail(spec, last, spec.horizon - episode.rewards.len());
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_instance, grid_adjacency};
    use alloc::collections::BTreeMap;
    use alloc::string::ToString;

    pub(crate) fn sysadmin_pair(d: f64) -> InstanceSpec {
        let mut c = BTreeMap::new();
        c.insert("a".to_string(), 0.45);
        c.insert("b".to_string(), 0.5);
        c.insert("d".to_string(), d);
        build_instance(
            DomainKind::SysAdmin,
            "pair".to_string(),
            2,
            None,
            vec![0, 1, 1, 0],
            Vec::new(),
            c,
            State::ones(2),
            40,
            0.99,
        )
        .unwrap()
    }

    fn st(bits: &[u8]) -> State {
        State::from_bits(bits).unwrap()
    }

    #[test]
    fn sysadmin_on_probability() {
        let spec = sysadmin_pair(0.1);
        let p = next_var_prob(&spec, &st(&[1, 1]), 2, 0).unwrap();
        assert!((p - 0.95).abs() < 1e-15);
        assert_eq!(next_var_prob(&spec, &st(&[0, 1]), 0, 0).unwrap(), 1.0);
        assert_eq!(next_var_prob(&spec, &st(&[0, 0]), 2, 0).unwrap(), 0.1);
    }

    #[test]
    fn sysadmin_transition_examples() {
        let spec = sysadmin_pair(0.1);
        let s = st(&[0, 0]);
        let s2 = st(&[1, 0]);
        assert!((transition_prob(&spec, &s, 0, &s2).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(transition_prob(&spec, &s, 1, &s2).unwrap(), 0.0);
        assert!((transition_prob(&spec, &s, 2, &s2).unwrap() - 0.09).abs() < 1e-15);
    }

    #[test]
    fn posterior_example() {
        let spec = sysadmin_pair(0.1);
        let post = action_posterior(&spec, &st(&[0, 0]), &st(&[1, 0])).unwrap();
        assert!((post.probs[0] - 10.0 / 11.0).abs() < 1e-12);
        assert_eq!(post.probs[1], 0.0);
        assert!((post.probs[2] - 1.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn successor_expansion_for_noop() {
        let spec = sysadmin_pair(0.1);
        let succ = enumerate_successors(&spec, &st(&[0, 0]), 2).unwrap();
        let lookup = |bits: &[u8]| succ.iter().find(|(s, _)| s.bits() == bits).unwrap().1;
        assert!((lookup(&[0, 0]) - 0.81).abs() < 1e-12);
        assert!((lookup(&[1, 0]) - 0.09).abs() < 1e-12);
        assert!((lookup(&[0, 1]) - 0.09).abs() < 1e-12);
        assert!((lookup(&[1, 1]) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn unreachable_successor_is_an_error() {
        let mut spec = sysadmin_pair(0.0);
        spec.constants.insert("d".to_string(), 0.0);
        // both off, d = 0: at most one computer can come on
        let err = action_posterior(&spec, &st(&[0, 0]), &st(&[1, 1])).unwrap_err();
        assert_eq!(err, DynamicsError::UnreachableSuccessor);
    }

    #[test]
    fn game_of_life_birth() {
        let adjacency = grid_adjacency(2, 2, true);
        let mut c = BTreeMap::new();
        c.insert("p_noise".to_string(), 0.0);
        let spec = build_instance(
            DomainKind::GameOfLife,
            "g".to_string(),
            4,
            Some((2, 2)),
            adjacency,
            Vec::new(),
            c,
            State::zeros(4),
            40,
            1.0,
        )
        .unwrap();
        assert_eq!(next_var_prob(&spec, &st(&[0, 1, 1, 1]), 4, 0).unwrap(), 1.0);
        // survival needs 2 or 3 live neighbours
        assert_eq!(next_var_prob(&spec, &st(&[1, 0, 0, 0]), 4, 0).unwrap(), 0.0);
    }

    #[test]
    fn rewards() {
        let spec = crate::domain::generate_instance(DomainKind::SysAdmin, 3, 1).unwrap();
        assert_eq!(reward(&spec, &st(&[1, 0, 1])), 2.0);
        let spec = crate::domain::generate_instance(DomainKind::GameOfLife, 4, 1).unwrap();
        assert_eq!(reward(&spec, &State::zeros(4)), 0.0);
        let nav = crate::domain::generate_instance(DomainKind::Navigation, 4, 1).unwrap();
        let goal = nav.goal_cell().unwrap();
        assert_eq!(reward(&nav, &State::one_hot(4, goal)), 0.0);
        assert_eq!(reward(&nav, &State::zeros(4)), -1.0);
    }

    #[test]
    fn step_is_deterministic_per_seed() {
        let spec = crate::domain::generate_instance(DomainKind::SysAdmin, 6, 2).unwrap();
        let run = || {
            let mut rng = RngStream::new(11);
            let mut s = spec.initial_state.clone();
            let mut trace = Vec::new();
            for t in 0..50 {
                let out = step(&spec, &s, t % 7, &mut rng).unwrap();
                trace.push((out.next.clone(), out.reward));
                s = out.next;
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn out_of_range_indices() {
        let spec = sysadmin_pair(0.1);
        assert!(next_var_prob(&spec, &st(&[0, 0]), 3, 0).is_err());
        assert!(next_var_prob(&spec, &st(&[0, 0]), 0, 2).is_err());
        assert!(transition_prob(&spec, &st(&[0]), 0, &st(&[0, 0])).is_err());
    }

    #[test]
    fn terminal_tail_matches_sum() {
        let nav = crate::domain::generate_instance(DomainKind::Navigation, 6, 3).unwrap();
        let drowned = State::zeros(6);
        let direct: f64 = (0..7).map(|j| -libm::pow(nav.discount, j as f64)).sum();
        assert!((terminal_tail(&nav, &drowned, 7) - direct).abs() < 1e-12);
    }
}
