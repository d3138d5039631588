//! Reference models written directly from the domain rules, independent of
//! the library's dynamics code.

#![allow(dead_code)]

use torpido_core::domain::{DomainKind, InstanceSpec, State};

fn neighbors(spec: &InstanceSpec, i: usize) -> Vec<usize> {
    let n = spec.num_vars;
    (0..n).filter(|&j| spec.adjacency[i * n + j] == 1).collect()
}

fn feature(spec: &InstanceSpec, node: usize, channel: usize) -> f64 {
    spec.node_features[node * spec.feature_channels + channel]
}

/// Probability that bit `i` is on after `a` in a SysAdmin or GameOfLife state.
pub fn bit_on_prob(spec: &InstanceSpec, s: &[u8], a: usize, i: usize) -> f64 {
    if a == i {
        return 1.0;
    }
    let nb = neighbors(spec, i);
    let live = nb.iter().filter(|&&j| s[j] == 1).count();
    match spec.domain {
        DomainKind::SysAdmin => {
            let k = |name: &str| spec.constants[name];
            if s[i] == 1 {
                (k("a") + k("b") * (1.0 + live as f64) / (1.0 + nb.len() as f64)).clamp(0.0, 1.0)
            } else {
                k("d")
            }
        }
        DomainKind::GameOfLife => {
            let survive = if s[i] == 1 { live == 2 || live == 3 } else { live == 3 };
            let noise = spec.constants["p_noise"];
            if survive {
                1.0 - noise
            } else {
                noise
            }
        }
        DomainKind::Navigation => unreachable!("navigation is not factored bitwise"),
    }
}

fn robot(s: &[u8]) -> Option<usize> {
    match s.iter().filter(|&&b| b == 1).count() {
        1 => s.iter().position(|&b| b == 1),
        _ => None,
    }
}

fn goal(spec: &InstanceSpec) -> Option<usize> {
    (0..spec.num_vars).find(|&i| feature(spec, i, 0) > 0.5)
}

/// Destination cell for up, down, left, right with border clamping.
pub fn nav_dest(spec: &InstanceSpec, cell: usize, a: usize) -> usize {
    let (rows, cols) = spec.grid.expect("navigation grid");
    let (r, c) = ((cell / cols) as i64, (cell % cols) as i64);
    let (dr, dc) = [(-1, 0), (1, 0), (0, -1), (0, 1)][a];
    let r2 = (r + dr).clamp(0, rows as i64 - 1);
    let c2 = (c + dc).clamp(0, cols as i64 - 1);
    (r2 * cols as i64 + c2) as usize
}

/// `Pr(s2 | s, a)`.
pub fn transition(spec: &InstanceSpec, s: &[u8], a: usize, s2: &[u8]) -> f64 {
    match spec.domain {
        DomainKind::Navigation => {
            let here = robot(s);
            let there = robot(s2);
            let drowned2 = s2.iter().all(|&b| b == 0);
            match here {
                None => drowned2 as u8 as f64,
                Some(c) if Some(c) == goal(spec) => (s2 == s) as u8 as f64,
                Some(c) => {
                    let dest = nav_dest(spec, c, a);
                    let drown = feature(spec, dest, 1);
                    if there == Some(dest) {
                        1.0 - drown
                    } else if drowned2 {
                        drown
                    } else {
                        0.0
                    }
                }
            }
        }
        _ => (0..spec.num_vars)
            .map(|i| {
                let p = bit_on_prob(spec, s, a, i);
                if s2[i] == 1 {
                    p
                } else {
                    1.0 - p
                }
            })
            .product(),
    }
}

pub fn bits(n: usize, index: usize) -> Vec<u8> {
    (0..n).map(|i| ((index >> i) & 1) as u8).collect()
}

pub fn all_states(n: usize) -> Vec<Vec<u8>> {
    (0..1usize << n).map(|k| bits(n, k)).collect()
}

/// Every state the domain can be in.
pub fn valid_states(spec: &InstanceSpec) -> Vec<Vec<u8>> {
    let n = spec.num_vars;
    match spec.domain {
        DomainKind::Navigation => (0..=n)
            .map(|k| (0..n).map(|i| (i == k) as u8).collect())
            .collect(),
        _ => all_states(n),
    }
}

pub fn reward(spec: &InstanceSpec, s: &[u8]) -> f64 {
    match spec.domain {
        DomainKind::Navigation => {
            if robot(s).is_some() && robot(s) == goal(spec) {
                0.0
            } else {
                -1.0
            }
        }
        _ => s.iter().map(|&b| b as f64).sum(),
    }
}

/// Expected discounted return of the uniform random policy over the full
/// horizon, by propagating the exact state distribution. SysAdmin and
/// GameOfLife only.
pub fn random_policy_return(spec: &InstanceSpec) -> f64 {
    let n = spec.num_vars;
    let states = all_states(n);
    let k = spec.num_actions();
    let mut dist = vec![0.0; states.len()];
    let start = spec.initial_state.bits().iter().enumerate().map(|(i, &b)| (b as usize) << i).sum::<usize>();
    dist[start] = 1.0;
    let mut total = 0.0;
    let mut w = 1.0;
    for _ in 0..spec.horizon {
        let mut next = vec![0.0; states.len()];
        for (x, s) in states.iter().enumerate() {
            if dist[x] == 0.0 {
                continue;
            }
            total += w * dist[x] * reward(spec, s);
            for a in 0..k {
                for (y, s2) in states.iter().enumerate() {
                    next[y] += dist[x] * transition(spec, s, a, s2) / k as f64;
                }
            }
        }
        dist = next;
        w *= spec.discount;
    }
    total
}

pub fn state_of(s: &[u8]) -> State {
    State::from_bits(s).expect("binary state")
}

/// Relative error with a floor on the scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}
