//! Policy evaluation, the α metric, curve records and run manifests.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::domain::{InstanceSpec, State};
use crate::dynamics::{enumerate_successors, episode_return, is_terminal, reward, rollout, terminal_tail, DynamicsError};
use crate::networks::{ModelBundle, NetworkError, PreparedInstance};
use crate::rng::RngStream;

pub const DEFAULT_EVAL_EPISODES: usize = 100;
/// Reachable-state budget of [`optimal_value`].
pub const MAX_PLANNER_STATES: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no episodes requested")]
    NoEpisodes,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("degenerate manifest for `{0}`: V_sup equals V_inf")]
    DegenerateManifest(String),
    #[error("instance `{0}` not in manifest")]
    NotInManifest(String),
    #[error("more than {MAX_PLANNER_STATES} reachable states")]
    TooManyStates,
}

/// Mean and standard error of a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub episodes: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Result<Self, EvalError> {
        if xs.is_empty() {
            return Err(EvalError::NoEpisodes);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let stderr = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            libm::sqrt(var / n)
        } else {
            0.0
        };
        Ok(Self {
            mean,
            stderr,
            episodes: xs.len(),
        })
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Runs `episodes` full-horizon episodes of the bundle's policy on `inst`.
pub fn evaluate_policy(
    bundle: &ModelBundle,
    inst: &PreparedInstance,
    episodes: usize,
    rng: &mut RngStream,
    greedy: bool,
) -> Result<Estimate, EvalError> {
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    bundle.decoder(inst.id())?;
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut failure = None;
        let ep = rollout(
            &inst.spec,
            |s, rng| match bundle.action_probs(inst, s) {
                Ok(p) if greedy => argmax(&p),
                Ok(p) => rng.categorical(&p),
                Err(e) => {
                    failure.get_or_insert(e);
                    0
                }
            },
            rng,
        )?;
        if let Some(e) = failure {
            return Err(e.into());
        }
        returns.push(episode_return(&inst.spec, &ep));
    }
    Estimate::from_samples(&returns)
}

/// Same as [`evaluate_policy`] for the uniformly random policy.
pub fn evaluate_random(spec: &InstanceSpec, episodes: usize, rng: &mut RngStream) -> Result<Estimate, EvalError> {
    if episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let k = spec.num_actions();
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = rollout(spec, |_, rng| rng.below(k), rng)?;
        returns.push(episode_return(spec, &ep));
    }
    Estimate::from_samples(&returns)
}

/// States reachable from the initial state, with the successor lists of
/// every action.
struct ReachableModel {
    states: Vec<State>,
    /// `succ[s][a]` = `(index, prob)` pairs.
    succ: Vec<Vec<Vec<(usize, f64)>>>,
}

fn reachable_model(spec: &InstanceSpec) -> Result<ReachableModel, EvalError> {
    let mut index: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
    let mut states = vec![spec.initial_state.clone()];
    index.insert(spec.initial_state.bits().to_vec(), 0);
    let mut succ = Vec::new();
    let mut next = 0;
    while next < states.len() {
        let s = states[next].clone();
        let mut per_action = Vec::with_capacity(spec.num_actions());
        for a in 0..spec.num_actions() {
            let mut row = Vec::new();
            for (s2, p) in enumerate_successors(spec, &s, a)? {
                let j = match index.get(s2.bits()) {
                    Some(&j) => j,
                    None => {
                        if states.len() >= MAX_PLANNER_STATES {
                            return Err(EvalError::TooManyStates);
                        }
                        index.insert(s2.bits().to_vec(), states.len());
                        states.push(s2);
                        states.len() - 1
                    }
                };
                row.push((j, p));
            }
            per_action.push(row);
        }
        succ.push(per_action);
        next += 1;
    }
    Ok(ReachableModel { states, succ })
}

/// Exact finite-horizon backup over the reachable states; `uniform` averages
/// over actions instead of maximizing.
fn backup(spec: &InstanceSpec, model: &ReachableModel, uniform: bool) -> f64 {
    let g = spec.discount;
    let k = spec.num_actions() as f64;
    let mut v = vec![0.0; model.states.len()];
    for steps_left in 1..=spec.horizon {
        let mut nv = vec![0.0; v.len()];
        for (i, s) in model.states.iter().enumerate() {
            if is_terminal(spec, s) {
                nv[i] = terminal_tail(spec, s, steps_left);
                continue;
            }
            let q = model.succ[i]
                .iter()
                .map(|row| row.iter().map(|&(j, p)| p * v[j]).sum::<f64>());
            let cont = if uniform {
                q.sum::<f64>() / k
            } else {
                q.fold(f64::NEG_INFINITY, f64::max)
            };
            nv[i] = reward(spec, s) + g * cont;
        }
        v = nv;
    }
    v[0]
}

/// Optimal expected return from the initial state over the full horizon.
pub fn optimal_value(spec: &InstanceSpec) -> Result<f64, EvalError> {
    let model = reachable_model(spec)?;
    Ok(backup(spec, &model, false))
}

/// Exact expected return of the uniformly random policy.
pub fn random_policy_value(spec: &InstanceSpec) -> Result<f64, EvalError> {
    let model = reachable_model(spec)?;
    Ok(backup(spec, &model, true))
}

/// One evaluation point of a learning curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRecord {
    pub run_id: String,
    pub algorithm: String,
    pub instance_id: String,
    pub env_steps: u64,
    pub mean_return: f64,
    pub stderr: f64,
    pub episodes: usize,
    pub wall_seconds: f64,
    /// Filled from a manifest when one is available.
    pub alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub v_inf: f64,
    pub v_sup: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunEntry {
    pub run_id: String,
    pub config_hash: u64,
    pub seed: u64,
}

/// Per-instance return bounds over everything recorded for an experiment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub bounds: BTreeMap<String, Bounds>,
    pub runs: Vec<RunEntry>,
}

/// Outcome of [`alpha`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alpha {
    pub value: f64,
    /// The raw ratio fell outside [0, 1] and was clamped.
    pub clamped: bool,
}

impl RunManifest {
    /// Widens the bounds of `instance_id` to include `v`.
    pub fn observe(&mut self, instance_id: &str, v: f64) {
        if !v.is_finite() {
            return;
        }
        self.bounds
            .entry(instance_id.to_string())
            .and_modify(|b| {
                b.v_inf = b.v_inf.min(v);
                b.v_sup = b.v_sup.max(v);
            })
            .or_insert(Bounds { v_inf: v, v_sup: v });
    }

    pub fn add_run(&mut self, entry: RunEntry) {
        if !self.runs.contains(&entry) {
            self.runs.push(entry);
            self.runs.sort();
        }
    }

    /// Widens bounds over all record means.
    pub fn update(&mut self, records: &[CurveRecord]) {
        for r in records {
            self.observe(&r.instance_id, r.mean_return);
        }
    }

    /// Sets each record's α from the current bounds; degenerate or missing
    /// bounds leave it empty.
    pub fn annotate(&self, records: &mut [CurveRecord]) {
        for r in records {
            r.alpha = alpha(r.mean_return, self, &r.instance_id).ok().map(|a| a.value);
        }
    }
}

/// `(v - V_inf) / (V_sup - V_inf)` clamped to [0, 1].
pub fn alpha(v: f64, manifest: &RunManifest, instance_id: &str) -> Result<Alpha, EvalError> {
    let b = manifest
        .bounds
        .get(instance_id)
        .ok_or_else(|| EvalError::NotInManifest(instance_id.to_string()))?;
    let span = b.v_sup - b.v_inf;
    if !(span > 0.0) {
        return Err(EvalError::DegenerateManifest(instance_id.to_string()));
    }
    let raw = (v - b.v_inf) / span;
    let value = raw.clamp(0.0, 1.0);
    Ok(Alpha {
        value,
        clamped: value != raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_instance, generate_instance, DomainKind, NAV_GOAL_CHANNEL};
    use alloc::format;

    fn manifest(inf: f64, sup: f64) -> RunManifest {
        let mut m = RunManifest::default();
        m.observe("x", inf);
        m.observe("x", sup);
        m
    }

    #[test]
    fn alpha_endpoints_and_clamp() {
        let m = manifest(-10.0, 30.0);
        assert_eq!(alpha(30.0, &m, "x").unwrap().value, 1.0);
        assert_eq!(alpha(-10.0, &m, "x").unwrap().value, 0.0);
        assert_eq!(alpha(10.0, &m, "x").unwrap().value, 0.5);
        let a = alpha(50.0, &m, "x").unwrap();
        assert!(a.clamped && a.value == 1.0);
        assert!(matches!(alpha(0.0, &manifest(1.0, 1.0), "x"), Err(EvalError::DegenerateManifest(_))));
        assert!(matches!(alpha(0.0, &m, "y"), Err(EvalError::NotInManifest(_))));
    }

    #[test]
    fn raising_sup_recomputes_alpha() {
        let mut m = manifest(0.0, 10.0);
        let mut recs = vec![CurveRecord {
            run_id: "r".into(),
            algorithm: "A3C".into(),
            instance_id: "x".into(),
            env_steps: 0,
            mean_return: 5.0,
            stderr: 0.0,
            episodes: 1,
            wall_seconds: 0.0,
            alpha: None,
        }];
        m.annotate(&mut recs);
        assert_eq!(recs[0].alpha, Some(0.5));
        m.observe("x", 20.0);
        m.annotate(&mut recs);
        assert_eq!(recs[0].alpha, Some(0.25));
    }

    #[test]
    fn zero_episodes_rejected() {
        let spec = generate_instance(DomainKind::SysAdmin, 3, 1).unwrap();
        let err = evaluate_random(&spec, 0, &mut RngStream::new(1)).unwrap_err();
        assert_eq!(format!("{err}"), "no episodes requested");
    }

    #[test]
    fn single_step_navigation_values() {
        let mut features = vec![0.0; 4];
        features[1 * 2 + NAV_GOAL_CHANNEL] = 1.0;
        let spec = build_instance(
            DomainKind::Navigation,
            "nav".into(),
            2,
            Some((1, 2)),
            vec![0, 1, 1, 0],
            features,
            BTreeMap::new(),
            State::one_hot(2, 0),
            40,
            1.0,
        )
        .unwrap();
        assert_eq!(optimal_value(&spec).unwrap(), -1.0);
        // random: each step moves right with prob 1/4
        let expected: f64 = (0..40).map(|t| -libm::pow(0.75, t as f64)).sum();
        assert!((random_policy_value(&spec).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn optimal_dominates_random() {
        let spec = generate_instance(DomainKind::SysAdmin, 4, 3).unwrap();
        assert!(optimal_value(&spec).unwrap() > random_policy_value(&spec).unwrap());
    }
}
