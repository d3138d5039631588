//! Actor-critic workers, the combined loss and the sequential run loop.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::{Clock, TrPairs, TrainConfig, TrainError};
use crate::domain::{check_equi_sized, InstanceSpec, State};
use crate::dynamics::{action_posterior, step, terminal_tail, DynamicsError};
use crate::eval::{evaluate_policy, CurveRecord};
use crate::networks::{Dims, GradBuffer, Graph, ModelBundle, PreparedInstance};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::rng::RngStream;

/// `G_t = r_t + γ G_{t+1}` with `G_T = bootstrap`.
pub fn n_step_returns(rewards: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = bootstrap;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + gamma * g;
        out[t] = g;
    }
    out
}

/// Tape nodes of the three actor-critic terms.
#[derive(Clone, Copy, Debug)]
pub struct A3cLosses {
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
}

/// Policy, value and entropy terms of one segment. `probs[t]` and
/// `values[t]` are the policy distribution and value estimate at step t;
/// the advantage `G_t - V(s_t)` enters the policy term as a constant.
pub fn a3c_losses(
    tape: &mut Tape,
    probs: &[Var],
    values: &[Var],
    actions: &[usize],
    returns: &[f64],
) -> Result<A3cLosses, TrainError> {
    let mut lp = Vec::with_capacity(probs.len());
    let mut lv = Vec::with_capacity(probs.len());
    let mut h = Vec::with_capacity(probs.len());
    for t in 0..probs.len() {
        let v = tape.value(values[t]).item();
        let k = tape.value(probs[t]).len();
        let mut onehot = vec![0.0; k];
        onehot[actions[t]] = 1.0;
        lp.push(tape.cross_entropy(probs[t], &onehot, returns[t] - v)?);
        let g = tape.constant(Tensor::scalar(returns[t]));
        let d = tape.sub(g, values[t])?;
        lv.push(tape.square(d)?);
        h.push(tape.entropy(probs[t])?);
    }
    Ok(A3cLosses {
        policy: tape.sum(&lp)?,
        value: tape.sum(&lv)?,
        entropy: tape.sum(&h)?,
    })
}

/// Which auxiliary terms a segment includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub transition: bool,
    /// Class label for the instance classifier; `None` drops the term.
    pub classifier: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegmentStats {
    pub steps: u64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub transition_loss: f64,
    pub classifier_loss: f64,
    pub total: f64,
    pub skipped_pairs: usize,
}

pub struct SegmentOutput {
    pub grads: Gradients,
    pub stats: SegmentStats,
}

struct StepRecord {
    state: State,
    next: State,
    /// `next` is the state of the following record.
    continues: bool,
    e: Var,
    z: Var,
    p: Var,
    v: Var,
    action: usize,
    reward: f64,
}

/// One actor: its own simulator state and random stream.
#[derive(Clone, Debug)]
pub struct Worker {
    pub instance: usize,
    rng: RngStream,
    pair_rng: RngStream,
    state: State,
    t: usize,
    pub env_steps: u64,
}

impl Worker {
    pub fn new(instance: usize, spec: &InstanceSpec, rng: RngStream) -> Self {
        Self {
            instance,
            pair_rng: rng.split_named("pairs"),
            rng,
            state: spec.initial_state.clone(),
            t: 0,
            env_steps: 0,
        }
    }

    fn restart(&mut self, spec: &InstanceSpec) {
        self.state = spec.initial_state.clone();
        self.t = 0;
    }

    /// Collects up to `rollout_len` steps with `snapshot` and returns the
    /// gradients of the combined loss.
    pub fn run_segment(
        &mut self,
        snapshot: &ModelBundle,
        inst: &PreparedInstance,
        config: &TrainConfig,
        terms: LossTerms,
    ) -> Result<SegmentOutput, TrainError> {
        let spec = &inst.spec;
        let gamma = config.gamma.unwrap_or(spec.discount);
        let mut g = Graph::new(snapshot);
        let mut recs: Vec<StepRecord> = Vec::with_capacity(config.rollout_len);
        let mut bootstrap = None;
        for _ in 0..config.rollout_len {
            let s = self.state.clone();
            let e = g.encode_state(inst, &s)?;
            let z = g.policy(e)?;
            let p = g.decode(inst.id(), &s, z)?;
            let v = g.value(inst, &s)?;
            let a = self.rng.categorical(g.tape.value(p).data());
            let out = step(spec, &s, a, &mut self.rng)?;
            self.t += 1;
            self.env_steps += 1;
            if let Some(prev) = recs.last_mut() {
                prev.continues = true;
            }
            recs.push(StepRecord {
                state: s,
                next: out.next.clone(),
                continues: false,
                e,
                z,
                p,
                v,
                action: a,
                reward: out.reward,
            });
            if out.terminal {
                bootstrap = Some(terminal_tail(spec, &out.next, spec.horizon.saturating_sub(self.t)));
            } else if self.t >= spec.horizon {
                bootstrap = Some(0.0);
            }
            if bootstrap.is_some() {
                self.restart(spec);
                break;
            }
            self.state = out.next;
        }
        let bootstrap = match bootstrap {
            Some(b) => b,
            None => snapshot.state_value(inst, &self.state)?,
        };
        let rewards: Vec<f64> = recs.iter().map(|r| r.reward).collect();
        let returns = n_step_returns(&rewards, bootstrap, gamma);
        let probs: Vec<Var> = recs.iter().map(|r| r.p).collect();
        let values: Vec<Var> = recs.iter().map(|r| r.v).collect();
        let actions: Vec<usize> = recs.iter().map(|r| r.action).collect();
        let base = a3c_losses(&mut g.tape, &probs, &values, &actions, &returns)?;

        let mut stats = SegmentStats {
            steps: recs.len() as u64,
            policy_loss: g.tape.value(base.policy).item(),
            value_loss: g.tape.value(base.value).item(),
            entropy: g.tape.value(base.entropy).item(),
            ..SegmentStats::default()
        };
        let lv = g.tape.scale(base.value, config.value_coef)?;
        let lh = g.tape.scale(base.entropy, -config.entropy_beta)?;
        let mut parts = vec![base.policy, lv, lh];

        if terms.transition {
            let mut tr = Vec::new();
            for (k, r) in recs.iter().enumerate() {
                let (next, e_next) = match config.tr_pairs {
                    TrPairs::Rollout if r.continues => (r.next.clone(), recs[k + 1].e),
                    TrPairs::Rollout => (r.next.clone(), g.encode_state(inst, &r.next)?),
                    TrPairs::Sampled => {
                        let a = self.pair_rng.below(spec.num_actions());
                        let next = step(spec, &r.state, a, &mut self.pair_rng)?.next;
                        let e = g.encode_state(inst, &next)?;
                        (next, e)
                    }
                };
                let posterior = match action_posterior(spec, &r.state, &next) {
                    Ok(p) => p,
                    Err(DynamicsError::UnreachableSuccessor) => {
                        stats.skipped_pairs += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let zt = g.transition(r.e, e_next)?;
                let q = g.decode(inst.id(), &r.state, zt)?;
                tr.push(g.tape.cross_entropy(q, &posterior.probs, 1.0)?);
            }
            if !tr.is_empty() {
                let l = g.tape.sum(&tr)?;
                stats.transition_loss = g.tape.value(l).item();
                parts.push(g.tape.scale(l, config.lambda_tr)?);
            }
        }

        if let Some(class) = terms.classifier {
            let mut target = vec![0.0; snapshot.dims.num_classes.max(1)];
            target[class] = 1.0;
            let mut ic = Vec::with_capacity(recs.len());
            for r in &recs {
                let c = g.classify(r.z, config.lambda)?;
                ic.push(g.tape.cross_entropy(c, &target, 1.0)?);
            }
            let l = g.tape.sum(&ic)?;
            stats.classifier_loss = g.tape.value(l).item();
            parts.push(l);
        }

        let total = g.tape.sum(&parts)?;
        stats.total = g.tape.value(total).item();
        if !stats.total.is_finite() {
            return Err(TrainError::Divergence {
                instance: inst.id().to_string(),
                env_steps: self.env_steps,
                detail: format!("non-finite loss {stats:?}"),
            });
        }
        let grads = g.into_tape().backward(total)?;
        Ok(SegmentOutput { grads, stats })
    }
}

/// Clips and applies one submission; the single serialized update step.
pub fn apply_segment(
    bundle: &mut ModelBundle,
    grads: &Gradients,
    config: &TrainConfig,
    instance: &str,
    env_steps: u64,
) -> Result<f64, TrainError> {
    let mut buf = GradBuffer::new(bundle);
    buf.accumulate(grads);
    if !buf.is_finite() {
        return Err(TrainError::Divergence {
            instance: instance.to_string(),
            env_steps,
            detail: "non-finite gradient".to_string(),
        });
    }
    Ok(bundle.apply_gradients(&mut buf, Some(config.clip_norm)))
}

/// What one actor-critic run trains on and how it is labelled.
#[derive(Clone, Copy, Debug)]
pub struct RunSpec<'a> {
    pub instances: &'a [PreparedInstance],
    pub use_tr: bool,
    pub use_ic: bool,
    pub total_env_steps: u64,
    /// Added to `env_steps` in curve records.
    pub step_offset: u64,
    pub algorithm: &'a str,
    pub run_id: &'a str,
    /// Names the worker random streams.
    pub stream: &'a str,
}

impl RunSpec<'_> {
    pub fn terms(&self, bundle: &ModelBundle, instance: usize) -> LossTerms {
        LossTerms {
            transition: self.use_tr,
            classifier: if self.use_ic {
                bundle.class_index(self.instances[instance].id())
            } else {
                None
            },
        }
    }

    pub fn workers(&self, config: &TrainConfig) -> Vec<Worker> {
        let base = RngStream::new(config.seed).split_named(self.stream);
        let w = config.workers_per_instance;
        let mut out = Vec::with_capacity(self.instances.len() * w);
        for (i, inst) in self.instances.iter().enumerate() {
            for k in 0..w {
                out.push(Worker::new(i, &inst.spec, base.split((i * w + k) as u64)));
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseOutput {
    pub curves: Vec<CurveRecord>,
    /// Simulator steps summed over all workers.
    pub env_steps: u64,
    pub updates: u64,
    pub last_stats: Option<SegmentStats>,
}

/// Evaluates every instance of the run; record `index` picks the stream.
pub fn record_curves(
    bundle: &ModelBundle,
    run: &RunSpec<'_>,
    config: &TrainConfig,
    index: u64,
    env_steps: u64,
    wall_seconds: f64,
) -> Result<Vec<CurveRecord>, TrainError> {
    let base = RngStream::new(config.seed).split_named("eval").split(index);
    let mut out = Vec::with_capacity(run.instances.len());
    for (i, inst) in run.instances.iter().enumerate() {
        let mut rng = base.split(i as u64);
        let est = evaluate_policy(bundle, inst, config.eval_episodes, &mut rng, config.eval_greedy)?;
        out.push(CurveRecord {
            run_id: run.run_id.to_string(),
            algorithm: run.algorithm.to_string(),
            instance_id: inst.id().to_string(),
            env_steps: env_steps + run.step_offset,
            mean_return: est.mean,
            stderr: est.stderr,
            episodes: est.episodes,
            wall_seconds,
            alpha: None,
        });
    }
    Ok(out)
}

/// Round-robin over all workers in a fixed order, one update per segment.
/// Records curves at step 0, whenever another `eval_interval` steps have
/// passed, and at the end.
pub fn run_actor_critic(
    bundle: &mut ModelBundle,
    run: &RunSpec<'_>,
    config: &TrainConfig,
    clock: &dyn Clock,
) -> Result<PhaseOutput, TrainError> {
    config.validate()?;
    let wall = |clock: &dyn Clock| if config.records_wall_clock() { clock.seconds() } else { 0.0 };
    let mut workers = run.workers(config);
    let mut out = PhaseOutput::default();
    out.curves = record_curves(bundle, run, config, 0, 0, wall(clock))?;
    let mut records = 1u64;
    let mut last_recorded = 0u64;
    let mut next_record = config.eval_interval;
    'outer: while out.env_steps < run.total_env_steps {
        for w in workers.iter_mut() {
            if out.env_steps >= run.total_env_steps {
                break 'outer;
            }
            let inst = &run.instances[w.instance];
            let terms = run.terms(bundle, w.instance);
            let seg = w.run_segment(bundle, inst, config, terms)?;
            out.env_steps += seg.stats.steps;
            apply_segment(bundle, &seg.grads, config, inst.id(), out.env_steps)?;
            out.updates += 1;
            out.last_stats = Some(seg.stats);
            if config.eval_interval > 0 && out.env_steps >= next_record {
                out.curves
                    .extend(record_curves(bundle, run, config, records, out.env_steps, wall(clock))?);
                records += 1;
                last_recorded = out.env_steps;
                while next_record <= out.env_steps {
                    next_record += config.eval_interval;
                }
            }
        }
    }
    if last_recorded != out.env_steps {
        out.curves
            .extend(record_curves(bundle, run, config, records, out.env_steps, wall(clock))?);
    }
    Ok(out)
}

/// Fresh bundle for `sources` (class order = slice order).
pub fn new_bundle(sources: &[InstanceSpec], config: &TrainConfig) -> Result<ModelBundle, TrainError> {
    check_equi_sized(sources)?;
    let mut dims = Dims::for_instance(&sources[0], sources.len());
    dims.embed = config.embed;
    dims.hidden = config.hidden;
    let ids: Vec<String> = sources.iter().map(|s| s.instance_id.clone()).collect();
    Ok(ModelBundle::new(
        sources[0].domain,
        dims,
        &ids,
        config.share_value_encoder,
        config.optimizer(),
        config.seed,
    ))
}

fn prepare(specs: &[InstanceSpec]) -> Result<Vec<PreparedInstance>, TrainError> {
    specs
        .iter()
        .map(|s| PreparedInstance::new(s.clone()).map_err(TrainError::from))
        .collect()
}

/// Multi-task learning phase over `sources`.
pub fn learning_phase(
    sources: &[InstanceSpec],
    config: &TrainConfig,
    run_id: &str,
    clock: &dyn Clock,
) -> Result<(ModelBundle, PhaseOutput), TrainError> {
    if let Some(n) = config.num_sources {
        if n != sources.len() {
            return Err(TrainError::Config(format!(
                "num_sources is {n} but {} sources were given",
                sources.len()
            )));
        }
    }
    let mut bundle = new_bundle(sources, config)?;
    let prepared = prepare(sources)?;
    let run = RunSpec {
        instances: &prepared,
        use_tr: config.use_sad_tr,
        use_ic: config.use_ic,
        total_env_steps: config.total_env_steps,
        step_offset: 0,
        algorithm: config.algorithm(),
        run_id,
        stream: "learning",
    };
    let out = run_actor_critic(&mut bundle, &run, config, clock)?;
    Ok((bundle, out))
}

/// From-scratch single-instance actor-critic with the same networks and no
/// auxiliary terms.
pub fn a3c_baseline(
    target: &InstanceSpec,
    config: &TrainConfig,
    run_id: &str,
    clock: &dyn Clock,
) -> Result<(ModelBundle, PhaseOutput), TrainError> {
    let sources = core::slice::from_ref(target);
    let mut bundle = new_bundle(sources, config)?;
    let prepared = prepare(sources)?;
    let run = RunSpec {
        instances: &prepared,
        use_tr: false,
        use_ic: false,
        total_env_steps: config.total_env_steps,
        step_offset: 0,
        algorithm: "A3C",
        run_id,
        stream: "learning",
    };
    let out = run_actor_critic(&mut bundle, &run, config, clock)?;
    Ok((bundle, out))
}
