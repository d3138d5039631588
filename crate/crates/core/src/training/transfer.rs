//! Near-zero-shot decoder training from the model and RL fine-tuning.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use super::a3c::{run_actor_critic, PhaseOutput, RunSpec};
use super::{Clock, TrainConfig, TrainError};
use crate::domain::{check_equi_sized, InstanceSpec, State};
use crate::dynamics::{action_posterior, is_terminal, step, ActionPosterior, DynamicsError};
use crate::networks::{GradBuffer, Graph, ModelBundle, PreparedInstance};
use crate::numerics::{cross_entropy, Tensor};
use crate::rng::RngStream;

/// Distinct restart states kept by [`generate_decoder_pairs`].
const RESTART_POOL: usize = 4096;

/// One supervised example: the decoder input and the gold posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderPair {
    pub state: State,
    pub next: State,
    pub posterior: ActionPosterior,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecoderReport {
    /// Model transitions sampled, skipped ones included.
    pub pairs_generated: usize,
    pub skipped_unreachable: usize,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub initial_heldout_ce: f64,
    pub final_heldout_ce: f64,
    /// Share of held-out pairs whose argmax is a most probable action.
    pub heldout_accuracy: f64,
    pub updates: usize,
    pub evaluations: usize,
}

/// Samples `count` transitions from the model with a uniform random policy.
/// Episodes end at the horizon or an absorbing state and restart from a
/// uniformly chosen previously visited state. Returns the pairs and the
/// number skipped for an unreachable successor.
pub fn generate_decoder_pairs(
    spec: &InstanceSpec,
    count: usize,
    rng: &mut RngStream,
) -> Result<(Vec<DecoderPair>, usize), TrainError> {
    let mut pool = vec![spec.initial_state.clone()];
    let mut seen: BTreeSet<Vec<u8>> = BTreeSet::new();
    seen.insert(spec.initial_state.bits().to_vec());
    let mut pairs = Vec::with_capacity(count);
    let mut skipped = 0;
    let mut s = spec.initial_state.clone();
    let mut t = 0;
    for _ in 0..count {
        let a = rng.below(spec.num_actions());
        let next = step(spec, &s, a, rng)?.next;
        match action_posterior(spec, &s, &next) {
            Ok(posterior) => pairs.push(DecoderPair {
                state: s.clone(),
                next: next.clone(),
                posterior,
            }),
            Err(DynamicsError::UnreachableSuccessor) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
        t += 1;
        if is_terminal(spec, &next) || t >= spec.horizon {
            s = pool[rng.below(pool.len())].clone();
            t = 0;
        } else {
            if pool.len() < RESTART_POOL && seen.insert(next.bits().to_vec()) {
                pool.push(next.clone());
            }
            s = next;
        }
    }
    Ok((pairs, skipped))
}

/// Decoder inputs `[s | z]` with `z = Tr(e(s), e(s'))` from the frozen
/// encoder and transition module.
fn decoder_inputs(bundle: &ModelBundle, inst: &PreparedInstance, pairs: &[DecoderPair]) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut g = Graph::frozen(bundle);
        let e = g.encode_state(inst, &p.state)?;
        let e2 = g.encode_state(inst, &p.next)?;
        let z = g.transition(e, e2)?;
        let mut row = p.state.as_f64();
        row.extend_from_slice(g.tape.value(z).data());
        out.push(row);
    }
    Ok(out)
}

fn rows_tensor(rows: &[&Vec<f64>]) -> Tensor {
    let cols = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(&[rows.len(), cols], data).expect("row lengths")
}

/// Mean cross-entropy and tie-aware accuracy of the decoder on `idx`.
fn heldout_metrics(
    bundle: &ModelBundle,
    id: &str,
    inputs: &[Vec<f64>],
    pairs: &[DecoderPair],
    idx: &[usize],
) -> Result<(f64, f64), TrainError> {
    if idx.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut g = Graph::frozen(bundle);
    let mut ce = 0.0;
    let mut hits = 0usize;
    for chunk in idx.chunks(256) {
        let rows: Vec<&Vec<f64>> = chunk.iter().map(|&i| &inputs[i]).collect();
        let x = g.tape.constant(rows_tensor(&rows));
        let p = g.decode_rows(id, x)?;
        let probs = g.tape.value(p);
        let k = probs.cols();
        for (r, &i) in chunk.iter().enumerate() {
            let row = &probs.data()[r * k..(r + 1) * k];
            ce += cross_entropy(row, &pairs[i].posterior.probs);
            let mut best = 0;
            for (a, &q) in row.iter().enumerate() {
                if q > row[best] {
                    best = a;
                }
            }
            hits += pairs[i].posterior.best_actions().contains(&best) as usize;
        }
    }
    let n = idx.len() as f64;
    Ok((ce / n, hits as f64 / n))
}

/// Trains the decoder of `inst` on precomputed pairs; only that decoder's
/// parameters change.
pub fn train_decoder_on_pairs(
    bundle: &mut ModelBundle,
    inst: &PreparedInstance,
    pairs: &[DecoderPair],
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<DecoderReport, TrainError> {
    let id = inst.id();
    bundle.decoder(id)?;
    let inputs = decoder_inputs(bundle, inst, pairs)?;
    let mut train = Vec::new();
    let mut held = Vec::new();
    for i in 0..pairs.len() {
        if rng.bernoulli(config.decoder_holdout) {
            held.push(i);
        } else {
            train.push(i);
        }
    }
    let (initial_ce, _) = heldout_metrics(bundle, id, &inputs, pairs, &held)?;
    let mut report = DecoderReport {
        train_pairs: train.len(),
        heldout_pairs: held.len(),
        initial_heldout_ce: initial_ce,
        final_heldout_ce: initial_ce,
        ..DecoderReport::default()
    };
    if train.is_empty() {
        report.heldout_accuracy = heldout_metrics(bundle, id, &inputs, pairs, &held)?.1;
        return Ok(report);
    }
    let trainable = bundle.decoder_params(id);
    let rule = config.decoder_optimizer();
    let mut best = initial_ce;
    let mut stale = 0;
    let mut order = train.clone();
    let mut cursor = order.len();
    while report.updates < config.decoder_max_updates {
        let mut batch = Vec::with_capacity(config.decoder_batch);
        while batch.len() < config.decoder_batch {
            if cursor == order.len() {
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.below(i + 1));
                }
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let grads = {
            let mut g = Graph::only(bundle, &trainable);
            let rows: Vec<&Vec<f64>> = batch.iter().map(|&i| &inputs[i]).collect();
            let x = g.tape.constant(rows_tensor(&rows));
            let p = g.decode_rows(id, x)?;
            let target: Vec<f64> = batch
                .iter()
                .flat_map(|&i| pairs[i].posterior.probs.iter().copied())
                .collect();
            let loss = g.tape.cross_entropy(p, &target, 1.0 / batch.len() as f64)?;
            g.into_tape().backward(loss)?
        };
        let mut buf = GradBuffer::new(bundle);
        buf.accumulate(&grads);
        if !buf.is_finite() {
            return Err(TrainError::Divergence {
                instance: id.into(),
                env_steps: 0,
                detail: "non-finite decoder gradient".into(),
            });
        }
        bundle.apply_gradients_with(&mut buf, Some(config.clip_norm), rule);
        report.updates += 1;
        if report.updates % config.decoder_eval_every == 0 && !held.is_empty() {
            let (ce, _) = heldout_metrics(bundle, id, &inputs, pairs, &held)?;
            report.evaluations += 1;
            report.final_heldout_ce = ce;
            if ce < best - config.decoder_min_delta {
                best = ce;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.decoder_patience {
                    break;
                }
            }
        }
    }
    let (ce, acc) = heldout_metrics(bundle, id, &inputs, pairs, &held)?;
    report.final_heldout_ce = ce;
    report.heldout_accuracy = acc;
    Ok(report)
}

fn ensure_decoder(bundle: &mut ModelBundle, target: &InstanceSpec, config: &TrainConfig) -> Result<(), TrainError> {
    bundle.dims.check(target)?;
    if bundle.decoder(&target.instance_id).is_err() {
        bundle.add_decoder(&target.instance_id, config.seed)?;
    }
    Ok(())
}

/// Learns the target's action decoder purely from model-generated
/// transitions; the encoder and transition module stay frozen.
pub fn transfer_decoder_training(
    bundle: &mut ModelBundle,
    target: &InstanceSpec,
    config: &TrainConfig,
) -> Result<DecoderReport, TrainError> {
    config.validate()?;
    ensure_decoder(bundle, target, config)?;
    let inst = PreparedInstance::new(target.clone())?;
    let mut rng = RngStream::new(config.seed).split_named("decoder-pairs");
    let (pairs, skipped) = generate_decoder_pairs(target, config.decoder_pairs, &mut rng)?;
    let mut report = train_decoder_on_pairs(bundle, &inst, &pairs, config, &mut rng)?;
    report.pairs_generated = config.decoder_pairs;
    report.skipped_unreachable = skipped;
    Ok(report)
}

/// Near-zero-shot step. Without the transition module there is nothing to
/// supervise the new decoder, which then stays at its initialization.
pub fn near_zero_shot(
    bundle: &mut ModelBundle,
    target: &InstanceSpec,
    config: &TrainConfig,
) -> Result<DecoderReport, TrainError> {
    if config.use_sad_tr {
        transfer_decoder_training(bundle, target, config)
    } else {
        config.validate()?;
        ensure_decoder(bundle, target, config)?;
        Ok(DecoderReport::default())
    }
}

/// Plain actor-critic on the target, all shared modules and the new
/// decoder trainable, with a fresh value net. Curve steps start at
/// `step_offset`.
pub fn full_transfer_finetune(
    bundle: &mut ModelBundle,
    target: &InstanceSpec,
    config: &TrainConfig,
    step_offset: u64,
    run_id: &str,
    clock: &dyn Clock,
) -> Result<PhaseOutput, TrainError> {
    check_equi_sized([target])?;
    bundle.dims.check(target)?;
    bundle.decoder(&target.instance_id)?;
    if bundle.value_net(&target.instance_id).is_err() {
        bundle.add_value_net(&target.instance_id, config.seed)?;
    }
    let prepared = [PreparedInstance::new(target.clone())?];
    let run = RunSpec {
        instances: &prepared,
        use_tr: false,
        use_ic: false,
        total_env_steps: config.finetune_steps,
        step_offset,
        algorithm: config.algorithm(),
        run_id,
        stream: "finetune",
    };
    run_actor_critic(bundle, &run, config, clock)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{generate_instance, DomainKind};

    #[test]
    fn pairs_are_reproducible_and_reachable() {
        let spec = generate_instance(DomainKind::SysAdmin, 4, 3).unwrap();
        let (a, skipped) = generate_decoder_pairs(&spec, 300, &mut RngStream::new(2)).unwrap();
        let (b, _) = generate_decoder_pairs(&spec, 300, &mut RngStream::new(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(skipped, 0);
        assert_eq!(a.len(), 300);
        for p in &a {
            assert!((p.posterior.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
