//! Worker threads around a single serialized applier.
//!
//! Each worker snapshots the shared bundle under the lock, collects a
//! segment and computes gradients without it, then takes the lock again to
//! apply them. Curve records are produced by whichever worker crosses an
//! evaluation boundary, while it still holds the lock.

use std::sync::Mutex;
use std::time::Instant;

use torpido_core::eval::CurveRecord;
use torpido_core::networks::ModelBundle;
use torpido_core::training::{
    apply_segment, record_curves, run_actor_critic, Clock, PhaseOutput, RunSpec, TrainConfig, TrainError,
};

/// Seconds since construction.
#[derive(Clone, Copy, Debug)]
pub struct Stopwatch(Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Clock for Stopwatch {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

struct Shared<'b> {
    bundle: &'b mut ModelBundle,
    out: PhaseOutput,
    records: u64,
    next_record: u64,
    last_recorded: u64,
    error: Option<TrainError>,
}

/// Runs the actor-critic loop with `workers_per_instance` threads per
/// instance; a single worker per instance falls back to the deterministic
/// sequential loop.
pub fn run_parallel(
    bundle: &mut ModelBundle,
    run: &RunSpec<'_>,
    config: &TrainConfig,
    clock: &Stopwatch,
) -> Result<PhaseOutput, TrainError> {
    if config.workers_per_instance <= 1 {
        return run_actor_critic(bundle, run, config, clock);
    }
    config.validate()?;
    let wall = || if config.records_wall_clock() { clock.seconds() } else { 0.0 };
    let first: Vec<CurveRecord> = record_curves(bundle, run, config, 0, 0, wall())?;
    let shared = Mutex::new(Shared {
        bundle,
        out: PhaseOutput {
            curves: first,
            ..PhaseOutput::default()
        },
        records: 1,
        next_record: config.eval_interval,
        last_recorded: 0,
        error: None,
    });
    let workers = run.workers(config);
    std::thread::scope(|scope| {
        for mut worker in workers {
            let shared = &shared;
            let wall = &wall;
            scope.spawn(move || loop {
                let (snapshot, terms) = {
                    let s = shared.lock().expect("applier lock");
                    if s.error.is_some() || s.out.env_steps >= run.total_env_steps {
                        return;
                    }
                    (s.bundle.clone(), run.terms(s.bundle, worker.instance))
                };
                let inst = &run.instances[worker.instance];
                let seg = worker.run_segment(&snapshot, inst, config, terms);
                let mut s = shared.lock().expect("applier lock");
                let seg = match seg {
                    Ok(seg) => seg,
                    Err(e) => {
                        s.error.get_or_insert(e);
                        return;
                    }
                };
                s.out.env_steps += seg.stats.steps;
                let steps = s.out.env_steps;
                if let Err(e) = apply_segment(s.bundle, &seg.grads, config, inst.id(), steps) {
                    s.error.get_or_insert(e);
                    return;
                }
                s.out.updates += 1;
                s.out.last_stats = Some(seg.stats);
                if config.eval_interval > 0 && steps >= s.next_record {
                    match record_curves(s.bundle, run, config, s.records, steps, wall()) {
                        Ok(recs) => s.out.curves.extend(recs),
                        Err(e) => {
                            s.error.get_or_insert(e);
                            return;
                        }
                    }
                    s.records += 1;
                    s.last_recorded = steps;
                    while s.next_record <= steps {
                        s.next_record += config.eval_interval;
                    }
                }
            });
        }
    });
    let s = shared.into_inner().expect("applier lock");
    if let Some(e) = s.error {
        return Err(e);
    }
    let mut out = s.out;
    if s.last_recorded != out.env_steps {
        out.curves
            .extend(record_curves(s.bundle, run, config, s.records, out.env_steps, wall())?);
    }
    Ok(out)
}
