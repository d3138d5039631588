//! Multi-task actor-critic learning phase and the two-step transfer.

mod a3c;
mod transfer;

pub use a3c::{
    a3c_baseline, a3c_losses, apply_segment, learning_phase, n_step_returns, new_bundle, record_curves, run_actor_critic,
    A3cLosses, LossTerms, PhaseOutput, RunSpec, SegmentOutput, SegmentStats, Worker,
};
pub use transfer::{
    full_transfer_finetune, generate_decoder_pairs, near_zero_shot, train_decoder_on_pairs, transfer_decoder_training,
    DecoderPair, DecoderReport,
};

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::domain::DomainError;
use crate::dynamics::DynamicsError;
use crate::eval::EvalError;
use crate::networks::{NetworkError, DEFAULT_EMBED, DEFAULT_HIDDEN};
use crate::numerics::{NumericsError, RmsProp, DEFAULT_DECAY, DEFAULT_EPSILON, DEFAULT_LEARNING_RATE};
use crate::rng::fnv1a;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("divergence on `{instance}` after {env_steps} steps: {detail}")]
    Divergence {
        instance: String,
        env_steps: u64,
        detail: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Network(e.into())
    }
}

/// The three network variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Shared GCN encoder and policy head only.
    Gcn,
    /// Adds the transition module and its decoder supervision.
    GcnSad,
    /// Adds the adversarial instance classifier.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Gcn, Variant::GcnSad, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gcn => "gcn",
            Variant::GcnSad => "gcn-sad",
            Variant::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    /// `(use_sad_tr, use_ic)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Gcn => (false, false),
            Variant::GcnSad => (true, false),
            Variant::Full => (true, true),
        }
    }

    pub fn apply(self, config: &mut TrainConfig) {
        (config.use_sad_tr, config.use_ic) = self.flags();
    }
}

/// Algorithm tag written to curve records for a flag combination.
pub fn algorithm_tag(use_sad_tr: bool, use_ic: bool) -> &'static str {
    match (use_sad_tr, use_ic) {
        (true, true) => "TORPIDO",
        (true, false) => "A3C+GCN+SAD",
        (false, false) => "A3C+GCN",
        (false, true) => "A3C+GCN+IC",
    }
}

/// Source of the transition pairs used by the learning phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrPairs {
    /// Consecutive states of the collected segment.
    Rollout,
    /// A uniformly random action simulated from each segment state.
    Sampled,
}

/// Whether curve records carry elapsed wall-clock time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WallClock {
    /// Only when more than one worker runs per instance.
    Auto,
    On,
    Off,
}

/// Elapsed-time source for curve records.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// Always reports zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Expected number of sources; `None` accepts any count.
    pub num_sources: Option<usize>,
    pub lambda: f64,
    pub lambda_tr: f64,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    /// Overrides the instance discount for training returns.
    pub gamma: Option<f64>,
    pub rollout_len: usize,
    pub entropy_beta: f64,
    pub value_coef: f64,
    pub clip_norm: f64,
    pub workers_per_instance: usize,
    pub total_env_steps: u64,
    pub use_sad_tr: bool,
    pub use_ic: bool,
    pub seed: u64,
    pub share_value_encoder: bool,
    pub tr_pairs: TrPairs,
    pub embed: usize,
    pub hidden: usize,
    /// Env steps between curve records; 0 records only start and end.
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_greedy: bool,
    pub wall_clock: WallClock,
    pub decoder_pairs: usize,
    pub decoder_batch: usize,
    pub decoder_holdout: f64,
    pub decoder_eval_every: usize,
    pub decoder_patience: usize,
    pub decoder_min_delta: f64,
    pub decoder_max_updates: usize,
    /// `None` uses `learning_rate`.
    pub decoder_learning_rate: Option<f64>,
    pub finetune_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_sources: None,
            lambda: 0.1,
            lambda_tr: 1.0,
            learning_rate: DEFAULT_LEARNING_RATE,
            rms_decay: DEFAULT_DECAY,
            rms_epsilon: DEFAULT_EPSILON,
            gamma: None,
            rollout_len: 10,
            entropy_beta: 0.01,
            value_coef: 0.5,
            clip_norm: 40.0,
            workers_per_instance: 2,
            total_env_steps: 200_000,
            use_sad_tr: true,
            use_ic: true,
            seed: 0,
            share_value_encoder: false,
            tr_pairs: TrPairs::Rollout,
            embed: DEFAULT_EMBED,
            hidden: DEFAULT_HIDDEN,
            eval_interval: 10_000,
            eval_episodes: crate::eval::DEFAULT_EVAL_EPISODES,
            eval_greedy: true,
            wall_clock: WallClock::Auto,
            decoder_pairs: 50_000,
            decoder_batch: 32,
            decoder_holdout: 0.1,
            decoder_eval_every: 100,
            decoder_patience: 5,
            decoder_min_delta: 1e-3,
            decoder_max_updates: 20_000,
            decoder_learning_rate: None,
            finetune_steps: 0,
        }
    }
}

/// A malformed config line.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, found `{v}`")),
    }
}

fn parse_num<T: core::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("invalid number `{v}`"))
}

fn parse_opt<T: core::str::FromStr>(v: &str) -> Result<Option<T>, String> {
    if v == "auto" || v == "none" {
        Ok(None)
    } else {
        parse_num(v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
}

impl TrainConfig {
    pub const KEYS: [&'static str; 33] = [
        "num_sources",
        "lambda",
        "lambda_tr",
        "learning_rate",
        "rms_decay",
        "rms_epsilon",
        "gamma",
        "rollout_len",
        "entropy_beta",
        "value_coef",
        "clip_norm",
        "workers_per_instance",
        "total_env_steps",
        "use_sad_tr",
        "use_ic",
        "seed",
        "share_value_encoder",
        "tr_pairs",
        "embed",
        "hidden",
        "eval_interval",
        "eval_episodes",
        "eval_greedy",
        "wall_clock",
        "decoder_pairs",
        "decoder_batch",
        "decoder_holdout",
        "decoder_eval_every",
        "decoder_patience",
        "decoder_min_delta",
        "decoder_max_updates",
        "decoder_learning_rate",
        "finetune_steps",
    ];

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "num_sources" => self.num_sources = parse_opt(v)?,
            "lambda" => self.lambda = parse_num(v)?,
            "lambda_tr" => self.lambda_tr = parse_num(v)?,
            "learning_rate" => self.learning_rate = parse_num(v)?,
            "rms_decay" => self.rms_decay = parse_num(v)?,
            "rms_epsilon" => self.rms_epsilon = parse_num(v)?,
            "gamma" => self.gamma = parse_opt(v)?,
            "rollout_len" => self.rollout_len = parse_num(v)?,
            "entropy_beta" => self.entropy_beta = parse_num(v)?,
            "value_coef" => self.value_coef = parse_num(v)?,
            "clip_norm" => self.clip_norm = parse_num(v)?,
            "workers_per_instance" => self.workers_per_instance = parse_num(v)?,
            "total_env_steps" => self.total_env_steps = parse_num(v)?,
            "use_sad_tr" => self.use_sad_tr = parse_bool(v)?,
            "use_ic" => self.use_ic = parse_bool(v)?,
            "seed" => self.seed = parse_num(v)?,
            "share_value_encoder" => self.share_value_encoder = parse_bool(v)?,
            "tr_pairs" => {
                self.tr_pairs = match v {
                    "rollout" => TrPairs::Rollout,
                    "sampled" => TrPairs::Sampled,
                    _ => return Err(format!("tr_pairs must be rollout or sampled, found `{v}`")),
                }
            }
            "embed" => self.embed = parse_num(v)?,
            "hidden" => self.hidden = parse_num(v)?,
            "eval_interval" => self.eval_interval = parse_num(v)?,
            "eval_episodes" => self.eval_episodes = parse_num(v)?,
            "eval_greedy" => self.eval_greedy = parse_bool(v)?,
            "wall_clock" => {
                self.wall_clock = match v {
                    "auto" => WallClock::Auto,
                    "on" | "true" => WallClock::On,
                    "off" | "false" => WallClock::Off,
                    _ => return Err(format!("wall_clock must be auto, on or off, found `{v}`")),
                }
            }
            "decoder_pairs" => self.decoder_pairs = parse_num(v)?,
            "decoder_batch" => self.decoder_batch = parse_num(v)?,
            "decoder_holdout" => self.decoder_holdout = parse_num(v)?,
            "decoder_eval_every" => self.decoder_eval_every = parse_num(v)?,
            "decoder_patience" => self.decoder_patience = parse_num(v)?,
            "decoder_min_delta" => self.decoder_min_delta = parse_num(v)?,
            "decoder_max_updates" => self.decoder_max_updates = parse_num(v)?,
            "decoder_learning_rate" => self.decoder_learning_rate = parse_opt(v)?,
            "finetune_steps" => self.finetune_steps = parse_num(v)?,
            "variant" => {
                Variant::from_name(v)
                    .ok_or_else(|| format!("unknown variant `{v}`"))?
                    .apply(self);
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Value of `key` in the form accepted by [`Self::set`].
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "num_sources" => show_opt(&self.num_sources),
            "lambda" => self.lambda.to_string(),
            "lambda_tr" => self.lambda_tr.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "rms_decay" => self.rms_decay.to_string(),
            "rms_epsilon" => self.rms_epsilon.to_string(),
            "gamma" => show_opt(&self.gamma),
            "rollout_len" => self.rollout_len.to_string(),
            "entropy_beta" => self.entropy_beta.to_string(),
            "value_coef" => self.value_coef.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "workers_per_instance" => self.workers_per_instance.to_string(),
            "total_env_steps" => self.total_env_steps.to_string(),
            "use_sad_tr" => (if self.use_sad_tr { "on" } else { "off" }).to_string(),
            "use_ic" => (if self.use_ic { "on" } else { "off" }).to_string(),
            "seed" => self.seed.to_string(),
            "share_value_encoder" => (if self.share_value_encoder { "on" } else { "off" }).to_string(),
            "tr_pairs" => match self.tr_pairs {
                TrPairs::Rollout => "rollout",
                TrPairs::Sampled => "sampled",
            }
            .to_string(),
            "embed" => self.embed.to_string(),
            "hidden" => self.hidden.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "eval_greedy" => self.eval_greedy.to_string(),
            "wall_clock" => match self.wall_clock {
                WallClock::Auto => "auto",
                WallClock::On => "on",
                WallClock::Off => "off",
            }
            .to_string(),
            "decoder_pairs" => self.decoder_pairs.to_string(),
            "decoder_batch" => self.decoder_batch.to_string(),
            "decoder_holdout" => self.decoder_holdout.to_string(),
            "decoder_eval_every" => self.decoder_eval_every.to_string(),
            "decoder_patience" => self.decoder_patience.to_string(),
            "decoder_min_delta" => self.decoder_min_delta.to_string(),
            "decoder_max_updates" => self.decoder_max_updates.to_string(),
            "decoder_learning_rate" => show_opt(&self.decoder_learning_rate),
            "finetune_steps" => self.finetune_steps.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    /// Applies the `key = value` lines of `text` on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ConfigError { line: i + 1, message };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            self.set(k.trim(), v).map_err(err)?;
        }
        Ok(())
    }

    /// Canonical text form; [`Self::parse`] of it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }

    pub fn optimizer(&self) -> RmsProp {
        RmsProp {
            learning_rate: self.learning_rate,
            decay: self.rms_decay,
            epsilon: self.rms_epsilon,
        }
    }

    pub fn decoder_optimizer(&self) -> RmsProp {
        RmsProp {
            learning_rate: self.decoder_learning_rate.unwrap_or(self.learning_rate),
            ..self.optimizer()
        }
    }

    pub fn algorithm(&self) -> &'static str {
        algorithm_tag(self.use_sad_tr, self.use_ic)
    }

    pub fn records_wall_clock(&self) -> bool {
        match self.wall_clock {
            WallClock::Auto => self.workers_per_instance > 1,
            WallClock::On => true,
            WallClock::Off => false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let mut problems: Vec<String> = Vec::new();
        let mut need = |ok: bool, what: &str| {
            if !ok {
                problems.push(what.to_string());
            }
        };
        need(self.lambda >= 0.0, "lambda must be >= 0");
        need(self.lambda_tr >= 0.0, "lambda_tr must be >= 0");
        need(self.learning_rate > 0.0, "learning_rate must be > 0");
        need(self.rms_decay > 0.0 && self.rms_decay < 1.0, "rms_decay must lie in (0,1)");
        need(self.rms_epsilon > 0.0, "rms_epsilon must be > 0");
        need(self.gamma.map_or(true, |g| g > 0.0 && g <= 1.0), "gamma must lie in (0,1]");
        need(self.rollout_len > 0, "rollout_len must be > 0");
        need(self.entropy_beta >= 0.0, "entropy_beta must be >= 0");
        need(self.value_coef >= 0.0, "value_coef must be >= 0");
        need(self.clip_norm > 0.0, "clip_norm must be > 0");
        need(self.workers_per_instance > 0, "workers_per_instance must be > 0");
        need(self.embed > 0 && self.hidden > 0, "embed and hidden must be > 0");
        need(self.eval_episodes > 0, "eval_episodes must be > 0");
        need(self.decoder_batch > 0, "decoder_batch must be > 0");
        need(
            self.decoder_holdout > 0.0 && self.decoder_holdout < 1.0,
            "decoder_holdout must lie in (0,1)",
        );
        need(self.decoder_eval_every > 0, "decoder_eval_every must be > 0");
        need(self.decoder_patience > 0, "decoder_patience must be > 0");
        need(
            self.decoder_learning_rate.map_or(true, |x| x > 0.0),
            "decoder_learning_rate must be > 0",
        );
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.lambda = 0.25;
        cfg.gamma = Some(0.95);
        cfg.tr_pairs = TrPairs::Sampled;
        cfg.decoder_learning_rate = Some(1e-3);
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn variants_set_flags() {
        let mut cfg = TrainConfig::default();
        cfg.set("variant", "gcn").unwrap();
        assert_eq!((cfg.use_sad_tr, cfg.use_ic), (false, false));
        assert_eq!(cfg.get("use_sad_tr").unwrap(), "off");
        cfg.set("variant", "gcn-sad").unwrap();
        assert_eq!((cfg.use_sad_tr, cfg.use_ic), (true, false));
        cfg.set("variant", "full").unwrap();
        assert_eq!((cfg.use_sad_tr, cfg.use_ic), (true, true));
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = TrainConfig::parse("lambda = 0.1\n\nbogus = 3\n").unwrap_err();
        assert_eq!(err.line, 3);
        let err = TrainConfig::parse("# c\nlambda 0.1").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(TrainConfig::parse("use_ic = maybe").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig {
            lambda: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }
}
