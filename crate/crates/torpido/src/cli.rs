//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Args, FromArgMatches, Parser, Subcommand, ValueEnum};

use torpido_core::domain::{generate_instances, DomainKind, InstanceSpec};
use torpido_core::eval::{evaluate_policy, evaluate_random, optimal_value, CurveRecord, EvalError, RunEntry};
use torpido_core::networks::{ModelBundle, PreparedInstance};
use torpido_core::training::{
    full_transfer_finetune, near_zero_shot, new_bundle, record_curves, PhaseOutput, RunSpec, TrainConfig, TrainError,
    Variant,
};
use torpido_core::RngStream;

use crate::checkpoint::{load_bundle, save_bundle, CheckpointError};
use crate::instance_io::{parse_instance, serialize_instance};
use crate::parallel::{run_parallel, Stopwatch};
use crate::records::{update_manifest, write_curves, RecordError};

/// Largest instance for which the exact optimum is added to a manifest.
pub const REFERENCE_MAX_VARS: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RecordError> for CliError {
    fn from(e: RecordError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "torpido", version, about = "Policy transfer between equi-sized factored-MDP instances")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write generated instance files.
    Generate(GenerateArgs),
    /// Multi-task learning phase over source instances.
    Train(TrainArgs),
    /// Transfer a trained checkpoint to a target instance.
    Transfer(TransferArgs),
    /// Evaluate a checkpoint's policy on an instance.
    Evaluate(EvaluateArgs),
    /// Learning phase with one of the ablation variants.
    Ablate(AblateArgs),
    /// From-scratch single-instance actor-critic for comparison curves.
    #[command(name = "baseline-a3c")]
    BaselineA3c(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub domain: String,
    #[arg(long)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// One `--<key> <value>` flag per config field.
#[derive(Debug, Clone, Default)]
pub struct ConfigOverrides(pub Vec<(&'static str, String)>);

impl FromArgMatches for ConfigOverrides {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = Vec::new();
        for key in TrainConfig::KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                out.push((key, v.clone()));
            }
        }
        Ok(Self(out))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigOverrides {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        TrainConfig::KEYS.iter().fold(cmd, |cmd, key| {
            cmd.arg(
                Arg::new(*key)
                    .long(key.replace('_', "-"))
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help_heading("Config overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Curve CSV to write.
    #[arg(long)]
    pub curves: PathBuf,
    /// Manifest to update with the new records.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Defaults to the curve file stem.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub sources: Vec<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransferMode {
    ZeroShot,
    Full,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum, default_value_t = TransferMode::ZeroShot)]
    pub mode: TransferMode,
    /// Checkpoint with the transferred decoder.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long, default_value_t = torpido_core::eval::DEFAULT_EVAL_EPISODES)]
    pub episodes: usize,
    /// Argmax actions (the default).
    #[arg(long, conflicts_with = "sampled")]
    pub greedy: bool,
    /// Sample actions from the policy.
    #[arg(long)]
    pub sampled: bool,
    /// Seed of the evaluation stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Gcn,
    GcnSad,
    Full,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Gcn => Variant::Gcn,
            VariantArg::GcnSad => Variant::GcnSad,
            VariantArg::Full => Variant::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    /// Also transfer zero-shot to this instance and record it.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub instance: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn load_instance(path: &Path) -> Result<InstanceSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_instance(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// `base`, then the config file, then flag overrides.
pub fn resolve_config(base: TrainConfig, args: &ConfigArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        cfg.merge_text(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    for (k, v) in &args.overrides.0 {
        cfg.set(k, v).map_err(|e| CliError::Usage(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_id(out: &OutputArgs) -> String {
    out.run_id.clone().unwrap_or_else(|| {
        out.curves
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string())
    })
}

fn prepare(specs: &[InstanceSpec]) -> Result<Vec<PreparedInstance>, CliError> {
    specs
        .iter()
        .map(|s| PreparedInstance::new(s.clone()).map_err(|e| CliError::Data(e.to_string())))
        .collect()
}

/// Learning phase with worker threads when configured.
pub fn train_sources(
    sources: &[InstanceSpec],
    config: &TrainConfig,
    run_id: &str,
    clock: &Stopwatch,
) -> Result<(ModelBundle, PhaseOutput), CliError> {
    if let Some(n) = config.num_sources {
        if n != sources.len() {
            return Err(CliError::Usage(format!(
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
    let out = run_parallel(&mut bundle, &run, config, clock)?;
    Ok((bundle, out))
}

/// Random-policy and, for small instances, exact-optimum records used to
/// anchor the manifest bounds.
pub fn reference_records(spec: &InstanceSpec, config: &TrainConfig, run_id: &str) -> Result<Vec<CurveRecord>, CliError> {
    let mut rng = RngStream::new(config.seed).split_named("reference");
    let est = evaluate_random(spec, config.eval_episodes, &mut rng)?;
    let mut out = vec![CurveRecord {
        run_id: run_id.to_string(),
        algorithm: "RANDOM".to_string(),
        instance_id: spec.instance_id.clone(),
        env_steps: 0,
        mean_return: est.mean,
        stderr: est.stderr,
        episodes: est.episodes,
        wall_seconds: 0.0,
        alpha: None,
    }];
    if spec.num_vars <= REFERENCE_MAX_VARS {
        match optimal_value(spec) {
            Ok(v) => out.push(CurveRecord {
                algorithm: "OPTIMAL".to_string(),
                mean_return: v,
                stderr: 0.0,
                episodes: 0,
                ..out[0].clone()
            }),
            Err(EvalError::TooManyStates) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn finish(mut records: Vec<CurveRecord>, output: &OutputArgs, config: &TrainConfig, run_id: &str) -> Result<(), CliError> {
    if let Some(path) = &output.manifest {
        let entry = RunEntry {
            run_id: run_id.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
        };
        let manifest = update_manifest(&records, Some(entry), path)?;
        manifest.annotate(&mut records);
    }
    write_curves(&records, &output.curves)?;
    Ok(())
}

fn echo(config: &TrainConfig) {
    print!("{}", config.to_text());
}

fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    let kind = DomainKind::from_name(&a.domain).map_err(|e| CliError::Usage(e.to_string()))?;
    let specs = generate_instances(kind, a.size, a.count, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Data(format!("{}: {e}", a.out_dir.display())))?;
    for spec in specs {
        let path = a.out_dir.join(format!("{}.inst", spec.instance_id));
        fs::write(&path, serialize_instance(&spec)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, variant: Option<Variant>, target: Option<&Path>) -> Result<(), CliError> {
    let mut config = resolve_config(TrainConfig::default(), &a.config)?;
    if let Some(v) = variant {
        v.apply(&mut config);
    }
    echo(&config);
    if a.config.dry_run {
        return Ok(());
    }
    let sources = a.sources.iter().map(|p| load_instance(p)).collect::<Result<Vec<_>, _>>()?;
    let target = target.map(load_instance).transpose()?;
    let id = run_id(&a.output);
    let clock = Stopwatch::start();
    let (mut bundle, out) = train_sources(&sources, &config, &id, &clock)?;
    println!("trained: {} env steps, {} updates", out.env_steps, out.updates);
    let mut records = out.curves;
    if a.output.manifest.is_some() {
        for s in &sources {
            records.extend(reference_records(s, &config, &id)?);
        }
    }
    if let Some(target) = target {
        let report = near_zero_shot(&mut bundle, &target, &config)?;
        println!(
            "decoder: {} pairs, held-out cross-entropy {:.4} -> {:.4}, accuracy {:.3}",
            report.pairs_generated, report.initial_heldout_ce, report.final_heldout_ce, report.heldout_accuracy
        );
        let prepared = prepare(std::slice::from_ref(&target))?;
        let run = RunSpec {
            instances: &prepared,
            use_tr: false,
            use_ic: false,
            total_env_steps: 0,
            step_offset: report.pairs_generated as u64,
            algorithm: config.algorithm(),
            run_id: &id,
            stream: "finetune",
        };
        records.extend(record_curves(&bundle, &run, &config, 0, 0, 0.0)?);
        if a.output.manifest.is_some() {
            records.extend(reference_records(&target, &config, &id)?);
        }
    }
    save_bundle(&bundle, &config, &a.out)?;
    finish(records, &a.output, &config, &id)
}

fn cmd_transfer(a: &TransferArgs) -> Result<(), CliError> {
    let (mut bundle, saved) = load_bundle(&a.ckpt)?;
    let config = resolve_config(saved, &a.config)?;
    echo(&config);
    if a.config.dry_run {
        return Ok(());
    }
    let target = load_instance(&a.target)?;
    bundle
        .dims
        .check(&target)
        .map_err(|e| CliError::Data(format!("signature mismatch: {e}")))?;
    let id = run_id(&a.output);
    let clock = Stopwatch::start();
    let report = near_zero_shot(&mut bundle, &target, &config)?;
    println!(
        "decoder: {} pairs ({} skipped), held-out cross-entropy {:.4} -> {:.4}, accuracy {:.3}",
        report.pairs_generated,
        report.skipped_unreachable,
        report.initial_heldout_ce,
        report.final_heldout_ce,
        report.heldout_accuracy
    );
    let offset = report.pairs_generated as u64;
    let mut records = match a.mode {
        TransferMode::ZeroShot => {
            let prepared = prepare(std::slice::from_ref(&target))?;
            let run = RunSpec {
                instances: &prepared,
                use_tr: false,
                use_ic: false,
                total_env_steps: 0,
                step_offset: offset,
                algorithm: config.algorithm(),
                run_id: &id,
                stream: "finetune",
            };
            record_curves(&bundle, &run, &config, 0, 0, 0.0)?
        }
        TransferMode::Full => full_transfer_finetune(&mut bundle, &target, &config, offset, &id, &clock)?.curves,
    };
    if let Some(last) = records.last() {
        println!("target {}: mean return {:.4} (stderr {:.4})", last.instance_id, last.mean_return, last.stderr);
    }
    if a.output.manifest.is_some() {
        records.extend(reference_records(&target, &config, &id)?);
    }
    if let Some(out) = &a.out {
        save_bundle(&bundle, &config, out)?;
    }
    finish(records, &a.output, &config, &id)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let (bundle, _) = load_bundle(&a.ckpt)?;
    let spec = load_instance(&a.instance)?;
    bundle
        .dims
        .check(&spec)
        .map_err(|e| CliError::Data(format!("signature mismatch: {e}")))?;
    let inst = PreparedInstance::new(spec).map_err(|e| CliError::Data(e.to_string()))?;
    let mut rng = RngStream::new(a.seed).split_named("evaluate");
    let est = evaluate_policy(&bundle, &inst, a.episodes, &mut rng, !a.sampled)?;
    println!("mean_return {} stderr {} episodes {}", est.mean, est.stderr, est.episodes);
    Ok(())
}

fn cmd_baseline(a: &BaselineArgs) -> Result<(), CliError> {
    let config = resolve_config(TrainConfig::default(), &a.config)?;
    echo(&config);
    if a.config.dry_run {
        return Ok(());
    }
    let spec = load_instance(&a.instance)?;
    let id = run_id(&a.output);
    let clock = Stopwatch::start();
    let sources = std::slice::from_ref(&spec);
    let mut bundle = new_bundle(sources, &config)?;
    let prepared = prepare(sources)?;
    let run = RunSpec {
        instances: &prepared,
        use_tr: false,
        use_ic: false,
        total_env_steps: config.total_env_steps,
        step_offset: 0,
        algorithm: "A3C",
        run_id: &id,
        stream: "learning",
    };
    let out = run_parallel(&mut bundle, &run, &config, &clock)?;
    println!("trained: {} env steps, {} updates", out.env_steps, out.updates);
    let mut records = out.curves;
    if a.output.manifest.is_some() {
        records.extend(reference_records(&spec, &config, &id)?);
    }
    if let Some(path) = &a.out {
        save_bundle(&bundle, &config, path)?;
    }
    finish(records, &a.output, &config, &id)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a, None, None),
        Command::Ablate(a) => cmd_train(&a.train, Some(a.variant.into()), a.target.as_deref()),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::BaselineA3c(a) => cmd_baseline(a),
    }
}

/// Parses `args`, runs the command and maps failures to exit codes
/// (2 usage, 3 data, 4 divergence) with a one-line diagnostic.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
