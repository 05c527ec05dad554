//! Command-line harness: single runs, the four-way comparison and (k, k')
//! sweeps, all driven by a TOML experiment file.

pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use superpipe::arena::TransferMode;
use superpipe::engine::EngineError;
use superpipe::par::Execution;
use superpipe::trace::{TraceError, TraceFormat};
use superpipe::tuner::TunerError;

use config::{ConfigError, ExperimentConfig, ObjectiveName, StrategyKind, SweepSection, WorkloadMode};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_OOM: u8 = 3;
pub const EXIT_FIDELITY: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Engine(#[source] EngineError),
    #[error("fidelity failure: {0}")]
    Fidelity(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::InvalidWorkload(_) => CliError::Config(ConfigError::Invalid(e.to_string())),
            other => CliError::Engine(other),
        }
    }
}

impl From<TunerError> for CliError {
    fn from(e: TunerError) -> Self {
        match e {
            TunerError::InvalidSpec(msg) => CliError::Config(ConfigError::Invalid(msg)),
            TunerError::Engine { source, .. } => source.into(),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Engine(e) if e.is_oom() => EXIT_OOM,
            CliError::Fidelity(_) => EXIT_FIDELITY,
            CliError::Engine(_) | CliError::Trace(_) | CliError::Io { .. } => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "superpipe", version, about = "Windowed layer-offloading simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute one experiment and write its trace and summary.
    Run(Overrides),
    /// Same as `run` with `workload.mode = "train"`.
    Train(Overrides),
    /// Run Standard, CpuOnly, Naive and Superpipeline on the same workload.
    Compare(Overrides),
    /// Grid-search (k, k') for the configured workload.
    Sweep(SweepArgs),
}

/// Flags that override the corresponding config file entries.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Experiment file (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// output.dir
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// output.formats
    #[arg(long, value_delimiter = ',', value_parser = parse_format)]
    pub formats: Option<Vec<TraceFormat>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub frozen_prefix: Option<usize>,
    #[arg(long)]
    pub capacity_bytes: Option<u64>,
    #[arg(long)]
    pub h2d_bandwidth: Option<f64>,
    #[arg(long)]
    pub d2h_bandwidth: Option<f64>,
    #[arg(long)]
    pub per_call_latency: Option<f64>,
    #[arg(long)]
    pub device_compute_rate: Option<f64>,
    #[arg(long)]
    pub host_compute_rate: Option<f64>,
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// workload.checkpointing
    #[arg(long)]
    pub checkpointing: Option<bool>,
    /// strategy.kind
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k_prime: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    pub transfer_mode: Option<TransferMode>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// sweep.k_min / sweep.k_max, as `lo..=hi` or a single value.
    #[arg(long = "k-range", value_parser = parse_range)]
    pub k_range: Option<(usize, usize)>,
    /// sweep.k_prime_min / sweep.k_prime_max.
    #[arg(long = "kprime", value_parser = parse_range)]
    pub k_prime_range: Option<(usize, usize)>,
    /// sweep.budget_bytes
    #[arg(long)]
    pub budget: Option<u64>,
    /// sweep.objective
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveName>,
    /// sweep.execution
    #[arg(long, value_parser = parse_execution)]
    pub execution: Option<Execution>,
}

fn parse_format(s: &str) -> Result<TraceFormat, String> {
    match s {
        "csv" => Ok(TraceFormat::Csv),
        "json" => Ok(TraceFormat::Json),
        other => Err(format!("unknown format {other:?} (expected csv or json)")),
    }
}

fn parse_mode(s: &str) -> Result<TransferMode, String> {
    match s {
        "sequential" => Ok(TransferMode::Sequential),
        "batch" => Ok(TransferMode::Batch),
        other => Err(format!("unknown transfer mode {other:?} (expected sequential or batch)")),
    }
}

fn parse_execution(s: &str) -> Result<Execution, String> {
    match s {
        "sequential" => Ok(Execution::Sequential),
        "parallel" => Ok(Execution::Parallel),
        other => Err(format!("unknown execution {other:?} (expected sequential or parallel)")),
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    match s.split_once("..=") {
        Some((lo, hi)) => Ok((num(lo)?, num(hi)?)),
        None => num(s).map(|v| (v, v)),
    }
}

impl Overrides {
    /// Loads the config file, applies every flag, and re-validates.
    pub fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        if let Some(dir) = &self.output_dir {
            cfg.output.dir = Some(dir.clone());
        }
        set(&mut cfg.output.formats, &self.formats);
        set(&mut cfg.model.seed, &self.seed);
        set(&mut cfg.model.n_layers, &self.n_layers);
        set(&mut cfg.model.d, &self.d);
        set(&mut cfg.model.frozen_prefix, &self.frozen_prefix);
        set(&mut cfg.arena.capacity_bytes, &self.capacity_bytes);
        set(&mut cfg.arena.h2d_bandwidth, &self.h2d_bandwidth);
        set(&mut cfg.arena.d2h_bandwidth, &self.d2h_bandwidth);
        set(&mut cfg.arena.per_call_latency, &self.per_call_latency);
        set(&mut cfg.arena.device_compute_rate, &self.device_compute_rate);
        set(&mut cfg.arena.host_compute_rate, &self.host_compute_rate);
        set(&mut cfg.workload.n_items, &self.n_items);
        set(&mut cfg.workload.batch_size, &self.batch_size);
        set(&mut cfg.workload.lr, &self.lr);
        set(&mut cfg.workload.checkpointing, &self.checkpointing);
        set(&mut cfg.strategy.kind, &self.strategy);
        if self.k.is_some() {
            cfg.strategy.k = self.k;
        }
        if self.k_prime.is_some() {
            cfg.strategy.k_prime = self.k_prime;
        }
        set(&mut cfg.strategy.transfer_mode, &self.transfer_mode);
    }
}

impl SweepArgs {
    pub fn load(&self) -> Result<(ExperimentConfig, SweepSection), CliError> {
        let mut cfg = ExperimentConfig::load(&self.overrides.config)?;
        self.overrides.apply(&mut cfg);
        let mut sweep = cfg.sweep.clone().unwrap_or_default();
        if let Some((lo, hi)) = self.k_range {
            sweep.k_min = lo;
            sweep.k_max = hi;
        }
        if let Some((lo, hi)) = self.k_prime_range {
            sweep.k_prime_min = lo;
            sweep.k_prime_max = hi;
        }
        if self.budget.is_some() {
            sweep.budget_bytes = self.budget;
        }
        if let Some(o) = self.objective {
            sweep.objective = o;
        }
        if let Some(e) = self.execution {
            sweep.execution = e;
        }
        cfg.sweep = Some(sweep.clone());
        cfg.validate()?;
        Ok((cfg, sweep))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(o) => commands::run(&o.load()?, o.output_dir.as_deref()),
        Command::Train(o) => {
            let mut cfg = ExperimentConfig::load(&o.config)?;
            o.apply(&mut cfg);
            cfg.workload.mode = WorkloadMode::Train;
            cfg.validate()?;
            commands::run(&cfg, o.output_dir.as_deref())
        }
        Command::Compare(o) => commands::compare(&o.load()?, o.output_dir.as_deref()),
        Command::Sweep(args) => {
            let (cfg, sweep) = args.load()?;
            commands::sweep(&cfg, &sweep, args.overrides.output_dir.as_deref())
        }
    }
}

/// Parses `std::env::args`, runs, and maps the outcome to an exit code.
pub fn main_with_args() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
