//! The four subcommands. Each writes its artifacts under the resolved output
//! directory and prints a short result to stdout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use superpipe::engine::{run_inference, run_train_step, train_digest, verify_fidelity};
use superpipe::model::reference_train_step;
use superpipe::scheduler::{Strategy, StrategyConfig};
use superpipe::trace::{export_trace, RunSummary, Trace};
use superpipe::tuner::{grid_search, SweepResult, Workload};

use crate::config::{ConfigError, ExperimentConfig, SweepSection, WorkloadMode};
use crate::CliError;

/// One finished run and whether it reproduced the reference bit for bit.
#[derive(Debug, Clone)]
pub struct Executed {
    pub trace: Trace,
    pub summary: RunSummary,
    pub reference_digest: String,
}

impl Executed {
    pub fn matches_reference(&self) -> bool {
        self.summary.output_digest == self.reference_digest
    }
}

pub fn execute(cfg: &ExperimentConfig, strategy: &StrategyConfig) -> Result<Executed, CliError> {
    let model = cfg.build_model();
    match cfg.workload.mode {
        WorkloadMode::Infer => {
            let inputs = cfg.inputs();
            let run = run_inference(&model, &inputs, strategy, &cfg.arena)?;
            let fidelity = verify_fidelity(&run.outputs, &model, &inputs).map_err(|e| CliError::Engine(e.into()))?;
            let reference_digest = if fidelity.matches {
                run.summary.output_digest.clone()
            } else {
                String::from("reference mismatch")
            };
            Ok(Executed {
                trace: run.trace,
                summary: run.summary,
                reference_digest,
            })
        }
        WorkloadMode::Train => {
            let (x, target) = cfg.train_batch();
            let train = cfg.train_config();
            let run = run_train_step(&model, &x, &target, strategy, &cfg.arena, &train)?;
            let reference = reference_train_step(&model, &x, &target, train.lr).map_err(|e| CliError::Engine(e.into()))?;
            Ok(Executed {
                trace: run.trace,
                summary: run.summary,
                reference_digest: train_digest(reference.loss, &reference.updated),
            })
        }
    }
}

fn prepare_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir(flag);
    fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn write_file(path: PathBuf, contents: &str) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    text
}

fn csv_string<R: Serialize>(rows: &[R]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("plain rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

pub fn run(cfg: &ExperimentConfig, output_flag: Option<&Path>) -> Result<(), CliError> {
    let strategy = cfg.strategy_config()?;
    let done = execute(cfg, &strategy)?;
    if !done.matches_reference() {
        return Err(CliError::Fidelity(format!(
            "{} produced {} but the reference gives {}",
            done.summary.strategy, done.summary.output_digest, done.reference_digest
        )));
    }
    let dir = prepare_dir(cfg, output_flag)?;
    for format in &cfg.output.formats {
        export_trace(&done.trace, &done.summary, &dir.join(format!("trace.{}", format.extension())), *format)?;
    }
    write_file(dir.join("summary.json"), &to_json(&done.summary))?;
    let s = &done.summary;
    println!(
        "{} peak_bytes={} per_item_time={} stall_time={} digest={}",
        s.strategy, s.peak_bytes, s.per_item_time, s.total_stall_time, s.output_digest
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    #[serde(rename = "Method")]
    pub method: String,
    #[serde(rename = "PeakBytes")]
    pub peak_bytes: u64,
    #[serde(rename = "PerItemTime")]
    pub per_item_time: f64,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "K′")]
    pub k_prime: Option<usize>,
}

/// The four strategies in report order, sharing the configured k and k'.
pub fn comparison_strategies(cfg: &ExperimentConfig) -> Result<Vec<StrategyConfig>, CliError> {
    let (Some(k), Some(k_prime)) = (cfg.strategy.k, cfg.strategy.k_prime) else {
        return Err(ConfigError::Invalid("compare needs strategy.k and strategy.k_prime".into()).into());
    };
    let mode = cfg.strategy.transfer_mode;
    let list = [
        Strategy::Standard,
        Strategy::CpuOnly,
        Strategy::Naive { k },
        Strategy::Superpipeline { k, k_prime },
    ];
    let configs: Vec<StrategyConfig> = list.into_iter().map(|s| StrategyConfig::new(s, mode)).collect();
    for c in &configs {
        c.validate(cfg.model.n_layers).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    Ok(configs)
}

pub fn compare_rows(cfg: &ExperimentConfig) -> Result<(Vec<CompareRow>, Vec<RunSummary>), CliError> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut reference: Option<String> = None;
    for strategy in comparison_strategies(cfg)? {
        let done = execute(cfg, &strategy)?;
        let digest = &done.summary.output_digest;
        if !done.matches_reference() || reference.as_ref().is_some_and(|r| r != digest) {
            return Err(CliError::Fidelity(format!("{strategy} produced digest {digest}")));
        }
        reference.get_or_insert_with(|| digest.clone());
        rows.push(CompareRow {
            method: strategy.strategy.name().to_string(),
            peak_bytes: done.summary.peak_bytes,
            per_item_time: done.summary.per_item_time,
            k: strategy.strategy.k(),
            k_prime: strategy.strategy.k_prime(),
        });
        summaries.push(done.summary);
    }
    Ok((rows, summaries))
}

pub fn compare(cfg: &ExperimentConfig, output_flag: Option<&Path>) -> Result<(), CliError> {
    let (rows, summaries) = compare_rows(cfg)?;
    let dir = prepare_dir(cfg, output_flag)?;
    let table = csv_string(&rows);
    write_file(dir.join("compare.csv"), &table)?;
    write_file(dir.join("compare.json"), &to_json(&summaries))?;
    print!("{table}");
    println!("digest={}", summaries[0].output_digest);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SweepCsvRow {
    k: usize,
    k_prime: usize,
    status: String,
    feasible: bool,
    peak_bytes: Option<u64>,
    per_item_time: Option<f64>,
}

pub fn sweep_result(cfg: &ExperimentConfig, sweep: &SweepSection) -> Result<SweepResult, CliError> {
    let model = cfg.build_model();
    let workload = match cfg.workload.mode {
        WorkloadMode::Infer => Workload::Infer { inputs: cfg.inputs() },
        WorkloadMode::Train => {
            let (x, target) = cfg.train_batch();
            Workload::Train {
                x,
                target,
                cfg: cfg.train_config(),
            }
        }
    };
    Ok(grid_search(&model, &cfg.arena, &workload, &cfg.sweep_spec(sweep), sweep.execution)?)
}

pub fn sweep(cfg: &ExperimentConfig, sweep: &SweepSection, output_flag: Option<&Path>) -> Result<(), CliError> {
    let result = sweep_result(cfg, sweep)?;
    let rows: Vec<SweepCsvRow> = result
        .table
        .iter()
        .map(|r| SweepCsvRow {
            k: r.k,
            k_prime: r.k_prime,
            status: serde_json::to_value(r.status)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            feasible: r.feasible,
            peak_bytes: r.peak_bytes,
            per_item_time: r.per_item_time,
        })
        .collect();
    let dir = prepare_dir(cfg, output_flag)?;
    write_file(dir.join("sweep.csv"), &csv_string(&rows))?;
    match result.best_row() {
        Some(best) => println!(
            "best k={} k'={} per_item_time={} peak_bytes={}",
            best.k,
            best.k_prime,
            best.per_item_time.unwrap_or(f64::NAN),
            best.peak_bytes.unwrap_or(0)
        ),
        None => println!("none feasible"),
    }
    Ok(())
}
