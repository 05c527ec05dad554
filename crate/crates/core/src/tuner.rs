//! Exhaustive (k, k') grid search under a memory budget.

use std::cmp::Ordering;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::{ArenaConfig, TransferMode};
use crate::engine::{activation_bytes, run_inference, run_train_step, EngineError, TrainConfig};
use crate::model::{LayeredModel, Tensor};
use crate::par::{map_collect, Execution};
use crate::scheduler::{peak_weight_residency, Strategy, StrategyConfig};
use crate::trace::RunSummary;

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("invalid sweep: {0}")]
    InvalidSpec(String),
    #[error("pair (k={k}, k'={k_prime}): {source}")]
    Engine {
        k: usize,
        k_prime: usize,
        #[source]
        source: EngineError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    MinPerItemTime,
    MinPeakBytes,
    /// Fastest pair when the arena is shrunk to the budget.
    MinTimeUnderBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    Infer { inputs: Vec<Tensor> },
    Train { x: Tensor, target: Tensor, cfg: TrainConfig },
}

impl Workload {
    fn rows(&self) -> usize {
        match self {
            Workload::Infer { inputs } => inputs.first().map_or(0, |t| t.shape()[0]),
            Workload::Train { x, .. } => x.shape()[0],
        }
    }

    fn run(&self, model: &LayeredModel, strategy: &StrategyConfig, arena: &ArenaConfig) -> Result<RunSummary, EngineError> {
        match self {
            Workload::Infer { inputs } => run_inference(model, inputs, strategy, arena).map(|r| r.summary),
            Workload::Train { x, target, cfg } => {
                run_train_step(model, x, target, strategy, arena, cfg).map(|r| r.summary)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub k_range: RangeInclusive<usize>,
    pub k_prime_range: RangeInclusive<usize>,
    pub budget_bytes: u64,
    pub objective: Objective,
    pub transfer_mode: TransferMode,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), TunerError> {
        if self.k_range.is_empty() || self.k_prime_range.is_empty() {
            return Err(TunerError::InvalidSpec(format!(
                "empty range: k {:?}, k' {:?}",
                self.k_range, self.k_prime_range
            )));
        }
        if self.budget_bytes == 0 {
            return Err(TunerError::InvalidSpec("budget_bytes must be > 0".into()));
        }
        Ok(())
    }

    /// Every `(k, k')` in range with `0 < k' < k <= n_layers`, k-major.
    pub fn pairs(&self, n_layers: usize) -> Vec<(usize, usize)> {
        self.k_range
            .clone()
            .filter(|k| *k <= n_layers)
            .flat_map(|k| {
                self.k_prime_range
                    .clone()
                    .filter(move |kp| *kp >= 1 && *kp < k)
                    .map(move |kp| (k, kp))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Feasible,
    /// Rejected by the analytic peak bound before running.
    Prefiltered,
    OverBudget,
    OomDeadlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub k_prime: usize,
    pub feasible: bool,
    pub status: PairStatus,
    pub peak_bytes: Option<u64>,
    pub per_item_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub objective: Objective,
    pub table: Vec<SweepRow>,
    pub best: Option<(usize, usize)>,
}

impl SweepResult {
    pub fn best_row(&self) -> Option<&SweepRow> {
        let (k, kp) = self.best?;
        self.table.iter().find(|r| r.k == k && r.k_prime == kp)
    }
}

/// Ordering used to pick the best feasible row: objective metric, then
/// peak bytes, then k, then k'.
pub fn compare_rows(objective: Objective, a: &SweepRow, b: &SweepRow) -> Ordering {
    let peak = |r: &SweepRow| r.peak_bytes.unwrap_or(u64::MAX);
    let time = |r: &SweepRow| r.per_item_time.unwrap_or(f64::INFINITY);
    let primary = match objective {
        Objective::MinPeakBytes => peak(a).cmp(&peak(b)),
        Objective::MinPerItemTime | Objective::MinTimeUnderBudget => time(a).total_cmp(&time(b)),
    };
    primary
        .then(peak(a).cmp(&peak(b)))
        .then(a.k.cmp(&b.k))
        .then(a.k_prime.cmp(&b.k_prime))
}

pub fn grid_search(
    model: &LayeredModel,
    arena_cfg: &ArenaConfig,
    workload: &Workload,
    spec: &SweepSpec,
    execution: Execution,
) -> Result<SweepResult, TunerError> {
    spec.validate()?;
    let s = model.weight_bytes_per_layer();
    let act = activation_bytes(workload.rows(), model.d);
    let arena = match spec.objective {
        Objective::MinTimeUnderBudget => arena_cfg.clone().with_capacity(arena_cfg.capacity_bytes.min(spec.budget_bytes)),
        Objective::MinPerItemTime | Objective::MinPeakBytes => arena_cfg.clone(),
    };
    let pairs = spec.pairs(model.n_layers());
    let rows = map_collect(&pairs, execution, |&(k, k_prime)| {
        let strategy = StrategyConfig::new(Strategy::Superpipeline { k, k_prime }, spec.transfer_mode);
        let row = |status, summary: Option<&RunSummary>| SweepRow {
            k,
            k_prime,
            feasible: status == PairStatus::Feasible,
            status,
            peak_bytes: summary.map(|s| s.peak_bytes),
            per_item_time: summary.map(|s| s.per_item_time),
        };
        if peak_weight_residency(&strategy, model.n_layers(), s) + act > spec.budget_bytes {
            return Ok(row(PairStatus::Prefiltered, None));
        }
        match workload.run(model, &strategy, &arena) {
            Ok(summary) if summary.peak_bytes <= spec.budget_bytes => Ok(row(PairStatus::Feasible, Some(&summary))),
            Ok(summary) => Ok(row(PairStatus::OverBudget, Some(&summary))),
            Err(e) if e.is_oom() => Ok(row(PairStatus::OomDeadlock, None)),
            Err(source) => Err(TunerError::Engine { k, k_prime, source }),
        }
    });
    let table = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let best = table
        .iter()
        .filter(|r| r.feasible)
        .min_by(|a, b| compare_rows(spec.objective, a, b))
        .map(|r| (r.k, r.k_prime));
    Ok(SweepResult {
        objective: spec.objective,
        table,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn arena() -> ArenaConfig {
        ArenaConfig {
            capacity_bytes: 1 << 20,
            h2d_bandwidth: 400.0,
            d2h_bandwidth: 200.0,
            per_call_latency: 0.01,
            device_compute_rate: 128.0,
            host_compute_rate: 4.0,
        }
    }

    fn spec(budget: u64, objective: Objective) -> SweepSpec {
        SweepSpec {
            k_range: 2..=8,
            k_prime_range: 1..=7,
            budget_bytes: budget,
            objective,
            transfer_mode: TransferMode::Sequential,
        }
    }

    #[test]
    fn grid_has_every_ordered_pair() {
        let pairs = spec(1, Objective::MinPeakBytes).pairs(8);
        assert_eq!(pairs.len(), 28);
        assert!(pairs.iter().all(|(k, kp)| kp < k));
        assert_eq!(spec(1, Objective::MinPeakBytes).pairs(4).len(), 6);
    }

    #[test]
    fn tiny_budget_has_no_feasible_pair() {
        let model = build_model(1, 8, 4, 0).unwrap();
        let workload = Workload::Infer {
            inputs: vec![Tensor::random(1, 0, 1, 4)],
        };
        let result = grid_search(&model, &arena(), &workload, &spec(10, Objective::MinPerItemTime), Execution::Parallel).unwrap();
        assert_eq!(result.best, None);
        assert!(result.table.iter().all(|r| r.status == PairStatus::Prefiltered));
    }

    #[test]
    fn parallel_matches_sequential() {
        let model = build_model(1, 8, 4, 0).unwrap();
        let workload = Workload::Infer {
            inputs: vec![Tensor::random(1, 0, 2, 4); 2],
        };
        let spec = spec(u64::MAX, Objective::MinPerItemTime);
        let a = grid_search(&model, &arena(), &workload, &spec, Execution::Parallel).unwrap();
        let b = grid_search(&model, &arena(), &workload, &spec, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.best.is_some());
    }

    #[test]
    fn invalid_spec() {
        let mut s = spec(0, Objective::MinPeakBytes);
        assert!(s.validate().is_err());
        s.budget_bytes = 1;
        #[allow(clippy::reversed_empty_ranges)]
        {
            s.k_range = 5..=4;
        }
        assert!(s.validate().is_err());
    }
}
