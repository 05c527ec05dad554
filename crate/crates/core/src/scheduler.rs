//! Residency policies: Standard, CPU-only, Naive(k) and Superpipeline(k, k').
//!
//! The policy only decides weight residency. It looks at a [`PipelineState`]
//! and returns a [`Plan`]: which layer groups to move, which stream
//! positions enter or leave the residency window, and whether compute may
//! begin. Applying a plan to the state is the caller's job, as is telling the
//! state when transfers and computes finish.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::TransferMode;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Whole model resident; loaded once.
    Standard,
    /// Everything runs on the host.
    CpuOnly,
    /// Load k, compute k, evict k, repeat. No overlap.
    Naive { k: usize },
    /// k resident; every k' computed layers are evicted while the next k'
    /// are fetched.
    Superpipeline { k: usize, k_prime: usize },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Standard => "Standard",
            Strategy::CpuOnly => "CpuOnly",
            Strategy::Naive { .. } => "Naive",
            Strategy::Superpipeline { .. } => "Superpipeline",
        }
    }

    pub fn k(&self) -> Option<usize> {
        match *self {
            Strategy::Naive { k } | Strategy::Superpipeline { k, .. } => Some(k),
            _ => None,
        }
    }

    pub fn k_prime(&self) -> Option<usize> {
        match *self {
            Strategy::Superpipeline { k_prime, .. } => Some(k_prime),
            _ => None,
        }
    }

    pub fn uses_device(&self) -> bool {
        !matches!(self, Strategy::CpuOnly)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Strategy::Standard => write!(f, "standard"),
            Strategy::CpuOnly => write!(f, "cpu-only"),
            Strategy::Naive { k } => write!(f, "naive(k={k})"),
            Strategy::Superpipeline { k, k_prime } => write!(f, "superpipeline(k={k},k'={k_prime})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub transfer_mode: TransferMode,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy, transfer_mode: TransferMode) -> Self {
        Self { strategy, transfer_mode }
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), ConfigError> {
        match self.strategy {
            Strategy::Standard | Strategy::CpuOnly => Ok(()),
            Strategy::Naive { k } => {
                if k == 0 || k > n_layers {
                    Err(ConfigError::InvalidStrategy(format!(
                        "naive needs 0 < k <= n_layers ({n_layers}), got k={k}"
                    )))
                } else {
                    Ok(())
                }
            }
            Strategy::Superpipeline { k, k_prime } => {
                if k_prime == 0 || k_prime >= k || k > n_layers {
                    Err(ConfigError::InvalidStrategy(format!(
                        "superpipeline needs 0 < k' < k <= n_layers ({n_layers}), got k={k}, k'={k_prime}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.transfer_mode {
            TransferMode::Sequential => "sequential",
            TransferMode::Batch => "batch",
        };
        write!(f, "{} [{mode}]", self.strategy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pass {
    Forward,
    Backward,
}

/// One compute step of the execution stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub item: usize,
    pub layer: usize,
    pub pass: Pass,
}

/// Item-major inference stream: `(0,0)…(0,n−1),(1,0)…`.
pub fn execution_stream(n_layers: usize, n_items: usize) -> Vec<Step> {
    (0..n_items)
        .flat_map(|item| {
            (0..n_layers).map(move |layer| Step {
                item,
                layer,
                pass: Pass::Forward,
            })
        })
        .collect()
}

/// One training step: forward over layers `0..n`, then backward `n−1..=0`.
pub fn training_stream(n_layers: usize) -> Vec<Step> {
    let forward = (0..n_layers).map(|layer| Step {
        item: 0,
        layer,
        pass: Pass::Forward,
    });
    let backward = (0..n_layers).rev().map(|layer| Step {
        item: 0,
        layer,
        pass: Pass::Backward,
    });
    forward.chain(backward).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    Host,
    InFlightToDevice,
    Device,
    InFlightToHost,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    IssueH2D(Vec<usize>),
    IssueD2H(Vec<usize>),
    BeginCompute(usize),
    Wait,
}

/// Output of one policy step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub actions: Vec<Action>,
    /// Stream positions that enter the residency window.
    pub schedule: Range<usize>,
    /// Computed positions that leave the window.
    pub retire: Range<usize>,
}

impl Plan {
    fn at(scheduled: usize, retired: usize) -> Self {
        Self {
            actions: Vec::new(),
            schedule: scheduled..scheduled,
            retire: retired..retired,
        }
    }

    /// True if the plan changes nothing besides possibly starting compute.
    pub fn is_idle(&self) -> bool {
        self.schedule.is_empty()
            && self.retire.is_empty()
            && self
                .actions
                .iter()
                .all(|a| matches!(a, Action::BeginCompute(_) | Action::Wait))
    }

    pub fn begin_compute(&self) -> Option<usize> {
        self.actions.iter().find_map(|a| match a {
            Action::BeginCompute(p) => Some(*p),
            _ => None,
        })
    }
}

/// Progress through the execution stream plus per-layer weight placement.
#[derive(Debug, Clone)]
pub struct PipelineState {
    stream: Vec<Step>,
    placement: Vec<Placement>,
    next_compute: usize,
    computing: bool,
    computed: usize,
    scheduled: usize,
    retired: usize,
}

impl PipelineState {
    pub fn new(stream: Vec<Step>, n_layers: usize) -> Self {
        debug_assert!(stream.iter().all(|s| s.layer < n_layers));
        Self {
            stream,
            placement: vec![Placement::Host; n_layers],
            next_compute: 0,
            computing: false,
            computed: 0,
            scheduled: 0,
            retired: 0,
        }
    }

    pub fn stream(&self) -> &[Step] {
        &self.stream
    }

    pub fn stream_length(&self) -> usize {
        self.stream.len()
    }

    pub fn n_layers(&self) -> usize {
        self.placement.len()
    }

    pub fn placement(&self, layer: usize) -> Placement {
        self.placement[layer]
    }

    pub fn placements(&self) -> &[Placement] {
        &self.placement
    }

    pub fn next_compute(&self) -> usize {
        self.next_compute
    }

    pub fn is_computing(&self) -> bool {
        self.computing
    }

    pub fn computed(&self) -> usize {
        self.computed
    }

    pub fn scheduled(&self) -> usize {
        self.scheduled
    }

    pub fn retired(&self) -> usize {
        self.retired
    }

    pub fn computed_since_last_evict(&self) -> usize {
        self.computed - self.retired
    }

    pub fn is_complete(&self) -> bool {
        self.computed == self.stream.len()
    }

    pub fn count(&self, placement: Placement) -> usize {
        self.placement.iter().filter(|p| **p == placement).count()
    }

    pub fn apply(&mut self, plan: &Plan) {
        debug_assert_eq!(plan.schedule.start, self.scheduled);
        debug_assert_eq!(plan.retire.start, self.retired);
        for action in &plan.actions {
            match action {
                Action::IssueH2D(layers) => {
                    for &l in layers {
                        self.placement[l] = Placement::InFlightToDevice;
                    }
                }
                Action::IssueD2H(layers) => {
                    for &l in layers {
                        debug_assert_eq!(self.placement[l], Placement::Device);
                        self.placement[l] = Placement::InFlightToHost;
                    }
                }
                Action::BeginCompute(_) | Action::Wait => {}
            }
        }
        self.scheduled = plan.schedule.end;
        self.retired = plan.retire.end;
    }

    pub fn begin_compute(&mut self, position: usize) {
        assert!(!self.computing, "compute engine already busy");
        assert_eq!(position, self.next_compute, "compute out of stream order");
        self.computing = true;
        self.next_compute += 1;
    }

    pub fn finish_compute(&mut self) {
        assert!(self.computing, "no compute in progress");
        self.computing = false;
        self.computed += 1;
    }

    /// Weights of `layer` finished arriving on the device.
    pub fn mark_resident(&mut self, layer: usize) {
        debug_assert_eq!(self.placement[layer], Placement::InFlightToDevice);
        self.placement[layer] = Placement::Device;
    }

    /// The device copy of `layer` finished draining. A reload issued in the
    /// meantime keeps the layer in flight to the device.
    pub fn mark_evicted(&mut self, layer: usize) {
        if self.placement[layer] == Placement::InFlightToHost {
            self.placement[layer] = Placement::Host;
        }
    }

    fn layers_of(&self, positions: Range<usize>) -> BTreeSet<usize> {
        self.stream[positions].iter().map(|s| s.layer).collect()
    }

    /// Distinct layers of `positions`, in stream order, that are neither on
    /// the device nor on their way there.
    fn missing_layers(&self, positions: Range<usize>) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        self.stream[positions]
            .iter()
            .map(|s| s.layer)
            .filter(|l| {
                !matches!(self.placement[*l], Placement::Device | Placement::InFlightToDevice) && seen.insert(*l)
            })
            .collect()
    }

    fn next_is_resident(&self) -> bool {
        self.next_compute < self.scheduled
            && self.placement[self.stream[self.next_compute].layer] == Placement::Device
    }
}

/// One deterministic policy step.
pub fn policy_step(cfg: &StrategyConfig, state: &PipelineState) -> Plan {
    let mut plan = match cfg.strategy {
        Strategy::Standard => standard_step(state),
        Strategy::CpuOnly => cpu_only_step(state),
        Strategy::Naive { k } => naive_step(state, k),
        Strategy::Superpipeline { k, k_prime } => superpipeline_step(state, k, k_prime),
    };
    if plan.actions.is_empty() {
        plan.actions.push(Action::Wait);
    }
    plan
}

fn retire_at_end(state: &PipelineState, plan: &mut Plan) {
    if state.is_complete() && state.retired < state.computed {
        plan.retire = state.retired..state.computed;
    }
}

fn standard_step(state: &PipelineState) -> Plan {
    let mut plan = Plan::at(state.scheduled, state.retired);
    if state.scheduled == 0 && state.stream_length() > 0 {
        let all = 0..state.stream_length();
        let layers = state.missing_layers(all.clone());
        plan.actions.push(Action::IssueH2D(layers));
        plan.schedule = all;
        return plan;
    }
    retire_at_end(state, &mut plan);
    if !state.computing && state.next_is_resident() {
        plan.actions.push(Action::BeginCompute(state.next_compute));
    }
    plan
}

fn cpu_only_step(state: &PipelineState) -> Plan {
    let mut plan = Plan::at(state.scheduled, state.retired);
    if state.scheduled == 0 && state.stream_length() > 0 {
        plan.schedule = 0..state.stream_length();
    }
    retire_at_end(state, &mut plan);
    if !state.computing && state.next_compute < plan.schedule.end {
        plan.actions.push(Action::BeginCompute(state.next_compute));
    }
    plan
}

fn naive_step(state: &PipelineState, k: usize) -> Plan {
    let len = state.stream_length();
    let mut plan = Plan::at(state.scheduled, state.retired);
    if state.retired == state.scheduled {
        // Between groups: load the next one once every eviction has drained.
        if state.scheduled < len && state.count(Placement::InFlightToHost) == 0 {
            let group = state.scheduled..(state.scheduled + k).min(len);
            let layers = state.missing_layers(group.clone());
            if !layers.is_empty() {
                plan.actions.push(Action::IssueH2D(layers));
            }
            plan.schedule = group;
        }
        return plan;
    }
    let group = state.retired..state.scheduled;
    if state.computed == state.scheduled {
        let evict: Vec<usize> = state
            .layers_of(group.clone())
            .into_iter()
            .filter(|l| state.placement[*l] == Placement::Device)
            .collect();
        if !evict.is_empty() {
            plan.actions.push(Action::IssueD2H(evict));
        }
        plan.retire = group;
        return plan;
    }
    let loaded = state
        .layers_of(group)
        .iter()
        .all(|l| state.placement[*l] == Placement::Device);
    if loaded && !state.computing {
        plan.actions.push(Action::BeginCompute(state.next_compute));
    }
    plan
}

fn superpipeline_step(state: &PipelineState, k: usize, k_prime: usize) -> Plan {
    let len = state.stream_length();
    let mut plan = Plan::at(state.scheduled, state.retired);
    if state.scheduled == 0 && len > 0 {
        let window = 0..k.min(len);
        let layers = state.missing_layers(window.clone());
        plan.actions.push(Action::IssueH2D(layers));
        plan.schedule = window;
        return plan;
    }

    let pending = state.computed - state.retired;
    if pending >= k_prime || (state.is_complete() && pending > 0) {
        let group = state.retired..state.retired + pending.min(k_prime);
        let incoming = state.scheduled..(state.scheduled + k_prime).min(len);
        // Layers still needed by positions that are scheduled but not yet
        // computed stay resident instead of making a round trip.
        let needed = state.layers_of(state.computed..incoming.end);
        let mut evict = Vec::new();
        for layer in state.stream[group.clone()].iter().map(|s| s.layer) {
            if !needed.contains(&layer) && state.placement[layer] == Placement::Device && !evict.contains(&layer) {
                evict.push(layer);
            }
        }
        let load = state.missing_layers(incoming.clone());
        if !evict.is_empty() {
            plan.actions.push(Action::IssueD2H(evict));
        }
        if !load.is_empty() {
            plan.actions.push(Action::IssueH2D(load));
        }
        plan.retire = group;
        plan.schedule = incoming;
    }

    if !state.computing && state.next_is_resident() {
        plan.actions.push(Action::BeginCompute(state.next_compute));
    }
    plan
}

/// Weight bytes resident at the policy's peak when admission never blocks
/// and every eviction drains before the next group retires.
pub fn peak_weight_residency(cfg: &StrategyConfig, n_layers: usize, weight_bytes_per_layer: u64) -> u64 {
    let layers = match cfg.strategy {
        Strategy::Standard => n_layers,
        Strategy::CpuOnly => 0,
        Strategy::Naive { k } => k.min(n_layers),
        Strategy::Superpipeline { k, k_prime } => (k + k_prime).min(n_layers),
    };
    layers as u64 * weight_bytes_per_layer
}
