//! Discrete-event execution of an inference stream or a training step.
//!
//! The numerics run eagerly, in stream order, through the same functions the
//! reference oracle uses; only virtual time depends on the strategy.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arena::{
    call_count, item_transfer_time, AllocHandle, AllocTag, ArenaConfig, ArenaError, Clock, DeviceArena, Direction,
    Event, EventKind, TransferChannel,
};
use crate::model::{
    layer_backward, layer_forward, mse_loss, reference_forward, sgd_update, BlockGrads, LayeredModel, ModelError,
    Tensor,
};
use crate::scheduler::{
    execution_stream, policy_step, training_stream, Action, ConfigError, Pass, PipelineState, Placement, Plan,
    Step, StrategyConfig,
};
use crate::trace::{summarize, EventDetail, Payload, ReplayContext, RunSummary, StallReason, Trace, TraceError, TraceEvent};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
    #[error("OOM-deadlock at t={time}: {detail} ({resident_bytes} of {capacity_bytes} B resident)")]
    OomDeadlock {
        time: f64,
        resident_bytes: u64,
        capacity_bytes: u64,
        detail: String,
    },
}

impl EngineError {
    pub fn is_oom(&self) -> bool {
        matches!(self, EngineError::OomDeadlock { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub checkpointing: bool,
    pub batch_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(EngineError::InvalidWorkload(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(EngineError::InvalidWorkload("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InferenceRun {
    pub outputs: Vec<Tensor>,
    pub trace: Trace,
    pub summary: RunSummary,
    pub replay: ReplayContext,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub loss: f32,
    pub model: LayeredModel,
    pub grads: Vec<Option<BlockGrads>>,
    pub trace: Trace,
    pub summary: RunSummary,
    pub replay: ReplayContext,
}

pub fn forward_flops(rows: usize, d: usize) -> f64 {
    2.0 * rows as f64 * (d * d) as f64
}

pub fn backward_flops(rows: usize, d: usize) -> f64 {
    4.0 * rows as f64 * (d * d) as f64
}

pub fn activation_bytes(rows: usize, d: usize) -> u64 {
    (rows * d * 4) as u64
}

/// sha256 over each tensor's shape and f32 bit patterns, in order.
pub fn output_digest(tensors: &[Tensor]) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        for dim in t.shape() {
            hasher.update((*dim as u64).to_le_bytes());
        }
        for v in t.values() {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

/// Digest of a training step's observable result: loss and every parameter.
pub fn train_digest(loss: f32, model: &LayeredModel) -> String {
    let mut hasher = Sha256::new();
    hasher.update(loss.to_bits().to_le_bytes());
    for block in &model.blocks {
        for v in block.weights.iter().chain(&block.bias) {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fidelity {
    pub digest: String,
    pub matches: bool,
}

/// Recomputes the reference outputs and compares bit patterns.
pub fn verify_fidelity(outputs: &[Tensor], model: &LayeredModel, inputs: &[Tensor]) -> Result<Fidelity, ModelError> {
    let reference = inputs
        .iter()
        .map(|x| reference_forward(model, x))
        .collect::<Result<Vec<_>, _>>()?;
    let matches = outputs.len() == reference.len()
        && outputs.iter().zip(&reference).all(|(a, b)| {
            a.shape() == b.shape() && a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    Ok(Fidelity {
        digest: output_digest(outputs),
        matches,
    })
}

pub fn run_inference(
    model: &LayeredModel,
    inputs: &[Tensor],
    strategy: &StrategyConfig,
    arena_cfg: &ArenaConfig,
) -> Result<InferenceRun, EngineError> {
    strategy.validate(model.n_layers())?;
    arena_cfg.validate()?;
    let first = inputs
        .first()
        .ok_or_else(|| EngineError::InvalidWorkload("at least one input item is required".into()))?;
    let rows = check_matrix(first, model.d, "input")?;
    for x in inputs {
        if x.shape() != first.shape() {
            return Err(EngineError::InvalidWorkload(format!(
                "all inputs must share one shape, got {:?} and {:?}",
                first.shape(),
                x.shape()
            )));
        }
    }
    let work = Work::Infer {
        inputs,
        current: None,
        outputs: Vec::with_capacity(inputs.len()),
    };
    let stream = execution_stream(model.n_layers(), inputs.len());
    let engine = Engine::new(model, *strategy, arena_cfg.clone(), stream, rows, inputs.len(), work);
    let (trace, work, replay) = engine.run()?;
    let Work::Infer { outputs, .. } = work else {
        unreachable!("inference work")
    };
    let mut summary = summarize(&trace, inputs.len())?;
    summary.strategy = strategy.to_string();
    summary.output_digest = output_digest(&outputs);
    Ok(InferenceRun {
        outputs,
        trace,
        summary,
        replay,
    })
}

pub fn run_train_step(
    model: &LayeredModel,
    x: &Tensor,
    target: &Tensor,
    strategy: &StrategyConfig,
    arena_cfg: &ArenaConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainRun, EngineError> {
    strategy.validate(model.n_layers())?;
    arena_cfg.validate()?;
    train_cfg.validate()?;
    let rows = check_matrix(x, model.d, "input")?;
    if target.shape() != x.shape() {
        return Err(EngineError::InvalidWorkload(format!(
            "target shape {:?} differs from input shape {:?}",
            target.shape(),
            x.shape()
        )));
    }
    if rows != train_cfg.batch_size {
        return Err(EngineError::InvalidWorkload(format!(
            "input has {rows} rows but batch_size is {}",
            train_cfg.batch_size
        )));
    }
    let n = model.n_layers();
    let work = Work::Train(Box::new(TrainWork {
        x,
        target,
        lr: train_cfg.lr,
        checkpointing: train_cfg.checkpointing,
        stored: vec![None; n],
        h: None,
        dy: None,
        loss: None,
        updated: model.clone(),
        grads: vec![None; n],
    }));
    let engine = Engine::new(model, *strategy, arena_cfg.clone(), training_stream(n), rows, 1, work);
    let (trace, work, replay) = engine.run()?;
    let Work::Train(train) = work else {
        unreachable!("training work")
    };
    let loss = train.loss.expect("forward pass finished");
    let mut summary = summarize(&trace, 1)?;
    summary.strategy = strategy.to_string();
    summary.output_digest = train_digest(loss, &train.updated);
    Ok(TrainRun {
        loss,
        model: train.updated,
        grads: train.grads,
        trace,
        summary,
        replay,
    })
}

fn check_matrix(t: &Tensor, d: usize, what: &str) -> Result<usize, EngineError> {
    match t.shape() {
        [rows, cols] if *cols == d && *rows > 0 => Ok(*rows),
        other => Err(EngineError::InvalidWorkload(format!(
            "{what} must have shape [b, {d}] with b >= 1, got {other:?}"
        ))),
    }
}

struct TrainWork<'a> {
    x: &'a Tensor,
    target: &'a Tensor,
    lr: f32,
    checkpointing: bool,
    stored: Vec<Option<Tensor>>,
    h: Option<Tensor>,
    dy: Option<Tensor>,
    loss: Option<f32>,
    updated: LayeredModel,
    grads: Vec<Option<BlockGrads>>,
}

enum Work<'a> {
    Infer {
        inputs: &'a [Tensor],
        current: Option<Tensor>,
        outputs: Vec<Tensor>,
    },
    Train(Box<TrainWork<'a>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActPlace {
    Absent,
    Device,
    ToHost,
    Host,
    ToDevice,
}

#[derive(Debug)]
struct Request {
    payload: Payload,
    items: Vec<usize>,
}

/// Request whose items are still being put on the link.
#[derive(Debug)]
struct Active {
    payload: Payload,
    items: Vec<usize>,
    next: usize,
    first_call: u64,
}

/// One direction of the link: a FIFO of requests served item by item.
struct Lane {
    channel: TransferChannel,
    queue: VecDeque<Request>,
    active: Option<Active>,
    busy: bool,
    calls: u64,
}

impl Lane {
    fn new(direction: Direction) -> Self {
        Self {
            channel: TransferChannel::new(direction),
            queue: VecDeque::new(),
            active: None,
            busy: false,
            calls: 0,
        }
    }

    fn is_drained(&self) -> bool {
        self.queue.is_empty() && self.active.is_none() && !self.busy
    }
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    direction: Direction,
    payload: Payload,
    index: usize,
}

const COMPUTE_PAYLOAD: u64 = u64::MAX;

struct Engine<'a> {
    model: &'a LayeredModel,
    cfg: StrategyConfig,
    arena_cfg: ArenaConfig,
    on_device: bool,
    rows_per_item: usize,
    weight_bytes: u64,
    act_bytes: u64,
    clock: Clock,
    arena: DeviceArena,
    h2d: Lane,
    d2h: Lane,
    inflight: Vec<InFlight>,
    state: PipelineState,
    weight_handle: Vec<Option<AllocHandle>>,
    draining: Vec<bool>,
    act: Vec<ActPlace>,
    act_handle: Vec<Option<AllocHandle>>,
    act_draining: Vec<bool>,
    grad_handle: Vec<Option<AllocHandle>>,
    computing: Option<(usize, usize)>,
    last_compute_row: Option<usize>,
    rows: Vec<TraceEvent>,
    open_stall: Option<usize>,
    started: bool,
    work: Work<'a>,
}

impl<'a> Engine<'a> {
    fn new(
        model: &'a LayeredModel,
        cfg: StrategyConfig,
        arena_cfg: ArenaConfig,
        stream: Vec<Step>,
        rows_per_item: usize,
        n_items: usize,
        work: Work<'a>,
    ) -> Self {
        let n = model.n_layers();
        let training = matches!(work, Work::Train(_));
        // Inference tracks one activation per item, training one per layer.
        let act_slots = if training { n } else { n_items };
        Self {
            model,
            cfg,
            on_device: cfg.strategy.uses_device(),
            rows_per_item,
            weight_bytes: model.weight_bytes_per_layer(),
            act_bytes: activation_bytes(rows_per_item, model.d),
            clock: Clock::new(),
            arena: DeviceArena::new(arena_cfg.clone()),
            arena_cfg,
            h2d: Lane::new(Direction::HostToDevice),
            d2h: Lane::new(Direction::DeviceToHost),
            inflight: Vec::new(),
            state: PipelineState::new(stream, n),
            weight_handle: vec![None; n],
            draining: vec![false; n],
            act: vec![ActPlace::Absent; act_slots],
            act_handle: vec![None; act_slots],
            act_draining: vec![false; act_slots],
            grad_handle: vec![None; n],
            computing: None,
            last_compute_row: None,
            rows: Vec::new(),
            open_stall: None,
            started: false,
            work,
        }
    }

    fn training(&self) -> bool {
        matches!(self.work, Work::Train(_))
    }

    fn run(mut self) -> Result<(Trace, Work<'a>, ReplayContext), EngineError> {
        self.dispatch()?;
        while let Some(t) = self.clock.peek_time() {
            while self.clock.peek_time() == Some(t) {
                let event = self.clock.pop().expect("peeked event");
                self.complete(event)?;
            }
            self.dispatch()?;
        }
        let finished = self.state.is_complete()
            && self.state.retired() == self.state.stream_length()
            && self.h2d.is_drained()
            && self.d2h.is_drained();
        if !finished {
            return Err(self.deadlock());
        }
        let replay = ReplayContext {
            n_layers: self.model.n_layers(),
            weight_bytes_per_layer: self.weight_bytes,
            activation_bytes: self.act_bytes,
            frozen: self.model.frozen_mask(),
            training: self.training(),
            on_device: self.on_device,
        };
        // Rows are created in dispatch order, which is already t_start order.
        debug_assert!(self.rows.windows(2).all(|w| w[0].t_start <= w[1].t_start));
        Ok((Trace::new(self.rows), self.work, replay))
    }

    fn deadlock(&self) -> EngineError {
        let detail = if let Some(active) = &self.h2d.active {
            format!(
                "host-to-device transfer of {:?} {} ({} bytes) can never be admitted",
                active.payload,
                active.items[active.next],
                self.payload_bytes(active.payload)
            )
        } else if !self.state.is_complete() {
            format!(
                "compute step {} is blocked on {:?}",
                self.state.next_compute(),
                self.block_reason()
            )
        } else {
            "stream finished with work outstanding".to_string()
        };
        EngineError::OomDeadlock {
            time: self.clock.now(),
            resident_bytes: self.arena.resident_bytes(),
            capacity_bytes: self.arena.capacity(),
            detail,
        }
    }

    fn payload_bytes(&self, payload: Payload) -> u64 {
        match payload {
            Payload::Weights => self.weight_bytes,
            Payload::Activations => self.act_bytes,
        }
    }

    fn push_row(&mut self, t_start: f64, t_end: f64, detail: EventDetail) -> usize {
        let footprint = self.arena.footprint();
        self.rows.push(TraceEvent {
            t_start,
            t_end,
            detail,
            resident_bytes: footprint.total(),
            footprint,
        });
        self.rows.len() - 1
    }

    fn dispatch(&mut self) -> Result<(), EngineError> {
        loop {
            let mut progress = false;
            let plan = policy_step(&self.cfg, &self.state);
            if !plan.is_idle() {
                self.apply_plan(&plan)?;
                progress = true;
            }
            if self.computing.is_none() {
                if let Some(p) = plan.begin_compute() {
                    progress |= self.try_begin_compute(p)?;
                }
            }
            progress |= self.try_advance(Direction::DeviceToHost)?;
            progress |= self.try_advance(Direction::HostToDevice)?;
            if !progress {
                break;
            }
        }
        if self.started && self.computing.is_none() && !self.state.is_complete() && self.open_stall.is_none() {
            let now = self.clock.now();
            let reason = self.block_reason();
            self.open_stall = Some(self.push_row(now, now, EventDetail::Stall { reason }));
        }
        Ok(())
    }

    fn block_reason(&self) -> StallReason {
        let p = self.state.next_compute();
        let step = self.state.stream()[p];
        if p >= self.state.scheduled() || self.state.placement(step.layer) != Placement::Device {
            StallReason::Weights
        } else if step.pass == Pass::Backward && self.act[step.layer] != ActPlace::Device {
            StallReason::Activation
        } else {
            StallReason::Memory
        }
    }

    fn apply_plan(&mut self, plan: &Plan) -> Result<(), EngineError> {
        if self.training() {
            self.retire_training(plan)?;
        }
        let mut offload = Vec::new();
        if let Work::Train(train) = &self.work {
            if train.checkpointing && self.on_device {
                let n = self.model.n_layers();
                for p in plan.retire.clone() {
                    let step = self.state.stream()[p];
                    let backward_at = 2 * n - 1 - step.layer;
                    if step.pass == Pass::Forward
                        && backward_at >= plan.schedule.end
                        && self.act[step.layer] == ActPlace::Device
                    {
                        offload.push(step.layer);
                    }
                }
            }
        }
        for action in &plan.actions {
            match action {
                Action::IssueD2H(layers) => {
                    for &l in layers {
                        self.draining[l] = true;
                    }
                    self.d2h.queue.push_back(Request {
                        payload: Payload::Weights,
                        items: layers.clone(),
                    });
                }
                Action::IssueH2D(layers) => {
                    if !offload.is_empty() {
                        self.queue_offload(std::mem::take(&mut offload));
                    }
                    self.h2d.queue.push_back(Request {
                        payload: Payload::Weights,
                        items: layers.clone(),
                    });
                }
                Action::BeginCompute(_) | Action::Wait => {}
            }
        }
        if !offload.is_empty() {
            self.queue_offload(offload);
        }
        if self.training() && self.on_device {
            let reload: Vec<usize> = plan
                .schedule
                .clone()
                .map(|p| self.state.stream()[p])
                .filter(|s| s.pass == Pass::Backward && matches!(self.act[s.layer], ActPlace::ToHost | ActPlace::Host))
                .map(|s| s.layer)
                .collect();
            if !reload.is_empty() {
                for &l in &reload {
                    self.act[l] = ActPlace::ToDevice;
                }
                self.h2d.queue.push_back(Request {
                    payload: Payload::Activations,
                    items: reload,
                });
            }
        }
        self.state.apply(plan);
        Ok(())
    }

    fn queue_offload(&mut self, layers: Vec<usize>) {
        for &l in &layers {
            self.act[l] = ActPlace::ToHost;
            self.act_draining[l] = true;
        }
        self.d2h.queue.push_back(Request {
            payload: Payload::Activations,
            items: layers,
        });
    }

    /// Releases gradient buffers of backward steps leaving the window.
    fn retire_training(&mut self, plan: &Plan) -> Result<(), EngineError> {
        let mut released = Vec::new();
        for p in plan.retire.clone() {
            let step = self.state.stream()[p];
            if step.pass == Pass::Backward {
                if let Some(handle) = self.grad_handle[step.layer].take() {
                    self.arena.free(handle)?;
                    released.push(step.layer);
                }
            }
        }
        if !released.is_empty() {
            let row = self.last_compute_row.expect("a compute finished before retirement");
            debug_assert_eq!(self.rows[row].t_end, self.clock.now());
            if let EventDetail::Compute { release, .. } = &mut self.rows[row].detail {
                release.extend(released);
            }
        }
        Ok(())
    }

    fn try_begin_compute(&mut self, p: usize) -> Result<bool, EngineError> {
        let step = self.state.stream()[p];
        let training = self.training();
        let mut needs: Vec<(u64, AllocTag)> = Vec::new();
        if self.on_device {
            match (training, step.pass) {
                (false, _) => {
                    if step.layer == 0 {
                        needs.push((self.act_bytes, AllocTag::Activation(step.item)));
                    }
                }
                (true, Pass::Forward) => needs.push((self.act_bytes, AllocTag::Activation(step.layer))),
                (true, Pass::Backward) => {
                    if self.act[step.layer] != ActPlace::Device {
                        return Ok(false);
                    }
                    if !self.model.blocks[step.layer].frozen {
                        needs.push((self.weight_bytes, AllocTag::Gradient(step.layer)));
                    }
                }
            }
        }
        let total: u64 = needs.iter().map(|(b, _)| b).sum();
        if !self.arena.can_admit(total) {
            return Ok(false);
        }
        for (bytes, tag) in needs {
            let handle = self.arena.alloc(bytes, tag)?;
            match tag {
                AllocTag::Activation(slot) => {
                    self.act_handle[slot] = Some(handle);
                    self.act[slot] = ActPlace::Device;
                }
                AllocTag::Gradient(l) => self.grad_handle[l] = Some(handle),
                AllocTag::Weights(_) => unreachable!("compute never allocates weights"),
            }
        }
        self.state.begin_compute(p);
        self.compute_numerics(step)?;

        let rate = if self.on_device {
            self.arena_cfg.device_compute_rate
        } else {
            self.arena_cfg.host_compute_rate
        };
        let flops = match step.pass {
            Pass::Forward => forward_flops(self.rows_per_item, self.model.d),
            Pass::Backward => backward_flops(self.rows_per_item, self.model.d),
        };
        let now = self.clock.now();
        let end = now + flops / rate;
        self.clock.schedule(end, EventKind::ComputeComplete, COMPUTE_PAYLOAD);
        if let Some(stall) = self.open_stall.take() {
            self.rows[stall].t_end = now;
        }
        let row = self.push_row(
            now,
            end,
            EventDetail::Compute {
                pass: step.pass,
                item: step.item,
                layer: step.layer,
                release: Vec::new(),
            },
        );
        self.computing = Some((p, row));
        self.started = true;
        Ok(true)
    }

    fn compute_numerics(&mut self, step: Step) -> Result<(), EngineError> {
        let n = self.model.n_layers();
        let block = &self.model.blocks[step.layer];
        match &mut self.work {
            Work::Infer {
                inputs,
                current,
                outputs,
            } => {
                let y = match current.take() {
                    Some(x) if step.layer > 0 => layer_forward(block, &x)?,
                    _ => layer_forward(block, &inputs[step.item])?,
                };
                if step.layer + 1 == n {
                    outputs.push(y);
                } else {
                    *current = Some(y);
                }
            }
            Work::Train(train) => match step.pass {
                Pass::Forward => {
                    let x = match train.h.take() {
                        Some(h) if step.layer > 0 => h,
                        _ => train.x.clone(),
                    };
                    let y = layer_forward(block, &x)?;
                    train.stored[step.layer] = Some(x);
                    if step.layer + 1 == n {
                        let (loss, dy) = mse_loss(&y, train.target)?;
                        train.loss = Some(loss);
                        train.dy = Some(dy);
                    } else {
                        train.h = Some(y);
                    }
                }
                Pass::Backward => {
                    let x = train.stored[step.layer].take().expect("forward stored this activation");
                    let dy = train.dy.take().expect("upstream gradient available");
                    let g = layer_backward(block, &x, &dy)?;
                    if !block.frozen {
                        sgd_update(&mut train.updated.blocks[step.layer], &g, train.lr);
                        train.grads[step.layer] = Some(BlockGrads {
                            dw: g.dw.clone(),
                            db: g.db.clone(),
                        });
                    }
                    train.dy = Some(g.dx);
                }
            },
        }
        Ok(())
    }

    fn lane(&mut self, direction: Direction) -> &mut Lane {
        match direction {
            Direction::HostToDevice => &mut self.h2d,
            Direction::DeviceToHost => &mut self.d2h,
        }
    }

    /// A reload cannot cross the link before the old device copy of the
    /// same layer (or activation) has drained back to the host.
    fn gated(&self, payload: Payload, index: usize) -> bool {
        match payload {
            Payload::Weights => self.draining[index],
            Payload::Activations => self.act_draining[index],
        }
    }

    /// Puts the next item of `direction` on the link if possible. An H2D
    /// item reserves its own bytes when it starts.
    fn try_advance(&mut self, direction: Direction) -> Result<bool, EngineError> {
        let mode = self.cfg.transfer_mode;
        let h2d = direction == Direction::HostToDevice;
        if self.lane(direction).busy {
            return Ok(false);
        }
        if self.lane(direction).active.is_none() {
            let Some(req) = self.lane(direction).queue.pop_front() else {
                return Ok(false);
            };
            let lane = self.lane(direction);
            let first_call = lane.calls;
            lane.calls += call_count(mode, req.items.len()) as u64;
            lane.active = Some(Active {
                payload: req.payload,
                items: req.items,
                next: 0,
                first_call,
            });
        }
        let (payload, index, position, first_call) = {
            let active = self.lane(direction).active.as_ref().expect("active request");
            (active.payload, active.items[active.next], active.next, active.first_call)
        };
        let size = self.payload_bytes(payload);
        let mut reserve = Vec::new();
        if h2d {
            if self.gated(payload, index) || !self.arena.can_admit(size) {
                return Ok(false);
            }
            match payload {
                Payload::Weights => self.weight_handle[index] = Some(self.arena.alloc(size, AllocTag::Weights(index))?),
                Payload::Activations => {
                    self.act_handle[index] = Some(self.arena.alloc(size, AllocTag::Activation(index))?)
                }
            }
            reserve.push(index);
        }
        let duration = item_transfer_time(
            mode,
            position == 0,
            size,
            self.arena_cfg.bandwidth(direction),
            self.arena_cfg.per_call_latency,
        );
        let id = self.inflight.len() as u64;
        self.inflight.push(InFlight {
            direction,
            payload,
            index,
        });
        let lane = match direction {
            Direction::HostToDevice => &mut self.h2d,
            Direction::DeviceToHost => &mut self.d2h,
        };
        let (start, end) = lane.channel.enqueue_item(&mut self.clock, duration, id);
        lane.busy = true;
        let active = lane.active.as_mut().expect("active request");
        active.next += 1;
        if active.next == active.items.len() {
            lane.active = None;
        }
        let call = first_call + (call_count(mode, position + 1) - 1) as u64;
        let detail = if h2d {
            EventDetail::H2D {
                payload,
                layer: index,
                reserve,
                call,
            }
        } else {
            EventDetail::D2H {
                payload,
                layer: index,
                call,
            }
        };
        self.push_row(start, end, detail);
        Ok(true)
    }

    fn complete(&mut self, event: Event) -> Result<(), EngineError> {
        match event.kind {
            EventKind::ComputeComplete => {
                let (p, row) = self.computing.take().expect("compute in progress");
                let step = self.state.stream()[p];
                if self.on_device {
                    let slot = match (self.training(), step.pass) {
                        (false, _) if step.layer + 1 == self.model.n_layers() => Some(step.item),
                        (true, Pass::Backward) => Some(step.layer),
                        _ => None,
                    };
                    if let Some(slot) = slot {
                        let handle = self.act_handle[slot].take().expect("activation is resident");
                        self.arena.free(handle)?;
                        self.act[slot] = ActPlace::Absent;
                    }
                }
                self.state.finish_compute();
                self.last_compute_row = Some(row);
            }
            EventKind::H2DComplete => {
                let item = self.inflight[event.payload as usize];
                debug_assert_eq!(item.direction, Direction::HostToDevice);
                self.h2d.busy = false;
                match item.payload {
                    Payload::Weights => self.state.mark_resident(item.index),
                    Payload::Activations => self.act[item.index] = ActPlace::Device,
                }
            }
            EventKind::D2HComplete => {
                let item = self.inflight[event.payload as usize];
                debug_assert_eq!(item.direction, Direction::DeviceToHost);
                self.d2h.busy = false;
                match item.payload {
                    Payload::Weights => {
                        let handle = self.weight_handle[item.index].take().expect("evicted layer was resident");
                        self.arena.free(handle)?;
                        self.draining[item.index] = false;
                        self.state.mark_evicted(item.index);
                    }
                    Payload::Activations => {
                        let handle = self.act_handle[item.index].take().expect("offloaded activation was resident");
                        self.arena.free(handle)?;
                        self.act_draining[item.index] = false;
                        if self.act[item.index] == ActPlace::ToHost {
                            self.act[item.index] = ActPlace::Host;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::TransferMode;
    use crate::model::{build_model, LayerBlock, Activation};
    use crate::scheduler::Strategy;
    use crate::trace::{audit, TraceKind};

    /// Four d = 2 layers; rates below give 1 s per H2D, 2 s per D2H and
    /// 1 s per compute.
    fn hand_model() -> LayeredModel {
        let blocks = (0..4)
            .map(|i| LayerBlock::identity(i, 2, if i == 3 { Activation::Identity } else { Activation::Relu }))
            .collect();
        LayeredModel::from_blocks(1, blocks).unwrap()
    }

    fn hand_arena(capacity_layers: u64) -> ArenaConfig {
        let s = block_bytes();
        ArenaConfig {
            capacity_bytes: capacity_layers * s + 8,
            h2d_bandwidth: s as f64,
            d2h_bandwidth: s as f64 / 2.0,
            per_call_latency: 0.0,
            device_compute_rate: forward_flops(1, 2),
            host_compute_rate: forward_flops(1, 2) / 4.0,
        }
    }

    fn block_bytes() -> u64 {
        crate::model::block_weight_bytes(2)
    }

    fn x() -> Tensor {
        Tensor::new(vec![1, 2], vec![0.5, -0.25]).unwrap()
    }

    fn sp(k: usize, k_prime: usize) -> StrategyConfig {
        StrategyConfig::new(Strategy::Superpipeline { k, k_prime }, TransferMode::Sequential)
    }

    #[test]
    fn hand_timeline() {
        let run = run_inference(&hand_model(), &[x()], &sp(2, 1), &hand_arena(4)).unwrap();
        assert_eq!(run.summary.time_to_output, 5.0);
        assert_eq!(run.summary.makespan, 10.0);
        assert_eq!(run.summary.per_item_time, 4.0);
        assert_eq!(run.summary.total_stall_time, 0.0);
        let d2h: Vec<(f64, f64)> = run.trace.of_kind(TraceKind::D2H).map(|e| (e.t_start, e.t_end)).collect();
        assert_eq!(d2h, vec![(2.0, 4.0), (4.0, 6.0), (6.0, 8.0), (8.0, 10.0)]);
        audit(&run.trace, &run.replay, hand_arena(4).capacity_bytes).unwrap();
    }

    #[test]
    fn hand_timeline_at_three_layers_of_capacity() {
        let run = run_inference(&hand_model(), &[x()], &sp(2, 1), &hand_arena(3)).unwrap();
        assert_eq!(run.summary.time_to_output, 6.0);
    }

    #[test]
    fn capacity_below_one_layer_is_oom() {
        let cfg = hand_arena(0);
        let err = run_inference(&hand_model(), &[x()], &sp(2, 1), &cfg).unwrap_err();
        assert!(err.is_oom(), "{err}");
    }

    #[test]
    fn cpu_only_scales_by_rate() {
        let model = build_model(3, 3, 4, 0).unwrap();
        let inputs = vec![Tensor::random(1, 0, 2, 4), Tensor::random(1, 1, 2, 4)];
        let mut arena = hand_arena(100);
        arena.h2d_bandwidth = 1e12;
        let standard = StrategyConfig::new(Strategy::Standard, TransferMode::Batch);
        let cpu = StrategyConfig::new(Strategy::CpuOnly, TransferMode::Batch);
        let a = run_inference(&model, &inputs, &standard, &arena).unwrap();
        let b = run_inference(&model, &inputs, &cpu, &arena).unwrap();
        assert_eq!(a.summary.output_digest, b.summary.output_digest);
        assert_eq!(b.summary.peak_bytes, 0);
        let ratio = arena.device_compute_rate / arena.host_compute_rate;
        let compute_a: f64 = a.trace.of_kind(TraceKind::Compute).map(TraceEvent::duration).sum();
        let compute_b: f64 = b.trace.of_kind(TraceKind::Compute).map(TraceEvent::duration).sum();
        assert_eq!(compute_b, compute_a * ratio);
    }

    #[test]
    fn train_step_matches_reference() {
        let model = build_model(9, 5, 3, 1).unwrap();
        let x = Tensor::random(2, 0, 2, 3);
        let target = Tensor::random(2, 1, 2, 3);
        let cfg = TrainConfig {
            lr: 0.05,
            checkpointing: true,
            batch_size: 2,
        };
        let reference = crate::model::reference_train_step(&model, &x, &target, cfg.lr).unwrap();
        let mut arena = hand_arena(100);
        arena.capacity_bytes = 1 << 20;
        let run = run_train_step(&model, &x, &target, &sp(3, 2), &arena, &cfg).unwrap();
        assert_eq!(run.loss.to_bits(), reference.loss.to_bits());
        assert_eq!(run.model, reference.updated);
        assert_eq!(run.grads, reference.grads);
        audit(&run.trace, &run.replay, arena.capacity_bytes).unwrap();
    }
}
