//! Bounded device memory, the two transfer channels, and the virtual clock.
//!
//! Everything here runs on virtual seconds. Nothing reads the wall clock.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArenaError {
    #[error("insufficient capacity: {requested} B requested, {resident} B resident of {capacity} B")]
    InsufficientCapacity {
        requested: u64,
        resident: u64,
        capacity: u64,
    },
    #[error("unknown or already freed allocation handle {0:?}")]
    UnknownHandle(AllocHandle),
    #[error("invalid arena config: {0}")]
    InvalidConfig(String),
}

/// Device and link characteristics. Rates are per virtual second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArenaConfig {
    pub capacity_bytes: u64,
    pub h2d_bandwidth: f64,
    pub d2h_bandwidth: f64,
    pub per_call_latency: f64,
    pub device_compute_rate: f64,
    pub host_compute_rate: f64,
}

impl ArenaConfig {
    pub fn validate(&self) -> Result<(), ArenaError> {
        let rates = [
            ("h2d_bandwidth", self.h2d_bandwidth),
            ("d2h_bandwidth", self.d2h_bandwidth),
            ("device_compute_rate", self.device_compute_rate),
            ("host_compute_rate", self.host_compute_rate),
        ];
        for (name, value) in rates {
            if !(value.is_finite() && value > 0.0) {
                return Err(ArenaError::InvalidConfig(format!("{name} must be a positive number, got {value}")));
            }
        }
        if !(self.per_call_latency.is_finite() && self.per_call_latency >= 0.0) {
            return Err(ArenaError::InvalidConfig(format!(
                "per_call_latency must be >= 0, got {}",
                self.per_call_latency
            )));
        }
        Ok(())
    }

    pub fn bandwidth(&self, direction: Direction) -> f64 {
        match direction {
            Direction::HostToDevice => self.h2d_bandwidth,
            Direction::DeviceToHost => self.d2h_bandwidth,
        }
    }

    pub fn with_capacity(mut self, capacity_bytes: u64) -> Self {
        self.capacity_bytes = capacity_bytes;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AllocHandle(pub u64);

/// What an allocation holds. The layer index refers to the weights, the
/// input activation, or the gradient buffer of that layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocTag {
    Weights(usize),
    Activation(usize),
    Gradient(usize),
}

/// Device bytes split by purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub gradient_bytes: u64,
}

impl MemoryFootprint {
    pub fn total(&self) -> u64 {
        self.weight_bytes + self.activation_bytes + self.gradient_bytes
    }

    fn slot(&mut self, tag: AllocTag) -> &mut u64 {
        match tag {
            AllocTag::Weights(_) => &mut self.weight_bytes,
            AllocTag::Activation(_) => &mut self.activation_bytes,
            AllocTag::Gradient(_) => &mut self.gradient_bytes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeviceArena {
    config: ArenaConfig,
    ledger: BTreeMap<AllocHandle, (u64, AllocTag)>,
    footprint: MemoryFootprint,
    next_handle: u64,
}

impl DeviceArena {
    pub fn new(config: ArenaConfig) -> Self {
        Self {
            config,
            ledger: BTreeMap::new(),
            footprint: MemoryFootprint::default(),
            next_handle: 0,
        }
    }

    pub fn config(&self) -> &ArenaConfig {
        &self.config
    }

    pub fn capacity(&self) -> u64 {
        self.config.capacity_bytes
    }

    pub fn resident_bytes(&self) -> u64 {
        self.footprint.total()
    }

    pub fn footprint(&self) -> MemoryFootprint {
        self.footprint
    }

    pub fn can_admit(&self, bytes: u64) -> bool {
        self.resident_bytes()
            .checked_add(bytes)
            .is_some_and(|total| total <= self.config.capacity_bytes)
    }

    pub fn alloc(&mut self, bytes: u64, tag: AllocTag) -> Result<AllocHandle, ArenaError> {
        if !self.can_admit(bytes) {
            return Err(ArenaError::InsufficientCapacity {
                requested: bytes,
                resident: self.resident_bytes(),
                capacity: self.config.capacity_bytes,
            });
        }
        let handle = AllocHandle(self.next_handle);
        self.next_handle += 1;
        self.ledger.insert(handle, (bytes, tag));
        *self.footprint.slot(tag) += bytes;
        Ok(handle)
    }

    /// Releases an allocation and returns its size.
    pub fn free(&mut self, handle: AllocHandle) -> Result<u64, ArenaError> {
        let (bytes, tag) = self.ledger.remove(&handle).ok_or(ArenaError::UnknownHandle(handle))?;
        *self.footprint.slot(tag) -= bytes;
        Ok(bytes)
    }

    pub fn live_allocations(&self) -> impl Iterator<Item = (AllocHandle, u64, AllocTag)> + '_ {
        self.ledger.iter().map(|(h, (b, t))| (*h, *b, *t))
    }

    pub fn ledger_sum(&self) -> u64 {
        self.ledger.values().map(|(b, _)| b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    HostToDevice,
    DeviceToHost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    /// One call per item, each paying the per-call latency.
    Sequential,
    /// One call for the whole item set.
    Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRequest {
    pub direction: Direction,
    pub items: Vec<usize>,
    pub mode: TransferMode,
    pub issue_time: f64,
}

impl TransferRequest {
    pub fn new(direction: Direction, items: Vec<usize>, mode: TransferMode, issue_time: f64) -> Self {
        debug_assert!(!items.is_empty(), "transfer request without items");
        debug_assert!(
            {
                let mut sorted = items.clone();
                sorted.sort_unstable();
                sorted.windows(2).all(|w| w[0] != w[1])
            },
            "duplicate items in transfer request"
        );
        Self {
            direction,
            items,
            mode,
            issue_time,
        }
    }
}

/// Offsets from the request start at which each item has fully crossed the
/// link. The last entry is the request duration.
///
/// Sequential: item `i` completes after `Σ_{j≤i} (latency + size_j/bw)`.
/// Batch: item `i` completes after `latency + Σ_{j≤i} size_j/bw`.
pub fn item_completion_offsets(mode: TransferMode, sizes: &[u64], bandwidth: f64, latency: f64) -> Vec<f64> {
    let mut elapsed = match mode {
        TransferMode::Sequential => 0.0,
        TransferMode::Batch => latency,
    };
    sizes
        .iter()
        .map(|size| {
            if mode == TransferMode::Sequential {
                elapsed += latency;
            }
            elapsed += *size as f64 / bandwidth;
            elapsed
        })
        .collect()
}

/// Link time of one item: Sequential items each pay the call latency, a
/// Batch request pays it once, on its first item.
pub fn item_transfer_time(mode: TransferMode, first: bool, size: u64, bandwidth: f64, latency: f64) -> f64 {
    let paid = match mode {
        TransferMode::Sequential => latency,
        TransferMode::Batch if first => latency,
        TransferMode::Batch => 0.0,
    };
    paid + size as f64 / bandwidth
}

pub fn transfer_duration(request: &TransferRequest, sizes: &[u64], cfg: &ArenaConfig) -> f64 {
    debug_assert_eq!(request.items.len(), sizes.len());
    item_completion_offsets(request.mode, sizes, cfg.bandwidth(request.direction), cfg.per_call_latency)
        .last()
        .copied()
        .unwrap_or(0.0)
}

/// Number of link calls a request costs.
pub fn call_count(mode: TransferMode, items: usize) -> usize {
    match mode {
        TransferMode::Sequential => items,
        TransferMode::Batch => usize::from(items > 0),
    }
}

/// Completion kinds, in tie-break order: at equal times D2H completions run
/// first, then H2D, then compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    D2HComplete,
    H2DComplete,
    ComputeComplete,
}

impl EventKind {
    pub fn for_direction(direction: Direction) -> Self {
        match direction {
            Direction::HostToDevice => EventKind::H2DComplete,
            Direction::DeviceToHost => EventKind::D2HComplete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub payload: u64,
}

#[derive(Debug)]
struct Pending {
    event: Event,
    seq: u64,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .event
            .time
            .total_cmp(&self.event.time)
            .then_with(|| other.event.kind.cmp(&self.event.kind))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Virtual clock with a min-ordered event queue.
#[derive(Debug, Default)]
pub struct Clock {
    now: f64,
    queue: BinaryHeap<Pending>,
    seq: u64,
}

impl Clock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn schedule(&mut self, time: f64, kind: EventKind, payload: u64) -> Event {
        assert!(
            time >= self.now && time.is_finite(),
            "event at {time} scheduled before now = {}",
            self.now
        );
        let event = Event { time, kind, payload };
        self.queue.push(Pending { event, seq: self.seq });
        self.seq += 1;
        event
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.queue.peek().map(|p| p.event.time)
    }

    pub fn pop(&mut self) -> Option<Event> {
        let pending = self.queue.pop()?;
        self.now = pending.event.time;
        Some(pending.event)
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Drains the queue in order, handing each event to `handler`; returns
    /// the time of the last event (or `now` if there was none).
    pub fn run_to_quiescence<E>(&mut self, mut handler: impl FnMut(&mut Clock, Event) -> Result<(), E>) -> Result<f64, E> {
        while let Some(event) = self.pop() {
            handler(self, event)?;
        }
        Ok(self.now)
    }
}

/// Result of placing a request on a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledTransfer {
    pub start: f64,
    /// Absolute completion time of each item.
    pub item_ends: Vec<f64>,
    /// Completion event of the whole request.
    pub completion: Event,
}

/// One direction of the host-device link. Requests are served strictly in
/// submission order; a request starts once the channel is free and its
/// issue time has passed.
#[derive(Debug, Clone)]
pub struct TransferChannel {
    direction: Direction,
    free_at: f64,
}

impl TransferChannel {
    pub fn new(direction: Direction) -> Self {
        Self { direction, free_at: 0.0 }
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn free_at(&self) -> f64 {
        self.free_at
    }

    pub fn is_idle(&self, now: f64) -> bool {
        self.free_at <= now
    }

    /// Schedules one completion event per item (payload `payload_base + i`);
    /// the last one completes the request.
    pub fn enqueue(
        &mut self,
        clock: &mut Clock,
        request: &TransferRequest,
        sizes: &[u64],
        cfg: &ArenaConfig,
        payload_base: u64,
    ) -> ScheduledTransfer {
        assert_eq!(request.direction, self.direction, "request sent to the wrong channel");
        let start = self.free_at.max(request.issue_time).max(clock.now());
        let offsets = item_completion_offsets(request.mode, sizes, cfg.bandwidth(self.direction), cfg.per_call_latency);
        let kind = EventKind::for_direction(self.direction);
        let mut completion = None;
        let item_ends: Vec<f64> = offsets
            .iter()
            .enumerate()
            .map(|(i, off)| {
                let end = start + off;
                completion = Some(clock.schedule(end, kind, payload_base + i as u64));
                end
            })
            .collect();
        self.free_at = *item_ends.last().expect("non-empty request");
        ScheduledTransfer {
            start,
            item_ends,
            completion: completion.expect("non-empty request"),
        }
    }

    /// Places a single item of `duration` on the link as soon as it is free;
    /// returns its `(start, end)`.
    pub fn enqueue_item(&mut self, clock: &mut Clock, duration: f64, payload: u64) -> (f64, f64) {
        let start = self.free_at.max(clock.now());
        let end = start + duration;
        clock.schedule(end, EventKind::for_direction(self.direction), payload);
        self.free_at = end;
        (start, end)
    }
}
