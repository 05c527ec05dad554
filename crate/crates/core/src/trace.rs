//! Event traces, run summaries, CSV/JSON export, and replay audit.

use std::collections::{BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::MemoryFootprint;
use crate::scheduler::{Pass, Step};

pub const CSV_HEADER: &str = "t_start,t_end,kind,detail,resident_bytes,weight_bytes,activation_bytes,gradient_bytes";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace is empty")]
    Empty,
    #[error("trace has no compute events")]
    NoCompute,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceKind {
    Compute,
    H2D,
    D2H,
    Stall,
}

impl TraceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TraceKind::Compute => "compute",
            TraceKind::H2D => "h2d",
            TraceKind::D2H => "d2h",
            TraceKind::Stall => "stall",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "compute" => TraceKind::Compute,
            "h2d" => TraceKind::H2D,
            "d2h" => TraceKind::D2H,
            "stall" => TraceKind::Stall,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Payload {
    Weights,
    Activations,
}

impl Payload {
    fn as_str(&self) -> &'static str {
        match self {
            Payload::Weights => "weights",
            Payload::Activations => "activations",
        }
    }
}

/// Why the compute engine sat idle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StallReason {
    /// Next layer's weights not resident yet.
    Weights,
    /// Stored activation for a backward step not resident yet.
    Activation,
    /// Activation or gradient buffer could not be admitted.
    Memory,
}

impl StallReason {
    fn as_str(&self) -> &'static str {
        match self {
            StallReason::Weights => "weights",
            StallReason::Activation => "activation",
            StallReason::Memory => "memory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventDetail {
    Compute {
        pass: Pass,
        item: usize,
        layer: usize,
        /// Gradient buffers released when this compute finished.
        release: Vec<usize>,
    },
    H2D {
        payload: Payload,
        layer: usize,
        /// Layers whose bytes were reserved when this segment started.
        reserve: Vec<usize>,
        call: u64,
    },
    D2H {
        payload: Payload,
        layer: usize,
        call: u64,
    },
    Stall {
        reason: StallReason,
    },
}

fn join(layers: &[usize]) -> String {
    layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("|")
}

impl fmt::Display for EventDetail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventDetail::Compute {
                pass,
                item,
                layer,
                release,
            } => {
                let pass = match pass {
                    Pass::Forward => "fwd",
                    Pass::Backward => "bwd",
                };
                write!(f, "pass={pass};item={item};layer={layer}")?;
                if !release.is_empty() {
                    write!(f, ";release={}", join(release))?;
                }
                Ok(())
            }
            EventDetail::H2D {
                payload,
                layer,
                reserve,
                call,
            } => {
                write!(f, "payload={};layers={layer}", payload.as_str())?;
                if !reserve.is_empty() {
                    write!(f, ";reserve={}", join(reserve))?;
                }
                write!(f, ";call={call}")
            }
            EventDetail::D2H { payload, layer, call } => {
                write!(f, "payload={};layers={layer};call={call}", payload.as_str())
            }
            EventDetail::Stall { reason } => write!(f, "reason={}", reason.as_str()),
        }
    }
}

impl EventDetail {
    pub fn kind(&self) -> TraceKind {
        match self {
            EventDetail::Compute { .. } => TraceKind::Compute,
            EventDetail::H2D { .. } => TraceKind::H2D,
            EventDetail::D2H { .. } => TraceKind::D2H,
            EventDetail::Stall { .. } => TraceKind::Stall,
        }
    }

    pub fn parse(kind: TraceKind, detail: &str) -> Result<Self, String> {
        let mut fields = std::collections::BTreeMap::new();
        for part in detail.split(';') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("malformed detail field {part:?}"))?;
            if fields.insert(key, value).is_some() {
                return Err(format!("duplicate detail key {key:?}"));
            }
        }
        let mut take = |key: &str| fields.remove(key);
        let number = |v: Option<&str>, key: &str| -> Result<usize, String> {
            v.ok_or_else(|| format!("missing {key}"))?
                .parse()
                .map_err(|_| format!("bad {key}"))
        };
        let list = |v: Option<&str>| -> Result<Vec<usize>, String> {
            match v {
                None => Ok(Vec::new()),
                Some(s) => s.split('|').map(|x| x.parse().map_err(|_| format!("bad layer list {s:?}"))).collect(),
            }
        };
        let payload = |v: Option<&str>| match v {
            Some("weights") => Ok(Payload::Weights),
            Some("activations") => Ok(Payload::Activations),
            other => Err(format!("bad payload {other:?}")),
        };
        let detail = match kind {
            TraceKind::Compute => {
                let pass = match take("pass") {
                    Some("fwd") => Pass::Forward,
                    Some("bwd") => Pass::Backward,
                    other => return Err(format!("bad pass {other:?}")),
                };
                EventDetail::Compute {
                    pass,
                    item: number(take("item"), "item")?,
                    layer: number(take("layer"), "layer")?,
                    release: list(take("release"))?,
                }
            }
            TraceKind::H2D => EventDetail::H2D {
                payload: payload(take("payload"))?,
                layer: number(take("layers"), "layers")?,
                reserve: list(take("reserve"))?,
                call: number(take("call"), "call")? as u64,
            },
            TraceKind::D2H => EventDetail::D2H {
                payload: payload(take("payload"))?,
                layer: number(take("layers"), "layers")?,
                call: number(take("call"), "call")? as u64,
            },
            TraceKind::Stall => EventDetail::Stall {
                reason: match take("reason") {
                    Some("weights") => StallReason::Weights,
                    Some("activation") => StallReason::Activation,
                    Some("memory") => StallReason::Memory,
                    other => return Err(format!("bad stall reason {other:?}")),
                },
            },
        };
        if let Some(key) = fields.keys().next() {
            return Err(format!("unexpected detail key {key:?}"));
        }
        Ok(detail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub t_start: f64,
    pub t_end: f64,
    pub detail: EventDetail,
    /// Device bytes right after this event started.
    pub resident_bytes: u64,
    pub footprint: MemoryFootprint,
}

impl TraceEvent {
    pub fn kind(&self) -> TraceKind {
        self.detail.kind()
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Flat row shared by the CSV and JSON encodings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceRow {
    t_start: f64,
    t_end: f64,
    kind: String,
    detail: String,
    resident_bytes: u64,
    weight_bytes: u64,
    activation_bytes: u64,
    gradient_bytes: u64,
}

impl From<&TraceEvent> for TraceRow {
    fn from(e: &TraceEvent) -> Self {
        Self {
            t_start: e.t_start,
            t_end: e.t_end,
            kind: e.kind().as_str().to_string(),
            detail: e.detail.to_string(),
            resident_bytes: e.resident_bytes,
            weight_bytes: e.footprint.weight_bytes,
            activation_bytes: e.footprint.activation_bytes,
            gradient_bytes: e.footprint.gradient_bytes,
        }
    }
}

impl TraceRow {
    fn into_event(self, row: usize) -> Result<TraceEvent, TraceError> {
        let parse_err = |message: String| TraceError::Parse { row, message };
        let kind = TraceKind::parse(&self.kind).ok_or_else(|| parse_err(format!("unknown kind {:?}", self.kind)))?;
        let detail = EventDetail::parse(kind, &self.detail).map_err(parse_err)?;
        if self.t_end.is_nan() || self.t_start.is_nan() || self.t_end < self.t_start {
            return Err(TraceError::Parse {
                row,
                message: format!("t_end {} before t_start {}", self.t_end, self.t_start),
            });
        }
        Ok(TraceEvent {
            t_start: self.t_start,
            t_end: self.t_end,
            detail,
            resident_bytes: self.resident_bytes,
            footprint: MemoryFootprint {
                weight_bytes: self.weight_bytes,
                activation_bytes: self.activation_bytes,
                gradient_bytes: self.gradient_bytes,
            },
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new(events: Vec<TraceEvent>) -> Self {
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceEvent> + '_ {
        self.events.iter().filter(move |e| e.kind() == kind)
    }

    /// Compute events as stream steps, in trace order.
    pub fn compute_steps(&self) -> Vec<Step> {
        self.events
            .iter()
            .filter_map(|e| match e.detail {
                EventDetail::Compute { pass, item, layer, .. } => Some(Step { item, layer, pass }),
                _ => None,
            })
            .collect()
    }

    pub fn peak(&self) -> MemoryFootprint {
        self.events.iter().fold(MemoryFootprint::default(), |acc, e| MemoryFootprint {
            weight_bytes: acc.weight_bytes.max(e.footprint.weight_bytes),
            activation_bytes: acc.activation_bytes.max(e.footprint.activation_bytes),
            gradient_bytes: acc.gradient_bytes.max(e.footprint.gradient_bytes),
        })
    }

    pub fn peak_total(&self) -> u64 {
        self.events.iter().map(|e| e.footprint.total()).max().unwrap_or(0)
    }

    pub fn total_stall_time(&self) -> f64 {
        self.of_kind(TraceKind::Stall).map(TraceEvent::duration).sum()
    }

    fn call_count(&self, kind: TraceKind) -> u64 {
        let calls: BTreeSet<u64> = self
            .events
            .iter()
            .filter_map(|e| match (&e.detail, kind) {
                (EventDetail::H2D { call, .. }, TraceKind::H2D) => Some(*call),
                (EventDetail::D2H { call, .. }, TraceKind::D2H) => Some(*call),
                _ => None,
            })
            .collect();
        calls.len() as u64
    }

    fn rows(&self) -> Vec<TraceRow> {
        self.events.iter().map(TraceRow::from).collect()
    }

    fn from_rows(rows: Vec<TraceRow>) -> Result<Self, TraceError> {
        rows.into_iter()
            .enumerate()
            .map(|(i, r)| r.into_event(i + 1))
            .collect::<Result<Vec<_>, _>>()
            .map(Trace::new)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory cannot fail");
        String::from_utf8(out).expect("csv is utf-8")
    }

    fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        writer.write_record(CSV_HEADER.split(','))?;
        for row in self.rows() {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn from_csv_str(text: &str) -> Result<Self, TraceError> {
        Self::read_csv(text.as_bytes(), Path::new("<memory>"))
    }

    fn read_csv<R: std::io::Read>(input: R, path: &Path) -> Result<Self, TraceError> {
        let mut reader = csv::Reader::from_reader(input);
        let header = reader
            .headers()
            .map_err(|source| TraceError::Csv {
                path: path.to_path_buf(),
                source,
            })?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != CSV_HEADER {
            return Err(TraceError::Parse {
                row: 0,
                message: format!("unexpected header {header:?}"),
            });
        }
        let rows = reader
            .deserialize::<TraceRow>()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|source| TraceError::Csv {
                path: path.to_path_buf(),
                source,
            })?;
        Self::from_rows(rows)
    }
}

/// Aggregate metrics for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub strategy: String,
    pub n_items: usize,
    pub peak_bytes: u64,
    pub peak_weight_bytes: u64,
    pub peak_activation_bytes: u64,
    pub peak_gradient_bytes: u64,
    /// Steady-state time per item: first compute start to last compute end,
    /// divided by the number of items.
    pub per_item_time: f64,
    /// Last compute end, measured from t = 0.
    pub time_to_output: f64,
    /// End of the last event, trailing evictions included.
    pub makespan: f64,
    pub total_stall_time: f64,
    pub n_transfers_h2d: u64,
    pub n_transfers_d2h: u64,
    pub output_digest: String,
}

pub fn summarize(trace: &Trace, n_items: usize) -> Result<RunSummary, TraceError> {
    if trace.is_empty() {
        return Err(TraceError::Empty);
    }
    let computes: Vec<&TraceEvent> = trace.of_kind(TraceKind::Compute).collect();
    let first = computes.iter().map(|e| e.t_start).reduce(f64::min).ok_or(TraceError::NoCompute)?;
    let last = computes.iter().map(|e| e.t_end).fold(f64::NEG_INFINITY, f64::max);
    let peak = trace.peak();
    Ok(RunSummary {
        strategy: String::new(),
        n_items,
        peak_bytes: trace.peak_total(),
        peak_weight_bytes: peak.weight_bytes,
        peak_activation_bytes: peak.activation_bytes,
        peak_gradient_bytes: peak.gradient_bytes,
        per_item_time: (last - first) / n_items.max(1) as f64,
        time_to_output: last,
        makespan: trace.events.iter().map(|e| e.t_end).fold(f64::NEG_INFINITY, f64::max),
        total_stall_time: trace.total_stall_time(),
        n_transfers_h2d: trace.call_count(TraceKind::H2D),
        n_transfers_d2h: trace.call_count(TraceKind::D2H),
        output_digest: String::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Csv,
    Json,
}

impl TraceFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            TraceFormat::Csv => "csv",
            TraceFormat::Json => "json",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceDocument {
    events: Vec<TraceRow>,
    summary: RunSummary,
}

pub fn trace_to_json_string(trace: &Trace, summary: &RunSummary) -> String {
    let doc = TraceDocument {
        events: trace.rows(),
        summary: summary.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("trace serializes");
    text.push('\n');
    text
}

/// Writes `trace` (and, for JSON, `summary`) to `path`.
pub fn export_trace(trace: &Trace, summary: &RunSummary, path: &Path, format: TraceFormat) -> Result<(), TraceError> {
    let io_err = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    match format {
        TraceFormat::Csv => trace.write_csv(&mut out).map_err(|source| TraceError::Csv {
            path: path.to_path_buf(),
            source,
        })?,
        TraceFormat::Json => out.write_all(trace_to_json_string(trace, summary).as_bytes()).map_err(io_err)?,
    }
    out.flush().map_err(io_err)
}

/// Reads a trace written by [`export_trace`]. CSV files carry no summary.
pub fn import_trace(path: &Path, format: TraceFormat) -> Result<(Trace, Option<RunSummary>), TraceError> {
    let file = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    match format {
        TraceFormat::Csv => Ok((Trace::read_csv(reader, path)?, None)),
        TraceFormat::Json => {
            let doc: TraceDocument = serde_json::from_reader(reader).map_err(|source| TraceError::Json {
                path: path.to_path_buf(),
                source,
            })?;
            Ok((Trace::from_rows(doc.events)?, Some(doc.summary)))
        }
    }
}

/// What replay needs to know to turn events back into byte deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayContext {
    pub n_layers: usize,
    pub weight_bytes_per_layer: u64,
    pub activation_bytes: u64,
    pub frozen: Vec<bool>,
    pub training: bool,
    /// False for host-only runs, which never touch the device.
    pub on_device: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuditError {
    #[error("row {row}: replayed footprint {replayed:?} differs from recorded {recorded:?}")]
    Mismatch {
        row: usize,
        replayed: MemoryFootprint,
        recorded: MemoryFootprint,
    },
    #[error("row {row}: resident_bytes {resident} is not the footprint total {total}")]
    Inconsistent { row: usize, resident: u64, total: u64 },
    #[error("row {row}: {resident} B resident exceeds capacity {capacity} B")]
    OverCapacity { row: usize, resident: u64, capacity: u64 },
    #[error("row {row}: replay frees more bytes than are resident")]
    Underflow { row: usize },
    #[error("events out of t_start order at row {row}")]
    Unordered { row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bucket {
    Weights,
    Activations,
    Gradients,
}

#[derive(Debug, Default)]
struct Effects {
    start: Vec<(Bucket, u64)>,
    end: Vec<(Bucket, u64)>,
}

fn effects(event: &TraceEvent, ctx: &ReplayContext) -> Effects {
    let mut fx = Effects::default();
    if !ctx.on_device {
        return fx;
    }
    let payload_bytes = |p: Payload| match p {
        Payload::Weights => (Bucket::Weights, ctx.weight_bytes_per_layer),
        Payload::Activations => (Bucket::Activations, ctx.activation_bytes),
    };
    match &event.detail {
        EventDetail::Compute {
            pass,
            layer,
            release,
            ..
        } => {
            let act = (Bucket::Activations, ctx.activation_bytes);
            match (ctx.training, pass) {
                (false, _) => {
                    if *layer == 0 {
                        fx.start.push(act);
                    }
                    if *layer + 1 == ctx.n_layers {
                        fx.end.push(act);
                    }
                }
                (true, Pass::Forward) => fx.start.push(act),
                (true, Pass::Backward) => {
                    if !ctx.frozen.get(*layer).copied().unwrap_or(false) {
                        fx.start.push((Bucket::Gradients, ctx.weight_bytes_per_layer));
                    }
                    fx.end.push(act);
                }
            }
            fx.end
                .extend(release.iter().map(|_| (Bucket::Gradients, ctx.weight_bytes_per_layer)));
        }
        EventDetail::H2D { payload, reserve, .. } => {
            fx.start.extend(reserve.iter().map(|_| payload_bytes(*payload)));
        }
        EventDetail::D2H { payload, .. } => fx.end.push(payload_bytes(*payload)),
        EventDetail::Stall { .. } => {}
    }
    fx
}

fn add(fp: &mut MemoryFootprint, bucket: Bucket, bytes: u64) {
    match bucket {
        Bucket::Weights => fp.weight_bytes += bytes,
        Bucket::Activations => fp.activation_bytes += bytes,
        Bucket::Gradients => fp.gradient_bytes += bytes,
    }
}

fn sub(fp: &mut MemoryFootprint, bucket: Bucket, bytes: u64) -> Option<()> {
    let slot = match bucket {
        Bucket::Weights => &mut fp.weight_bytes,
        Bucket::Activations => &mut fp.activation_bytes,
        Bucket::Gradients => &mut fp.gradient_bytes,
    };
    *slot = slot.checked_sub(bytes)?;
    Some(())
}

/// Recomputes every row's footprint from the event stream alone. End
/// effects at time `t` apply before any start effect at `t`.
pub fn replay(trace: &Trace, ctx: &ReplayContext) -> Result<Vec<MemoryFootprint>, AuditError> {
    struct Due(f64, usize);
    impl PartialEq for Due {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other).is_eq()
        }
    }
    impl Eq for Due {}
    impl PartialOrd for Due {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Due {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
        }
    }

    let mut footprint = MemoryFootprint::default();
    let mut pending: BinaryHeap<Reverse<Due>> = BinaryHeap::new();
    let mut ends: Vec<Vec<(Bucket, u64)>> = Vec::with_capacity(trace.len());
    let mut out = Vec::with_capacity(trace.len());
    let mut last_start = f64::NEG_INFINITY;
    for (i, event) in trace.events.iter().enumerate() {
        let row = i + 1;
        if event.t_start < last_start {
            return Err(AuditError::Unordered { row });
        }
        last_start = event.t_start;
        while let Some(Reverse(Due(t, idx))) = pending.peek() {
            if *t > event.t_start {
                break;
            }
            let idx = *idx;
            pending.pop();
            for (bucket, bytes) in std::mem::take(&mut ends[idx]) {
                sub(&mut footprint, bucket, bytes).ok_or(AuditError::Underflow { row })?;
            }
        }
        let fx = effects(event, ctx);
        for (bucket, bytes) in fx.start {
            add(&mut footprint, bucket, bytes);
        }
        ends.push(fx.end);
        pending.push(Reverse(Due(event.t_end, i)));
        out.push(footprint);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub rows: usize,
    pub peak: MemoryFootprint,
    pub peak_total: u64,
}

/// Replays the trace and checks every recorded snapshot against it and
/// against `capacity`.
pub fn audit(trace: &Trace, ctx: &ReplayContext, capacity: u64) -> Result<AuditReport, AuditError> {
    let replayed = replay(trace, ctx)?;
    for (i, (event, fp)) in trace.events.iter().zip(&replayed).enumerate() {
        let row = i + 1;
        if event.resident_bytes != event.footprint.total() {
            return Err(AuditError::Inconsistent {
                row,
                resident: event.resident_bytes,
                total: event.footprint.total(),
            });
        }
        if *fp != event.footprint {
            return Err(AuditError::Mismatch {
                row,
                replayed: *fp,
                recorded: event.footprint,
            });
        }
        if event.resident_bytes > capacity {
            return Err(AuditError::OverCapacity {
                row,
                resident: event.resident_bytes,
                capacity,
            });
        }
    }
    Ok(AuditReport {
        rows: trace.len(),
        peak: trace.peak(),
        peak_total: trace.peak_total(),
    })
}
