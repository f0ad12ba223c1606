//! Discrete-event performance simulation: a parametric cost model over stages
//! and collective payloads, list scheduling of pipeline plans on resource
//! lanes, and the headline metrics — step latency, exposed communication
//! ratio, utilization, QPS.
//!
//! The functional engine decides values; this module decides milliseconds.
//! Exposure is measured against compute-class activity: a communication event
//! fully covered by dense compute contributes nothing to the exposed total.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dbp::{StepStats, TrainMode};
use crate::types::TrainConfig;

/// Cost coefficients, all milliseconds (or ms per unit). The All2All cost is
/// affine in worker count and bytes, with an optional quadratic worker term
/// that defaults to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub a2a_base: f64,
    pub a2a_per_worker: f64,
    #[serde(default)]
    pub a2a_per_worker2: f64,
    pub a2a_per_byte: f64,
    pub h2d_per_byte: f64,
    pub prep_per_sample: f64,
    pub retrieval_per_key: f64,
    /// Dual-buffer synchronization, charged to the compute lane at the batch
    /// boundary.
    pub sync_cost: f64,
    pub compute_per_sample_per_layer: f64,
    pub allreduce_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            a2a_base: 0.1,
            a2a_per_worker: 0.0002,
            a2a_per_worker2: 0.0,
            a2a_per_byte: 5.0e-6,
            h2d_per_byte: 2.0e-5,
            prep_per_sample: 0.04,
            retrieval_per_key: 0.006,
            sync_cost: 0.5,
            compute_per_sample_per_layer: 0.035,
            allreduce_cost: 0.4,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("a2a_base", self.a2a_base),
            ("a2a_per_worker", self.a2a_per_worker),
            ("a2a_per_worker2", self.a2a_per_worker2),
            ("a2a_per_byte", self.a2a_per_byte),
            ("h2d_per_byte", self.h2d_per_byte),
            ("prep_per_sample", self.prep_per_sample),
            ("retrieval_per_key", self.retrieval_per_key),
            ("sync_cost", self.sync_cost),
            (
                "compute_per_sample_per_layer",
                self.compute_per_sample_per_layer,
            ),
            ("allreduce_cost", self.allreduce_cost),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(format!("cost field `{name}` must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// All2All latency: `base + per_worker*W + per_worker2*W^2 + per_byte*bytes`.
pub fn cost_a2a(payload_bytes: u64, num_workers: usize, cm: &CostModel) -> f64 {
    let w = num_workers as f64;
    cm.a2a_base
        + cm.a2a_per_worker * w
        + cm.a2a_per_worker2 * w * w
        + cm.a2a_per_byte * payload_bytes as f64
}

/// Resource lanes mirroring the distinct hardware behind each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Lane {
    CpuPrep,
    H2d,
    Interconnect,
    HostMemory,
    Compute,
}

impl Lane {
    pub fn as_str(&self) -> &'static str {
        match self {
            Lane::CpuPrep => "cpu_prep",
            Lane::H2d => "h2d",
            Lane::Interconnect => "interconnect",
            Lane::HostMemory => "host_memory",
            Lane::Compute => "compute",
        }
    }
}

/// Event kinds; classification drives metric attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Prefetch,
    H2dCopy,
    KeyRouting,
    Retrieval,
    Sync,
    EmbA2a,
    Compute,
    GradA2a,
    AllReduce,
    Apply,
}

impl EventKind {
    pub fn lane(&self) -> Lane {
        match self {
            EventKind::Prefetch => Lane::CpuPrep,
            EventKind::H2dCopy => Lane::H2d,
            EventKind::KeyRouting
            | EventKind::EmbA2a
            | EventKind::GradA2a
            | EventKind::AllReduce => Lane::Interconnect,
            EventKind::Retrieval => Lane::HostMemory,
            EventKind::Sync | EventKind::Compute | EventKind::Apply => Lane::Compute,
        }
    }

    /// Lookup class: the pre-compute data movement chain plus the sync tail.
    pub fn is_lookup(&self) -> bool {
        matches!(
            self,
            EventKind::Prefetch
                | EventKind::H2dCopy
                | EventKind::KeyRouting
                | EventKind::Retrieval
                | EventKind::Sync
        )
    }

    /// Embedding/gradient exchange and the dense allreduce.
    pub fn is_comm(&self) -> bool {
        matches!(
            self,
            EventKind::EmbA2a | EventKind::GradA2a | EventKind::AllReduce
        )
    }

    pub fn is_compute(&self) -> bool {
        matches!(self, EventKind::Compute | EventKind::Apply)
    }

    fn rank(&self) -> usize {
        *self as usize
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Prefetch => "prefetch",
            EventKind::H2dCopy => "h2d",
            EventKind::KeyRouting => "key_routing",
            EventKind::Retrieval => "retrieval",
            EventKind::Sync => "sync",
            EventKind::EmbA2a => "emb_a2a",
            EventKind::Compute => "compute",
            EventKind::GradA2a => "grad_a2a",
            EventKind::AllReduce => "allreduce",
            EventKind::Apply => "apply",
        }
    }
}

/// One schedulable event of a plan.
#[derive(Debug, Clone)]
pub struct SimEvent {
    pub batch: usize,
    pub kind: EventKind,
    /// Micro-batch index for window events, 0 otherwise.
    pub index: usize,
    pub duration: f64,
    pub deps: Vec<usize>,
}

/// One scheduled event.
#[derive(Debug, Clone)]
pub struct TimedEvent {
    pub batch: usize,
    pub kind: EventKind,
    pub index: usize,
    pub lane: Lane,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone)]
pub struct Timeline {
    pub entries: Vec<TimedEvent>,
}

/// Greedy list scheduling: among ready events, repeatedly commit the one with
/// the earliest feasible start, ties broken by (batch, event kind rank,
/// micro-batch index) so in-flight batches drain before newly admitted ones.
/// Every event starts at max(lane free time, predecessors' end).
pub fn simulate(events: &[SimEvent]) -> Timeline {
    let n = events.len();
    let mut end_time = vec![f64::NAN; n];
    let mut scheduled = vec![false; n];
    let mut remaining_deps: Vec<usize> = events.iter().map(|e| e.deps.len()).collect();
    for e in events {
        for &d in &e.deps {
            assert!(d < n, "dependency on unknown event");
        }
    }
    let mut lane_free: std::collections::BTreeMap<Lane, f64> = Default::default();
    let mut entries = Vec::with_capacity(n);
    let mut committed = 0usize;
    while committed < n {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for (i, e) in events.iter().enumerate() {
            if scheduled[i] || remaining_deps[i] > 0 {
                continue;
            }
            let deps_end = e.deps.iter().fold(0.0f64, |acc, &d| acc.max(end_time[d]));
            let lane = e.kind.lane();
            let start = deps_end.max(*lane_free.get(&lane).unwrap_or(&0.0));
            let key = (start, e.batch, e.kind.rank(), e.index, i);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        let (start, _, _, _, i) = best.expect("acyclic plan always has a ready event");
        let e = &events[i];
        let end = start + e.duration;
        scheduled[i] = true;
        end_time[i] = end;
        lane_free.insert(e.kind.lane(), end);
        for (j, other) in events.iter().enumerate() {
            if !scheduled[j] && other.deps.contains(&i) {
                remaining_deps[j] -= 1;
            }
        }
        entries.push(TimedEvent {
            batch: e.batch,
            kind: e.kind,
            index: e.index,
            lane: e.kind.lane(),
            start,
            end,
        });
        committed += 1;
    }
    let timeline = Timeline { entries };
    timeline.assert_valid(events, &end_time);
    timeline
}

impl Timeline {
    /// Lane exclusivity and dependency respect hold on every timeline.
    fn assert_valid(&self, events: &[SimEvent], end_time: &[f64]) {
        let mut by_lane: std::collections::BTreeMap<Lane, Vec<(f64, f64)>> = Default::default();
        for e in &self.entries {
            by_lane.entry(e.lane).or_default().push((e.start, e.end));
        }
        for intervals in by_lane.values_mut() {
            intervals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for pair in intervals.windows(2) {
                assert!(pair[0].1 <= pair[1].0 + 1e-12, "lane overlap: {pair:?}");
            }
        }
        for (i, e) in events.iter().enumerate() {
            let start = end_time[i] - e.duration;
            for &d in &e.deps {
                assert!(end_time[d] <= start + 1e-12, "dependency violated");
            }
        }
    }

    pub fn span(&self) -> (f64, f64) {
        let start = self
            .entries
            .iter()
            .map(|e| e.start)
            .fold(f64::INFINITY, f64::min);
        let end = self.entries.iter().map(|e| e.end).fold(0.0f64, f64::max);
        (start, end)
    }

    /// Merged busy intervals of compute-class events.
    fn compute_intervals(&self) -> Vec<(f64, f64)> {
        let mut spans: Vec<(f64, f64)> = self
            .entries
            .iter()
            .filter(|e| e.kind.is_compute() && e.end > e.start)
            .map(|e| (e.start, e.end))
            .collect();
        spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (s, e) in spans {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        merged
    }

    /// Portion of `[start, end)` not covered by compute activity.
    fn exposed_portion(&self, start: f64, end: f64, compute: &[(f64, f64)]) -> f64 {
        let mut covered = 0.0;
        for &(cs, ce) in compute {
            let lo = cs.max(start);
            let hi = ce.min(end);
            if hi > lo {
                covered += hi - lo;
            }
        }
        (end - start) - covered
    }

    /// CSV export: `lane,event,start_ms,end_ms` (event = `kind[index]@batch`).
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "# schema=1")?;
        writeln!(out, "lane,event,start_ms,end_ms")?;
        let mut sorted: Vec<&TimedEvent> = self.entries.iter().collect();
        sorted.sort_by(|a, b| {
            a.start
                .partial_cmp(&b.start)
                .unwrap()
                .then(a.lane.cmp(&b.lane))
        });
        for e in sorted {
            writeln!(
                out,
                "{},{}[{}]@{},{:.6},{:.6}",
                e.lane.as_str(),
                e.kind.as_str(),
                e.index,
                e.batch,
                e.start,
                e.end
            )?;
        }
        out.flush()
    }
}

/// Fraction of total communication time not hidden behind compute activity.
pub fn exposed_ratio(timeline: &Timeline) -> f64 {
    let compute = timeline.compute_intervals();
    let mut total = 0.0;
    let mut exposed = 0.0;
    for e in &timeline.entries {
        if e.kind.is_comm() {
            total += e.end - e.start;
            exposed += timeline.exposed_portion(e.start, e.end, &compute);
        }
    }
    if total == 0.0 {
        0.0
    } else {
        exposed / total
    }
}

/// Compute-class busy time over the timeline span.
pub fn utilization(timeline: &Timeline) -> f64 {
    assert!(
        !timeline.entries.is_empty(),
        "utilization of an empty timeline"
    );
    let (start, end) = timeline.span();
    let busy: f64 = timeline
        .compute_intervals()
        .iter()
        .map(|(s, e)| e - s)
        .sum();
    if end > start {
        busy / (end - start)
    } else {
        0.0
    }
}

/// Per-batch payload numbers a plan is built from. Measured profiles carry the
/// engine's observed distinct-key counts (global, as annotated on the
/// schedule); parametric profiles hold per-worker payloads constant so a
/// worker-count sweep isolates the scaling of the collective itself.
#[derive(Debug, Clone)]
pub struct PayloadProfile {
    pub per_worker_samples: usize,
    pub h2d_bytes: u64,
    pub routing_bytes: u64,
    pub retrieval_keys: usize,
    /// Whole-batch embedding exchange payload (baseline / N=1 path).
    pub emb_batch_bytes: u64,
    /// Per micro-batch embedding/gradient exchange payload.
    pub mb_bytes: Vec<u64>,
    /// Per-worker samples per micro-batch.
    pub mb_samples: Vec<usize>,
    /// Dense layers counted for compute cost (hidden layers + head).
    pub cost_layers: usize,
}

impl PayloadProfile {
    /// Formula-based profile for sweeps without a dataset.
    pub fn parametric(cfg: &TrainConfig, keys_per_sample: usize) -> Self {
        let per_worker_samples = cfg.local_batch();
        let n = cfg.num_micro_batches;
        let local_keys = per_worker_samples * keys_per_sample;
        let mb_keys = local_keys / n.max(1);
        Self {
            per_worker_samples,
            h2d_bytes: (local_keys * 8) as u64,
            routing_bytes: (local_keys * 8) as u64,
            retrieval_keys: local_keys,
            emb_batch_bytes: (local_keys * cfg.emb_dim * 4) as u64,
            mb_bytes: vec![(mb_keys * cfg.emb_dim * 4) as u64; n],
            mb_samples: vec![cfg.local_micro_batch(); n],
            cost_layers: cfg.dense_layers + 1,
        }
    }

    /// Profile from one measured training step.
    pub fn from_step_stats(stats: &StepStats, cfg: &TrainConfig) -> Self {
        Self {
            per_worker_samples: cfg.local_batch(),
            h2d_bytes: (stats.max_local_key_slots * 8) as u64,
            routing_bytes: (stats.max_local_unique_keys * 8) as u64,
            retrieval_keys: stats.max_owner_request_keys,
            emb_batch_bytes: (stats.batch_unique_keys * cfg.emb_dim * 4) as u64,
            mb_bytes: stats
                .mb_unique_keys
                .iter()
                .map(|&k| (k * cfg.emb_dim * 4) as u64)
                .collect(),
            mb_samples: vec![cfg.local_micro_batch(); stats.mb_unique_keys.len()],
            cost_layers: cfg.dense_layers + 1,
        }
    }
}

/// Explicit per-event costs of one frozen window.
#[derive(Debug, Clone)]
pub struct WindowCosts {
    pub emb: Vec<f64>,
    pub compute: Vec<f64>,
    pub grad: Vec<f64>,
    pub allreduce: f64,
}

impl WindowCosts {
    pub fn uniform(n: usize, comm: f64, compute: f64, allreduce: f64) -> Self {
        Self {
            emb: vec![comm; n],
            compute: vec![compute; n],
            grad: vec![comm; n],
            allreduce,
        }
    }

    fn from_profile(profile: &PayloadProfile, cm: &CostModel, workers: usize) -> Self {
        let emb: Vec<f64> = profile
            .mb_bytes
            .iter()
            .map(|&b| cost_a2a(b, workers, cm))
            .collect();
        let compute: Vec<f64> = profile
            .mb_samples
            .iter()
            .map(|&s| s as f64 * profile.cost_layers as f64 * cm.compute_per_sample_per_layer)
            .collect();
        Self {
            grad: emb.clone(),
            emb,
            compute,
            allreduce: cm.allreduce_cost,
        }
    }

    /// Whole batch as one micro-batch (baseline / dbp-only fwd stage).
    fn single(profile: &PayloadProfile, cm: &CostModel, workers: usize) -> Self {
        Self {
            emb: vec![cost_a2a(profile.emb_batch_bytes, workers, cm)],
            compute: vec![
                profile.per_worker_samples as f64
                    * profile.cost_layers as f64
                    * cm.compute_per_sample_per_layer,
            ],
            grad: vec![cost_a2a(profile.emb_batch_bytes, workers, cm)],
            allreduce: cm.allreduce_cost,
        }
    }
}

/// Append one frozen window's events for `batch`, rooted at `entry` (the event
/// every stream waits on). Mirrors the functional schedule: per micro-batch
/// chains `emb_i -> compute_i -> grad_i`, a serial compute stream, and the
/// communication stream total order `emb_1, emb_2, grad_1, emb_3, ...,
/// grad_{N-1}, grad_N, allreduce`. Returns the apply event's id.
pub fn push_window_events(
    events: &mut Vec<SimEvent>,
    batch: usize,
    entry: Option<usize>,
    costs: &WindowCosts,
    comm_entry: Option<usize>,
) -> usize {
    push_window_events_with(events, batch, entry, costs, comm_entry, true)
}

/// As [`push_window_events`], with the dense allreduce's comm-stream position
/// as a knob: `allreduce_after_last_grad = false` lets it race the final
/// gradient exchange once the last compute finishes.
pub fn push_window_events_with(
    events: &mut Vec<SimEvent>,
    batch: usize,
    entry: Option<usize>,
    costs: &WindowCosts,
    comm_entry: Option<usize>,
    allreduce_after_last_grad: bool,
) -> usize {
    let n = costs.emb.len();
    assert!(n >= 1 && costs.compute.len() == n && costs.grad.len() == n);
    let entry_deps: Vec<usize> = entry.into_iter().collect();
    let mut emb_ids = Vec::with_capacity(n);
    let mut compute_ids = Vec::with_capacity(n);
    let mut grad_ids = Vec::with_capacity(n);
    for i in 1..=n {
        let emb = events.len();
        events.push(SimEvent {
            batch,
            kind: EventKind::EmbA2a,
            index: i,
            duration: costs.emb[i - 1],
            deps: entry_deps.clone(),
        });
        emb_ids.push(emb);
        let compute = events.len();
        events.push(SimEvent {
            batch,
            kind: EventKind::Compute,
            index: i,
            duration: costs.compute[i - 1],
            deps: vec![emb],
        });
        compute_ids.push(compute);
        let grad = events.len();
        events.push(SimEvent {
            batch,
            kind: EventKind::GradA2a,
            index: i,
            duration: costs.grad[i - 1],
            deps: vec![compute],
        });
        grad_ids.push(grad);
    }
    for pair in compute_ids.windows(2) {
        events[pair[1]].deps.push(pair[0]);
    }
    // Communication-stream total order.
    let mut comm_seq: Vec<usize> = vec![emb_ids[0]];
    if n >= 2 {
        comm_seq.push(emb_ids[1]);
        for i in 1..=n - 2 {
            comm_seq.push(grad_ids[i - 1]);
            comm_seq.push(emb_ids[i + 1]);
        }
        comm_seq.push(grad_ids[n - 2]);
    }
    comm_seq.push(grad_ids[n - 1]);
    let allreduce = events.len();
    if allreduce_after_last_grad {
        events.push(SimEvent {
            batch,
            kind: EventKind::AllReduce,
            index: 0,
            duration: costs.allreduce,
            deps: vec![*comm_seq.last().unwrap()],
        });
        comm_seq.push(allreduce);
    } else {
        // Ready as soon as the dense gradients exist; the comm lane's greedy
        // order decides whether it lands before or after the last exchange.
        events.push(SimEvent {
            batch,
            kind: EventKind::AllReduce,
            index: 0,
            duration: costs.allreduce,
            deps: vec![*compute_ids.last().unwrap()],
        });
    }
    for pair in comm_seq.windows(2) {
        if !events[pair[1]].deps.contains(&pair[0]) {
            events[pair[1]].deps.push(pair[0]);
        }
    }
    if let Some(prev_comm) = comm_entry {
        if !events[comm_seq[0]].deps.contains(&prev_comm) {
            events[comm_seq[0]].deps.push(prev_comm);
        }
    }
    let apply = events.len();
    let mut apply_deps = grad_ids.clone();
    apply_deps.push(allreduce);
    apply_deps.push(*compute_ids.last().unwrap());
    events.push(SimEvent {
        batch,
        kind: EventKind::Apply,
        index: 0,
        duration: 0.0,
        deps: apply_deps,
    });
    apply
}

/// Per-batch stage durations of the lookup chain.
#[derive(Debug, Clone, Copy)]
pub struct StageCosts {
    pub prefetch: f64,
    pub h2d: f64,
    pub routing: f64,
    pub retrieval: f64,
    pub sync: f64,
}

impl StageCosts {
    fn from_profile(profile: &PayloadProfile, cm: &CostModel, workers: usize) -> Self {
        Self {
            prefetch: cm.prep_per_sample * profile.per_worker_samples as f64,
            h2d: cm.h2d_per_byte * profile.h2d_bytes as f64,
            routing: cost_a2a(profile.routing_bytes, workers, cm),
            retrieval: cm.retrieval_per_key * profile.retrieval_keys as f64,
            sync: cm.sync_cost,
        }
    }
}

/// Build a multi-batch plan for one mode. Pipelined modes admit up to `depth`
/// batches and charge dual-buffer sync on the compute lane between the
/// previous apply and the next window; serial modes chain whole batches.
pub fn build_plan(
    mode: TrainMode,
    stage_costs: StageCosts,
    window: &WindowCosts,
    depth: usize,
    batches: usize,
) -> Vec<SimEvent> {
    let pipelined = !matches!(mode, TrainMode::SyncBaseline | TrainMode::FwpOnly);
    let dual_buffer = !matches!(mode, TrainMode::SyncBaseline | TrainMode::FwpOnly);
    let mut events = Vec::new();
    let mut prev_apply: Option<usize> = None;
    let mut prev_stage_ids: Option<[usize; 4]> = None;
    let mut applies = Vec::with_capacity(batches);
    let mut prev_comm_tail: Option<usize> = None;
    for b in 0..batches {
        let mut deps_prefetch: Vec<usize> = Vec::new();
        if let Some(prev) = prev_stage_ids {
            deps_prefetch.push(prev[0]); // same-lane chain
        }
        if pipelined {
            if b >= depth {
                deps_prefetch.push(applies[b - depth]);
            }
        } else if let Some(apply) = prev_apply {
            deps_prefetch.push(apply); // fully serial batches
        }
        let prefetch = events.len();
        events.push(SimEvent {
            batch: b,
            kind: EventKind::Prefetch,
            index: 0,
            duration: stage_costs.prefetch,
            deps: deps_prefetch,
        });
        let h2d = events.len();
        let mut deps = vec![prefetch];
        if let Some(prev) = prev_stage_ids {
            deps.push(prev[1]);
        }
        events.push(SimEvent {
            batch: b,
            kind: EventKind::H2dCopy,
            index: 0,
            duration: stage_costs.h2d,
            deps,
        });
        let routing = events.len();
        let mut deps = vec![h2d];
        if let Some(prev) = prev_stage_ids {
            deps.push(prev[2]);
        }
        events.push(SimEvent {
            batch: b,
            kind: EventKind::KeyRouting,
            index: 0,
            duration: stage_costs.routing,
            deps,
        });
        let retrieval = events.len();
        let mut deps = vec![routing];
        if let Some(prev) = prev_stage_ids {
            deps.push(prev[3]);
        }
        events.push(SimEvent {
            batch: b,
            kind: EventKind::Retrieval,
            index: 0,
            duration: stage_costs.retrieval,
            deps,
        });

        let window_entry = if dual_buffer && mode != TrainMode::UnsafeSixStage {
            let sync = events.len();
            let mut deps = vec![retrieval];
            if let Some(apply) = prev_apply {
                deps.push(apply);
            }
            events.push(SimEvent {
                batch: b,
                kind: EventKind::Sync,
                index: 0,
                duration: stage_costs.sync,
                deps,
            });
            sync
        } else {
            retrieval
        };

        let apply = push_window_events(&mut events, b, Some(window_entry), window, prev_comm_tail);
        prev_comm_tail = Some(apply - 1); // the allreduce id precedes apply
        prev_apply = Some(apply);
        prev_stage_ids = Some([prefetch, h2d, routing, retrieval]);
        applies.push(apply);
    }
    events
}

/// Steady-state metrics row for one simulated configuration.
#[derive(Debug, Clone)]
pub struct ModeMetrics {
    pub mode: TrainMode,
    pub workers: usize,
    pub step_latency_ms: f64,
    pub lookup_ms: f64,
    pub comm_total_ms: f64,
    pub comm_exposed_ms: f64,
    pub compute_ms: f64,
    pub exposed_ratio: f64,
    pub utilization: f64,
    pub qps: f64,
}

/// Simulate `mode` at `workers` scale and measure a steady-state step:
/// latency is the completion interval between the two last-but-one batches,
/// exposure is attributed per event against global compute activity.
pub fn simulate_mode(
    mode: TrainMode,
    profile: &PayloadProfile,
    cm: &CostModel,
    workers: usize,
    depth: usize,
) -> (ModeMetrics, Timeline) {
    let stage_costs = StageCosts::from_profile(profile, cm, workers);
    let window = match mode {
        TrainMode::SyncBaseline | TrainMode::DbpOnly => WindowCosts::single(profile, cm, workers),
        _ => WindowCosts::from_profile(profile, cm, workers),
    };
    let batches = 8usize;
    let events = build_plan(mode, stage_costs, &window, depth, batches);
    let timeline = simulate(&events);

    let measured = batches - 2;
    let apply_end = |b: usize| {
        timeline
            .entries
            .iter()
            .find(|e| e.batch == b && e.kind == EventKind::Apply)
            .map(|e| e.end)
            .expect("apply event present")
    };
    let step_latency = apply_end(measured) - apply_end(measured - 1);
    let compute_intervals = timeline.compute_intervals();
    let mut comm_exposed = 0.0;
    let mut comm_total = 0.0;
    let mut compute_ms = 0.0;
    for e in &timeline.entries {
        if e.batch != measured {
            continue;
        }
        if e.kind.is_comm() {
            comm_total += e.end - e.start;
            comm_exposed += timeline.exposed_portion(e.start, e.end, &compute_intervals);
        } else if e.kind.is_compute() {
            compute_ms += e.end - e.start;
        }
    }
    // The step decomposes into compute, exposed communication, and blocking
    // lookup; lookup is the critical-path residual (pipelined modes hide all
    // of it except the dual-buffer sync tail).
    let lookup_exposed = (step_latency - compute_ms - comm_exposed).max(0.0);
    // Utilization over the steady-state window.
    let (w0, w1) = (apply_end(measured - 1), apply_end(measured));
    let busy_in_window: f64 = compute_intervals
        .iter()
        .map(|&(s, e)| (e.min(w1) - s.max(w0)).max(0.0))
        .sum();
    let utilization = if w1 > w0 {
        busy_in_window / (w1 - w0)
    } else {
        0.0
    };
    let global_batch = profile.per_worker_samples * workers;
    let metrics = ModeMetrics {
        mode,
        workers,
        step_latency_ms: step_latency,
        lookup_ms: lookup_exposed,
        comm_total_ms: comm_total,
        comm_exposed_ms: comm_exposed,
        compute_ms,
        exposed_ratio: if comm_total > 0.0 {
            comm_exposed / comm_total
        } else {
            0.0
        },
        utilization,
        qps: if step_latency > 0.0 {
            global_batch as f64 / (step_latency / 1000.0)
        } else {
            0.0
        },
    };
    (metrics, timeline)
}

/// One row per (mode, workers) point over the sweep, modes in the ablation
/// order: sync-baseline, dbp-only, fwp-only, nestpipe.
pub fn compare_modes(
    profile: &PayloadProfile,
    cm: &CostModel,
    workers_sweep: &[usize],
    depth: usize,
) -> Vec<ModeMetrics> {
    let modes = [
        TrainMode::SyncBaseline,
        TrainMode::DbpOnly,
        TrainMode::FwpOnly,
        TrainMode::NestPipe,
    ];
    let mut rows = Vec::with_capacity(modes.len() * workers_sweep.len());
    for mode in modes {
        for &w in workers_sweep {
            rows.push(simulate_mode(mode, profile, cm, w, depth).0);
        }
    }
    rows
}

/// Metrics CSV: one row per (step, mode, workers) tuple.
pub fn write_metrics_csv(rows: &[(u64, ModeMetrics)], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# schema=1")?;
    writeln!(
        out,
        "step,mode,workers,step_latency_ms,lookup_ms,comm_total_ms,comm_exposed_ms,compute_ms,exposed_ratio,utilization,qps"
    )?;
    for (step, m) in rows {
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}",
            step,
            m.mode.as_str(),
            m.workers,
            m.step_latency_ms,
            m.lookup_ms,
            m.comm_total_ms,
            m.comm_exposed_ms,
            m.compute_ms,
            m.exposed_ratio,
            m.utilization,
            m.qps
        )?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_only_timeline(n: usize, comm: f64, compute: f64) -> Timeline {
        let mut events = Vec::new();
        push_window_events(
            &mut events,
            0,
            None,
            &WindowCosts::uniform(n, comm, compute, 0.0),
            None,
        );
        simulate(&events)
    }

    #[test]
    fn a2a_cost_is_affine() {
        let cm = CostModel {
            a2a_base: 10.0,
            a2a_per_worker: 0.5,
            a2a_per_byte: 1e-5,
            ..CostModel::default()
        };
        assert!((cost_a2a(1_000_000, 128, &cm) - 84.0).abs() < 1e-9);
        assert!((cost_a2a(0, 1, &cm) - 10.5).abs() < 1e-9);
        // doubling W with zero payload doubles only the per-worker term
        let w1 = cost_a2a(0, 100, &cm) - cm.a2a_base;
        let w2 = cost_a2a(0, 200, &cm) - cm.a2a_base;
        assert!((w2 - 2.0 * w1).abs() < 1e-9);
    }

    #[test]
    fn exposed_ratio_is_one_over_n_when_compute_covers() {
        for n in [1usize, 2, 4, 8, 16] {
            let timeline = window_only_timeline(n, 1.0, 2.0);
            let ratio = exposed_ratio(&timeline);
            assert!(
                (ratio - 1.0 / n as f64).abs() < 1e-12,
                "n={n}: ratio {ratio} != {}",
                1.0 / n as f64
            );
        }
    }

    #[test]
    fn n1_exposes_everything() {
        let timeline = window_only_timeline(1, 3.0, 10.0);
        assert!((exposed_ratio(&timeline) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_collapses_when_comm_exceeds_compute() {
        let n = 4;
        let timeline = window_only_timeline(n, 3.0, 1.0);
        let ratio = exposed_ratio(&timeline);
        assert!(
            ratio > 1.0 / n as f64 + 1e-9,
            "inflated payload must expose more than 1/N, got {ratio}"
        );
    }

    #[test]
    fn comm_fully_inside_compute_contributes_zero() {
        // hand-built: one long compute, one comm strictly inside it
        let events = vec![
            SimEvent {
                batch: 0,
                kind: EventKind::Compute,
                index: 1,
                duration: 10.0,
                deps: vec![],
            },
            SimEvent {
                batch: 0,
                kind: EventKind::EmbA2a,
                index: 1,
                duration: 2.0,
                deps: vec![],
            },
        ];
        let timeline = simulate(&events);
        assert!((exposed_ratio(&timeline) - 0.0).abs() < 1e-12);
        // fully serial: comm after compute is fully exposed
        let serial = vec![
            SimEvent {
                batch: 0,
                kind: EventKind::Compute,
                index: 1,
                duration: 10.0,
                deps: vec![],
            },
            SimEvent {
                batch: 0,
                kind: EventKind::EmbA2a,
                index: 1,
                duration: 2.0,
                deps: vec![0],
            },
        ];
        assert!((exposed_ratio(&simulate(&serial)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn utilization_is_busy_over_span() {
        let events = vec![
            SimEvent {
                batch: 0,
                kind: EventKind::Compute,
                index: 1,
                duration: 9.0,
                deps: vec![],
            },
            SimEvent {
                batch: 0,
                kind: EventKind::EmbA2a,
                index: 1,
                duration: 10.0,
                deps: vec![],
            },
        ];
        let timeline = simulate(&events);
        assert!((utilization(&timeline) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn pipeline_bottleneck_law() {
        // per-batch stage costs [2,1,1,3,5] on five distinct lanes, sync 0
        let stage_costs = StageCosts {
            prefetch: 2.0,
            h2d: 1.0,
            routing: 1.0,
            retrieval: 3.0,
            sync: 0.0,
        };
        let window = WindowCosts::uniform(1, 0.0, 5.0, 0.0);
        let events = build_plan(TrainMode::DbpOnly, stage_costs, &window, 5, 6);
        let timeline = simulate(&events);
        let apply_end = |b: usize| {
            timeline
                .entries
                .iter()
                .find(|e| e.batch == b && e.kind == EventKind::Apply)
                .unwrap()
                .end
        };
        assert!(
            (apply_end(0) - 12.0).abs() < 1e-9,
            "first batch end {}",
            apply_end(0)
        );
        for b in 1..6 {
            assert!(
                (apply_end(b) - apply_end(b - 1) - 5.0).abs() < 1e-9,
                "steady-state interval at batch {b}"
            );
        }
    }

    #[test]
    fn latency_monotone_in_every_coefficient() {
        let profile = PayloadProfile::parametric(
            &TrainConfig {
                num_workers: 4,
                vocab_size: 1000,
                emb_dim: 16,
                dense_layers: 2,
                hidden_dim: 16,
                batch_size: 256,
                num_micro_batches: 4,
                learning_rate: 0.1,
                steps: 1,
                seed: 0,
                clustering_enabled: true,
                exact_order_mode: false,
                unsafe_six_stage: false,
                pipeline_depth: 5,
            },
            8,
        );
        let base_cm = CostModel::default();
        let (base, _) = simulate_mode(TrainMode::NestPipe, &profile, &base_cm, 256, 5);
        let bump = |f: &dyn Fn(&mut CostModel)| {
            let mut cm = base_cm.clone();
            f(&mut cm);
            simulate_mode(TrainMode::NestPipe, &profile, &cm, 256, 5)
                .0
                .step_latency_ms
        };
        type Bump = Box<dyn Fn(&mut CostModel)>;
        let bumps: Vec<Bump> = vec![
            Box::new(|c| c.a2a_base *= 2.0),
            Box::new(|c| c.a2a_per_worker *= 2.0),
            Box::new(|c| c.a2a_per_worker2 += 1e-6),
            Box::new(|c| c.a2a_per_byte *= 2.0),
            Box::new(|c| c.h2d_per_byte *= 2.0),
            Box::new(|c| c.prep_per_sample *= 2.0),
            Box::new(|c| c.retrieval_per_key *= 2.0),
            Box::new(|c| c.sync_cost *= 2.0),
            Box::new(|c| c.compute_per_sample_per_layer *= 2.0),
            Box::new(|c| c.allreduce_cost *= 2.0),
        ];
        for (i, f) in bumps.iter().enumerate() {
            let bumped = bump(f);
            assert!(
                bumped >= base.step_latency_ms - 1e-9,
                "coefficient {i}: latency dropped from {} to {bumped}",
                base.step_latency_ms
            );
        }
    }

    #[test]
    fn mode_ordering_under_fixed_costs() {
        let cfg = TrainConfig {
            num_workers: 4,
            vocab_size: 1000,
            emb_dim: 16,
            dense_layers: 2,
            hidden_dim: 16,
            batch_size: 256,
            num_micro_batches: 4,
            learning_rate: 0.1,
            steps: 1,
            seed: 0,
            clustering_enabled: true,
            exact_order_mode: false,
            unsafe_six_stage: false,
            pipeline_depth: 5,
        };
        let profile = PayloadProfile::parametric(&cfg, 8);
        let cm = CostModel::default();
        for &w in &[128usize, 512, 1536] {
            let latency = |mode| simulate_mode(mode, &profile, &cm, w, 5).0.step_latency_ms;
            let sync = latency(TrainMode::SyncBaseline);
            let dbp = latency(TrainMode::DbpOnly);
            let fwp = latency(TrainMode::FwpOnly);
            let nest = latency(TrainMode::NestPipe);
            assert!(
                nest <= dbp + 1e-9 && dbp <= sync + 1e-9,
                "W={w}: {nest} {dbp} {sync}"
            );
            assert!(
                nest <= fwp + 1e-9 && fwp <= sync + 1e-9,
                "W={w}: {nest} {fwp} {sync}"
            );
        }
    }

    #[test]
    fn allreduce_overlap_toggle_changes_comm_order_only() {
        // With the toggle off, the allreduce may start as soon as the last
        // compute finishes, racing the final gradient exchange on the lane.
        let costs = WindowCosts::uniform(2, 1.0, 4.0, 1.0);
        let mut chained = Vec::new();
        push_window_events_with(&mut chained, 0, None, &costs, None, true);
        let mut racing = Vec::new();
        push_window_events_with(&mut racing, 0, None, &costs, None, false);
        let end_of =
            |t: &Timeline, kind: EventKind| t.entries.iter().find(|e| e.kind == kind).unwrap().end;
        let t_chained = simulate(&chained);
        let t_racing = simulate(&racing);
        assert!(
            end_of(&t_racing, EventKind::AllReduce) <= end_of(&t_chained, EventKind::AllReduce)
        );
        // apply still waits for everything in both schedules
        let apply_chained = end_of(&t_chained, EventKind::Apply);
        let apply_racing = end_of(&t_racing, EventKind::Apply);
        assert!(apply_racing <= apply_chained + 1e-12);
    }

    fn trend_cfg() -> TrainConfig {
        TrainConfig {
            num_workers: 4,
            vocab_size: 1000,
            emb_dim: 16,
            dense_layers: 2,
            hidden_dim: 16,
            batch_size: 256,
            num_micro_batches: 4,
            learning_rate: 0.1,
            steps: 1,
            seed: 0,
            clustering_enabled: true,
            exact_order_mode: false,
            unsafe_six_stage: false,
            pipeline_depth: 5,
        }
    }

    #[test]
    fn single_micro_batch_fwp_matches_baseline_comm() {
        // N=1 gives frozen-window execution nothing to overlap: same comm
        // exposure as the serial baseline.
        let cfg = TrainConfig {
            num_micro_batches: 1,
            ..trend_cfg()
        };
        let profile = PayloadProfile::parametric(&cfg, 8);
        let cm = CostModel::default();
        let (fwp_m, _) = simulate_mode(TrainMode::FwpOnly, &profile, &cm, 256, 5);
        let (base, _) = simulate_mode(TrainMode::SyncBaseline, &profile, &cm, 256, 5);
        assert!((fwp_m.comm_exposed_ms - base.comm_exposed_ms).abs() < 1e-9);
        assert!((fwp_m.step_latency_ms - base.step_latency_ms).abs() < 1e-9);
    }

    #[test]
    fn depth_one_dbp_matches_baseline_lookup() {
        // Depth 1 admits one batch at a time: no pipelining, full lookup
        // exposure plus the sync tail.
        let profile = PayloadProfile::parametric(&trend_cfg(), 8);
        let cm = CostModel::default();
        let (dbp_m, _) = simulate_mode(TrainMode::DbpOnly, &profile, &cm, 256, 1);
        let (base, _) = simulate_mode(TrainMode::SyncBaseline, &profile, &cm, 256, 1);
        assert!(
            (dbp_m.lookup_ms - (base.lookup_ms + cm.sync_cost)).abs() < 1e-9,
            "dbp depth-1 lookup {} vs baseline {} + sync {}",
            dbp_m.lookup_ms,
            base.lookup_ms,
            cm.sync_cost
        );
    }

    #[test]
    fn sync_baseline_comm_fraction_grows_with_workers() {
        let cfg = TrainConfig {
            num_workers: 4,
            vocab_size: 1000,
            emb_dim: 16,
            dense_layers: 2,
            hidden_dim: 16,
            batch_size: 256,
            num_micro_batches: 4,
            learning_rate: 0.1,
            steps: 1,
            seed: 0,
            clustering_enabled: true,
            exact_order_mode: false,
            unsafe_six_stage: false,
            pipeline_depth: 5,
        };
        let profile = PayloadProfile::parametric(&cfg, 8);
        let cm = CostModel::default();
        let mut prev = 0.0;
        for &w in &[128usize, 256, 512, 1024, 1536] {
            let (m, _) = simulate_mode(TrainMode::SyncBaseline, &profile, &cm, w, 5);
            let fraction = m.comm_exposed_ms / m.step_latency_ms;
            assert!(
                fraction > prev,
                "comm fraction not strictly increasing at W={w}"
            );
            prev = fraction;
        }
    }
}
