//! The inter-batch five-stage pipeline orchestrator: Data Prefetch -> Data H2D
//! -> Key Routing -> Embedding Retrieval (with dual-buffer sync) -> Fwd/Bwd.
//!
//! The engine executes stages as dataflow on one logical scheduler, so the
//! functional result is identical for any in-flight depth; pipelining shows up
//! as interleaved stage records and in the timing model. Retrieval for batch
//! t+1 reads host state before batch t's write-back (exactly what a real
//! pipeline overlap would see), and dual-buffer synchronization then copies
//! the intersection rows from the just-updated active buffer — unless
//! `unsafe_six_stage` skips it, which is the one-step-asynchrony hazard.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::embedding::{self, EmbeddingError, EmbeddingRow};
use crate::fabric::{self, A2aPayload, FabricError};
use crate::fwp::{self, WindowError};
use crate::prf::Prf;
use crate::trace::{StepSnapshot, Trajectory, TrajectoryMeta};
use crate::types::{Batch, ConfigError, Sample, SparseKey, TrainConfig, WorkerId};
use crate::worker::{init_workers, WorkerTrainState};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Window(#[from] WindowError),
    #[error("{0}")]
    Embedding(#[from] EmbeddingError),
    #[error("{0}")]
    Fabric(#[from] FabricError),
}

/// Training mode selecting which pipelining levels are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Fully serial synchronous training: no lookup pipelining, no micro-batches.
    SyncBaseline,
    /// Five-stage pipeline only (one micro-batch per batch).
    DbpOnly,
    /// Frozen-window micro-batching only (pipeline depth 1).
    FwpOnly,
    /// Both levels nested.
    NestPipe,
    /// Nested pipelining with dual-buffer synchronization skipped.
    UnsafeSixStage,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::SyncBaseline,
        TrainMode::DbpOnly,
        TrainMode::FwpOnly,
        TrainMode::NestPipe,
        TrainMode::UnsafeSixStage,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::SyncBaseline => "sync-baseline",
            TrainMode::DbpOnly => "dbp-only",
            TrainMode::FwpOnly => "fwp-only",
            TrainMode::NestPipe => "nestpipe",
            TrainMode::UnsafeSixStage => "unsafe-six-stage",
        }
    }

    pub fn parse(text: &str) -> Option<TrainMode> {
        TrainMode::ALL.into_iter().find(|m| m.as_str() == text)
    }

    /// Derive the effective engine knobs for this mode from a base config.
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        out.unsafe_six_stage = false;
        match self {
            TrainMode::SyncBaseline => {
                out.num_micro_batches = 1;
                out.pipeline_depth = 1;
                out.clustering_enabled = false;
            }
            TrainMode::DbpOnly => {
                out.num_micro_batches = 1;
                out.clustering_enabled = false;
            }
            TrainMode::FwpOnly => {
                out.pipeline_depth = 1;
            }
            TrainMode::NestPipe => {}
            TrainMode::UnsafeSixStage => {
                out.unsafe_six_stage = true;
            }
        }
        out
    }
}

/// The five pipeline stages, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageName {
    Prefetch,
    H2d,
    KeyRouting,
    Retrieval,
    FwdBwd,
}

impl StageName {
    pub const ALL: [StageName; 5] = [
        StageName::Prefetch,
        StageName::H2d,
        StageName::KeyRouting,
        StageName::Retrieval,
        StageName::FwdBwd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StageName::Prefetch => "prefetch",
            StageName::H2d => "h2d",
            StageName::KeyRouting => "key_routing",
            StageName::Retrieval => "retrieval",
            StageName::FwdBwd => "fwd_bwd",
        }
    }

    fn from_index(i: usize) -> StageName {
        StageName::ALL[i]
    }

    pub fn index(&self) -> usize {
        StageName::ALL.iter().position(|s| s == self).unwrap()
    }
}

/// One committed stage of one batch in the logical pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageRecord {
    /// 1-based batch step.
    pub step: u64,
    pub stage: StageName,
    /// Committing context; 0, the single logical scheduler.
    pub worker: WorkerId,
    /// Logical sequence number, the functional ordering witness.
    pub seq: u64,
}

/// Deterministic pipeline schedule for the stage-record log: batches advance
/// one stage per round, at most `depth` in flight, latest stages committing
/// first within a round so the retrieval-sync of batch t lands after the
/// gradient application (fwd_bwd) of batch t-1. The unsafe six-stage mode
/// drops that gate.
pub fn stage_schedule(steps: u64, depth: usize, gate_retrieval: bool) -> Vec<StageRecord> {
    let t_count = steps as usize;
    let mut next_stage = vec![0usize; t_count];
    let mut records = Vec::with_capacity(5 * t_count);
    let mut seq = 0u64;
    // Batches flow FIFO through every stage, so `next_stage` stays
    // non-increasing in batch index and a monotone cursor per stage finds the
    // oldest occupant in amortized O(1).
    let mut cursor = [0usize; 5];
    let mut in_flight = 0usize;
    let mut finished = 0usize;
    while finished < t_count {
        let mut advanced_any = t_count == 0;
        for stage in (0..5usize).rev() {
            while cursor[stage] < t_count && next_stage[cursor[stage]] > stage {
                cursor[stage] += 1;
            }
            let t = cursor[stage];
            if t >= t_count || next_stage[t] != stage {
                continue;
            }
            let eligible = match stage {
                0 => in_flight < depth,
                3 => !gate_retrieval || t == 0 || next_stage[t - 1] == 5,
                _ => true,
            };
            if eligible {
                records.push(StageRecord {
                    step: t as u64 + 1,
                    stage: StageName::from_index(stage),
                    worker: 0,
                    seq,
                });
                seq += 1;
                next_stage[t] += 1;
                match stage {
                    0 => in_flight += 1,
                    4 => {
                        in_flight -= 1;
                        finished += 1;
                    }
                    _ => {}
                }
                advanced_any = true;
            }
        }
        assert!(advanced_any, "stage schedule stalled");
    }
    records
}

/// CSV export: `step,stage,worker,seq`.
pub fn write_stage_csv(records: &[StageRecord], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# schema=1")?;
    writeln!(out, "step,stage,worker,seq")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.step,
            r.stage.as_str(),
            r.worker,
            r.seq
        )?;
    }
    out.flush()
}

/// Per-step payload measurements handed to the timing model.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: u64,
    pub mean_loss: f64,
    /// Distinct keys of the whole batch, `|K(B_t)|`.
    pub batch_unique_keys: usize,
    /// Largest per-worker raw key slot count (pre-dedup, the H2D payload).
    pub max_local_key_slots: usize,
    /// Largest per-worker local distinct key count (key routing payload).
    pub max_local_unique_keys: usize,
    /// Largest per-owner request list (embedding retrieval work).
    pub max_owner_request_keys: usize,
    /// Distinct keys per micro-batch, `|K(M_i)|`.
    pub mb_unique_keys: Vec<usize>,
    pub dag: fwp::ScheduleDag,
}

#[derive(Debug)]
pub struct RunOutput {
    pub workers: Vec<WorkerTrainState>,
    pub trajectory: Trajectory,
    pub stage_log: Vec<StageRecord>,
    pub step_stats: Vec<StepStats>,
    pub steps_processed: u64,
}

/// Batch-level key routing: each worker dedups its local keys and buckets them
/// by owner; owners dedup the union of received buckets again, yielding the
/// ascending unique request list per owner.
pub fn stage_key_routing(
    batch: &Batch,
    num_workers: usize,
) -> Result<(Vec<Vec<SparseKey>>, Vec<usize>), EngineError> {
    let mut local_unique = Vec::with_capacity(num_workers);
    let payloads: Vec<A2aPayload<SparseKey>> = (0..num_workers)
        .map(|w| {
            let local: Vec<SparseKey> = batch
                .worker_slice(w, num_workers)
                .iter()
                .flat_map(|s| s.keys.iter().copied())
                .collect();
            let (unique, _) = embedding::dedup(&local);
            local_unique.push(unique.len());
            let mut to: Vec<Vec<SparseKey>> = vec![Vec::new(); num_workers];
            for key in unique {
                to[embedding::shard_of(key, num_workers)].push(key);
            }
            A2aPayload { to }
        })
        .collect();
    let results = fabric::all_to_all(payloads)?;
    let requests = results
        .into_iter()
        .map(|r| {
            let all: Vec<SparseKey> = r.from.into_iter().flatten().collect();
            crate::types::canonical_key_order(&all)
        })
        .collect();
    Ok((requests, local_unique))
}

struct PreparedBatch {
    batch: Batch,
    owner_requests: Vec<Vec<SparseKey>>,
    max_local_unique: usize,
}

/// Take the next `batch_size` samples (ascending sample id, contiguous
/// per-worker split), route keys, and retrieve rows into the prefetch buffers.
/// Reads host state as of now — i.e. before any not-yet-written-back update.
fn prepare_next_batch(
    dataset: &[Sample],
    cursor: &mut usize,
    step: u64,
    workers: &mut [WorkerTrainState],
    cfg: &TrainConfig,
    prf: &Prf,
) -> Result<Option<PreparedBatch>, EngineError> {
    if *cursor + cfg.batch_size > dataset.len() {
        return Ok(None); // dataset exhausted: end of training, no partial batch
    }
    let mut samples = dataset[*cursor..*cursor + cfg.batch_size].to_vec();
    *cursor += cfg.batch_size;
    samples.sort_by_key(|s| s.sample_id);
    let batch = Batch { step, samples };

    let (owner_requests, local_unique) = stage_key_routing(&batch, cfg.num_workers)?;
    for (owner, requests) in owner_requests.iter().enumerate() {
        let w = &mut workers[owner];
        debug_assert_eq!(
            w.buffers.prefetch.step, step,
            "prefetch buffer serves step {step}"
        );
        let retrieved = embedding::retrieve(
            &mut w.shard,
            requests,
            prf,
            cfg.emb_dim,
            cfg.num_workers,
            step,
        )?;
        w.buffers.prefetch.rows = retrieved.rows;
        w.buffers.prefetch.dirty.clear();
        w.buffers.prefetch.grads_applied = false;
    }
    Ok(Some(PreparedBatch {
        batch,
        owner_requests,
        max_local_unique: local_unique.into_iter().max().unwrap_or(0),
    }))
}

/// Run `cfg.steps` training steps (or fewer if the dataset runs out of whole
/// batches). The functional result is independent of `pipeline_depth`; the
/// stage log reflects the depth-parameterized pipeline interleaving.
pub fn run(dataset: &[Sample], cfg: &TrainConfig) -> Result<RunOutput, EngineError> {
    cfg.validate()?;
    let prf = Prf::new(cfg.seed);
    let mut workers = init_workers(cfg);
    let mut trajectory = Trajectory::new(TrajectoryMeta::from_config(cfg));
    let mut step_stats = Vec::new();

    let mut cursor = 0usize;
    let mut pending = if cfg.steps >= 1 {
        prepare_next_batch(dataset, &mut cursor, 1, &mut workers, cfg, &prf)?
    } else {
        None
    };

    let mut steps_processed = 0u64;
    while let Some(prepared) = pending.take() {
        let step = prepared.batch.step;
        // Prefetch buffer (holding this batch) becomes active.
        for w in workers.iter_mut() {
            w.buffers.swap();
            debug_assert_eq!(w.buffers.active.step, step);
        }

        // Lookup pipeline for the next batch runs concurrently with this
        // batch's compute, so it observes host state before this batch's
        // write-back.
        pending = if step < cfg.steps {
            prepare_next_batch(dataset, &mut cursor, step + 1, &mut workers, cfg, &prf)?
        } else {
            None
        };

        let output = fwp::run_frozen_window(&mut workers, &prepared.batch, cfg, &prf)?;

        // Dual-buffer synchronization for the next batch, now that this
        // batch's gradients are applied. The unsafe six-stage mode skips it
        // and inherits stale rows for every key the two batches share.
        if pending.is_some() && !cfg.unsafe_six_stage {
            for w in workers.iter_mut() {
                let (active, prefetch) = (&w.buffers.active, &mut w.buffers.prefetch);
                embedding::dual_buffer_sync(active, prefetch)?;
            }
        }

        for w in workers.iter_mut() {
            embedding::write_back(&w.buffers.active, &mut w.shard, cfg.num_workers)?;
        }

        let mut rows_after: BTreeMap<SparseKey, EmbeddingRow> = BTreeMap::new();
        for w in &workers {
            for (key, row) in &w.shard.rows {
                rows_after.insert(*key, row.clone());
            }
        }
        trajectory.steps.push(StepSnapshot {
            step,
            input_rows: output.input_rows,
            dense_after: workers[0].params.flatten(),
            rows_after,
        });
        let max_local_key_slots = (0..cfg.num_workers)
            .map(|w| {
                prepared
                    .batch
                    .worker_slice(w, cfg.num_workers)
                    .iter()
                    .map(|s| s.keys.len())
                    .sum()
            })
            .max()
            .unwrap_or(0);
        step_stats.push(StepStats {
            step,
            mean_loss: output.mean_loss,
            batch_unique_keys: prepared.batch.key_set().len(),
            max_local_key_slots,
            max_local_unique_keys: prepared.max_local_unique,
            max_owner_request_keys: prepared
                .owner_requests
                .iter()
                .map(|r| r.len())
                .max()
                .unwrap_or(0),
            mb_unique_keys: output.mb_unique_keys,
            dag: output.dag,
        });
        steps_processed += 1;
    }

    let stage_log = stage_schedule(steps_processed, cfg.pipeline_depth, !cfg.unsafe_six_stage);
    Ok(RunOutput {
        workers,
        trajectory,
        stage_log,
        step_stats,
        steps_processed,
    })
}
