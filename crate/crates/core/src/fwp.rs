//! Intra-batch frozen-window execution: key-centric sample clustering into N
//! micro-batches, per-micro-batch embedding exchange, dense compute against
//! frozen parameters, gradient exchange back to owners, and a single deferred
//! parameter update at window close.
//!
//! No parameter is mutated while the window is open, so every embedding row a
//! micro-batch reads is provably the freshest version; the deferred update is
//! algebraically the full-batch synchronous update.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::dense;
use crate::embedding::{self, EmbeddingRow, HbmBuffer, KeyGrad};
use crate::fabric::{self, A2aPayload, FabricError};
use crate::math::Fingerprint;
use crate::prf::Prf;
use crate::types::{Batch, MicroBatch, Sample, SparseKey, TrainConfig, WorkerId};
use crate::worker::WorkerTrainState;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("{0}")]
    Fabric(#[from] FabricError),
    #[error("{0}")]
    Embedding(#[from] embedding::EmbeddingError),
    #[error("local sample count {samples} not divisible by {micro_batches} micro-batches")]
    IndivisiblePartition {
        samples: usize,
        micro_batches: usize,
    },
    #[error("non-finite loss at step {step} (sample {sample_id})")]
    NonFiniteLoss { step: u64, sample_id: u64 },
    #[error("frozen-window write detector tripped at step {step}")]
    FrozenStateMutated { step: u64 },
    #[error("dense replicas diverged at step {step} (worker {worker})")]
    ReplicationBroken { step: u64, worker: WorkerId },
}

/// How a batch's local samples are grouped into micro-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    /// Contiguous slices by ascending sample id.
    Sequential,
    /// Seeded shuffle, then slices.
    Random,
    /// Greedy key-overlap agglomeration.
    Clustered,
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub micro_batches: Vec<MicroBatch>,
    pub provenance: PartitionMode,
}

impl Partition {
    /// Total distinct keys summed over micro-batches (locally); the quantity
    /// clustering shrinks. Repeats across micro-batches are counted once per
    /// micro-batch because per-micro-batch dedup cannot see across them.
    pub fn total_unique_keys(&self) -> usize {
        self.micro_batches.iter().map(|mb| mb.key_set().len()).sum()
    }
}

/// Group `local` samples (one worker's slice of a batch) into N equal
/// micro-batches. Clustered mode greedily packs samples sharing keys together:
/// open a group with the largest unassigned key set, then repeatedly add the
/// unassigned sample with maximal intersection with the group's key union
/// (ties: smaller union growth, then lowest sample id).
pub fn cluster_samples(
    local: &[Sample],
    num_micro_batches: usize,
    mode: PartitionMode,
    prf: &Prf,
    step: u64,
    worker: WorkerId,
) -> Result<Partition, WindowError> {
    if num_micro_batches == 0 || !local.len().is_multiple_of(num_micro_batches) {
        return Err(WindowError::IndivisiblePartition {
            samples: local.len(),
            micro_batches: num_micro_batches,
        });
    }
    let group_size = local.len() / num_micro_batches;
    let groups: Vec<Vec<Sample>> = match mode {
        PartitionMode::Sequential => local.chunks(group_size).map(|c| c.to_vec()).collect(),
        PartitionMode::Random => {
            let mut shuffled = local.to_vec();
            for i in (1..shuffled.len()).rev() {
                let j = (prf.word("shuffle", &[step, worker as u64, i as u64]) % (i as u64 + 1))
                    as usize;
                shuffled.swap(i, j);
            }
            shuffled.chunks(group_size).map(|c| c.to_vec()).collect()
        }
        PartitionMode::Clustered => greedy_cluster(local, num_micro_batches, group_size),
    };
    let micro_batches = groups
        .into_iter()
        .enumerate()
        .map(|(i, mut samples)| {
            samples.sort_by_key(|s| s.sample_id);
            MicroBatch {
                parent_step: step,
                index: i + 1,
                samples,
            }
        })
        .collect();
    Ok(Partition {
        micro_batches,
        provenance: mode,
    })
}

fn greedy_cluster(local: &[Sample], num_groups: usize, group_size: usize) -> Vec<Vec<Sample>> {
    let mut order: Vec<usize> = (0..local.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(local[i].keys.len()), local[i].sample_id));
    let mut assigned = vec![false; local.len()];
    let mut groups = Vec::with_capacity(num_groups);
    for _ in 0..num_groups {
        let seed_idx = *order
            .iter()
            .find(|&&i| !assigned[i])
            .expect("counts divide evenly");
        assigned[seed_idx] = true;
        let mut members = vec![seed_idx];
        let mut union: std::collections::BTreeSet<SparseKey> =
            local[seed_idx].keys.iter().copied().collect();
        while members.len() < group_size {
            let mut best: Option<(usize, usize, usize)> = None; // (idx, overlap, growth)
            for &i in &order {
                if assigned[i] {
                    continue;
                }
                let overlap = local[i].keys.iter().filter(|k| union.contains(k)).count();
                let growth = local[i].keys.len() - overlap;
                let better = match best {
                    None => true,
                    Some((bi, bo, bg)) => {
                        (
                            overlap,
                            std::cmp::Reverse(growth),
                            std::cmp::Reverse(local[i].sample_id),
                        ) > (
                            bo,
                            std::cmp::Reverse(bg),
                            std::cmp::Reverse(local[bi].sample_id),
                        )
                    }
                };
                if better {
                    best = Some((i, overlap, growth));
                }
            }
            let (idx, _, _) = best.expect("counts divide evenly");
            assigned[idx] = true;
            union.extend(local[idx].keys.iter().copied());
            members.push(idx);
        }
        groups.push(members.into_iter().map(|i| local[i].clone()).collect());
    }
    groups
}

/// Per-owner key request lists for one micro-batch: dedup within the
/// micro-batch only, bucket by owner. Keys repeated across micro-batches are
/// re-requested; that payload inflation is what clustering mitigates.
pub fn microbatch_routing(mb: &MicroBatch, num_workers: usize) -> Vec<Vec<SparseKey>> {
    let mut buckets: Vec<Vec<SparseKey>> = vec![Vec::new(); num_workers];
    for key in mb.key_set() {
        buckets[embedding::shard_of(key, num_workers)].push(key);
    }
    buckets
}

/// Per-owner gradient store for one batch; nothing is applied until `close`.
#[derive(Debug)]
enum SparseStore {
    /// Raw per-(sample, key) contributions carrying contributor sample ids.
    Exact(Vec<KeyGrad>),
    /// Per-key f64 sums merged in ascending (micro-batch, source worker) order.
    Fast(BTreeMap<SparseKey, Vec<f64>>),
}

#[derive(Debug)]
enum DenseStore {
    /// Per-sample flattened dense gradients, exchanged and folded canonically.
    Exact(Vec<(u64, Vec<f32>)>),
    /// Worker-local f64 accumulation.
    Fast(Vec<f64>),
}

#[derive(Debug)]
pub struct FrozenAccumulator {
    sparse: SparseStore,
    dense: DenseStore,
    closed: bool,
}

impl FrozenAccumulator {
    fn new(exact: bool, dense_len: usize) -> Self {
        Self {
            sparse: if exact {
                SparseStore::Exact(Vec::new())
            } else {
                SparseStore::Fast(BTreeMap::new())
            },
            dense: if exact {
                DenseStore::Exact(Vec::new())
            } else {
                DenseStore::Fast(vec![0.0; dense_len])
            },
            closed: false,
        }
    }
}

/// Node and edge structure of one batch's two-stream schedule, annotated with
/// payload byte counts (embedding and gradient exchanges: `|K(M_i)| * d * 4`)
/// and per-event sample counts for compute cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    EmbA2a,
    Compute,
    GradA2a,
    AllReduce,
    Apply,
}

#[derive(Debug, Clone, Serialize)]
pub struct DagNode {
    pub id: usize,
    pub kind: NodeKind,
    /// 1-based micro-batch index; 0 for allreduce/apply.
    pub index: usize,
    pub payload_bytes: u64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScheduleDag {
    pub nodes: Vec<DagNode>,
    /// Directed edges as (from id, to id).
    pub edges: Vec<(usize, usize)>,
}

impl ScheduleDag {
    pub fn node(&self, kind: NodeKind, index: usize) -> &DagNode {
        self.nodes
            .iter()
            .find(|n| n.kind == kind && n.index == index)
            .expect("node present by construction")
    }

    /// Topological check; the construction is acyclic by design.
    pub fn validate_acyclic(&self) -> bool {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        for &(_, to) in &self.edges {
            indegree[to] += 1;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(node) = queue.pop() {
            seen += 1;
            for &(from, to) in &self.edges {
                if from == node {
                    indegree[to] -= 1;
                    if indegree[to] == 0 {
                        queue.push(to);
                    }
                }
            }
        }
        seen == n
    }

    pub fn write_json(&self, path: &std::path::Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::from)?;
        std::fs::write(path, text)
    }
}

/// Options for schedule construction.
#[derive(Debug, Clone, Copy)]
pub struct DagOptions {
    /// Keep the dense allreduce after the last gradient exchange on the comm
    /// stream (the default); `false` lets it race that exchange instead.
    pub allreduce_after_last_grad: bool,
}

impl Default for DagOptions {
    fn default() -> Self {
        Self {
            allreduce_after_last_grad: true,
        }
    }
}

/// Build the two-stream schedule for one batch.
///
/// Edges: `emb_i -> compute_i -> grad_i` per micro-batch; a compute-stream
/// chain `compute_1 -> ... -> compute_N`; and a total order on the
/// communication stream that launches each exchange as early as it can matter:
/// `emb_1, emb_2, grad_1, emb_3, grad_2, ..., emb_N, grad_{N-1}, grad_N`.
/// Compute_i never blocks emb_j for j <= i+1.
pub fn build_schedule_dag(
    mb_unique_keys: &[usize],
    mb_samples: &[usize],
    emb_dim: usize,
    opts: DagOptions,
) -> ScheduleDag {
    let n = mb_unique_keys.len();
    assert!(n >= 1 && mb_samples.len() == n);
    let mut nodes = Vec::with_capacity(3 * n + 2);
    let mut ids: BTreeMap<(u8, usize), usize> = BTreeMap::new();
    let mut push =
        |nodes: &mut Vec<DagNode>, kind: NodeKind, index: usize, bytes: u64, samples: usize| {
            let id = nodes.len();
            let tag = match kind {
                NodeKind::EmbA2a => 0u8,
                NodeKind::Compute => 1,
                NodeKind::GradA2a => 2,
                NodeKind::AllReduce => 3,
                NodeKind::Apply => 4,
            };
            ids.insert((tag, index), id);
            nodes.push(DagNode {
                id,
                kind,
                index,
                payload_bytes: bytes,
                samples,
            });
            id
        };
    for i in 1..=n {
        let bytes = (mb_unique_keys[i - 1] * emb_dim * 4) as u64;
        push(&mut nodes, NodeKind::EmbA2a, i, bytes, 0);
        push(&mut nodes, NodeKind::Compute, i, 0, mb_samples[i - 1]);
        push(&mut nodes, NodeKind::GradA2a, i, bytes, 0);
    }
    let allreduce = push(&mut nodes, NodeKind::AllReduce, 0, 0, 0);
    let apply = push(&mut nodes, NodeKind::Apply, 0, 0, 0);

    let id = |tag: u8, index: usize| ids[&(tag, index)];
    let mut edges = Vec::new();
    for i in 1..=n {
        edges.push((id(0, i), id(1, i))); // emb -> compute
        edges.push((id(1, i), id(2, i))); // compute -> grad
        if i < n {
            edges.push((id(1, i), id(1, i + 1))); // compute chain
        }
        edges.push((id(2, i), apply)); // every grad exchange precedes apply
    }
    // Communication-stream total order.
    let mut comm_seq: Vec<usize> = vec![id(0, 1)];
    if n >= 2 {
        comm_seq.push(id(0, 2));
        for i in 1..=n.saturating_sub(2) {
            comm_seq.push(id(2, i));
            comm_seq.push(id(0, i + 2));
        }
        comm_seq.push(id(2, n - 1));
    }
    comm_seq.push(id(2, n));
    if opts.allreduce_after_last_grad {
        comm_seq.push(allreduce);
    }
    for pair in comm_seq.windows(2) {
        edges.push((pair[0], pair[1]));
    }
    if !opts.allreduce_after_last_grad {
        edges.push((id(1, n), allreduce));
    }
    edges.push((allreduce, apply));
    edges.push((id(1, n), apply));
    ScheduleDag { nodes, edges }
}

/// Everything the orchestrator and the timing model need from one window.
#[derive(Debug)]
pub struct WindowOutput {
    /// Rows as read by this batch's forward pass (owner-side frozen values).
    pub input_rows: BTreeMap<SparseKey, EmbeddingRow>,
    /// Global distinct key count per micro-batch, `|K(M_i)|`.
    pub mb_unique_keys: Vec<usize>,
    pub dag: ScheduleDag,
    pub mean_loss: f64,
}

fn partition_mode(cfg: &TrainConfig) -> PartitionMode {
    if cfg.clustering_enabled {
        PartitionMode::Clustered
    } else {
        PartitionMode::Sequential
    }
}

fn frozen_fingerprint(workers: &[WorkerTrainState]) -> u64 {
    let mut fp = Fingerprint::new();
    for w in workers {
        fp.push_f32s(&w.params.flatten());
        for (key, row) in &w.buffers.active.rows {
            fp.push_u64(key.0);
            fp.push_f32s(row);
        }
    }
    fp.finish()
}

/// Run one batch through the frozen window: for each micro-batch, exchange
/// embeddings read from the frozen active buffers, compute dense
/// forward/backward against the frozen replica, and exchange gradients back to
/// owners into the accumulator; after the last micro-batch, perform the single
/// deferred dense and sparse update.
pub fn run_frozen_window(
    workers: &mut [WorkerTrainState],
    batch: &Batch,
    cfg: &TrainConfig,
    prf: &Prf,
) -> Result<WindowOutput, WindowError> {
    run_window(workers, batch, cfg, prf, false)
}

/// Contrast mode for consistency experiments: identical data movement, but
/// updates are applied eagerly after every micro-batch instead of once at
/// window close. Diverges from the synchronous oracle whenever micro-batches
/// share a key.
pub fn run_window_eager_updates(
    workers: &mut [WorkerTrainState],
    batch: &Batch,
    cfg: &TrainConfig,
    prf: &Prf,
) -> Result<WindowOutput, WindowError> {
    run_window(workers, batch, cfg, prf, true)
}

fn run_window(
    workers: &mut [WorkerTrainState],
    batch: &Batch,
    cfg: &TrainConfig,
    prf: &Prf,
    eager_updates: bool,
) -> Result<WindowOutput, WindowError> {
    let num_workers = cfg.num_workers;
    let n = cfg.num_micro_batches;
    let exact = cfg.exact_order_mode;
    let dense_len = workers[0].params.flatten().len();
    let step = batch.step;

    for w in workers.iter() {
        debug_assert_eq!(
            w.buffers.active.step, step,
            "active buffer serves the batch"
        );
    }

    // Frozen snapshot witnesses: input rows for the verifier, fingerprint for
    // the write detector.
    let mut input_rows = BTreeMap::new();
    for w in workers.iter() {
        for (key, row) in &w.buffers.active.rows {
            input_rows.insert(*key, row.clone());
        }
    }
    let open_fingerprint = frozen_fingerprint(workers);

    // Per-worker micro-batch partitions of the canonical local slices.
    let mode = partition_mode(cfg);
    let mut partitions = Vec::with_capacity(num_workers);
    for w in 0..num_workers {
        let local = batch.worker_slice(w, num_workers);
        partitions.push(cluster_samples(local, n, mode, prf, step, w)?);
    }

    let mut accumulators: Vec<FrozenAccumulator> = (0..num_workers)
        .map(|_| FrozenAccumulator::new(exact, dense_len))
        .collect();
    let mut mb_unique_keys = Vec::with_capacity(n);
    let mut loss_sum = 0.0f64;

    for mb_idx in 0..n {
        // Key requests for this micro-batch, bucketed by owner.
        let request_payloads: Vec<A2aPayload<SparseKey>> = (0..num_workers)
            .map(|w| A2aPayload {
                to: microbatch_routing(&partitions[w].micro_batches[mb_idx], num_workers),
            })
            .collect();
        let requests = fabric::all_to_all(request_payloads)?;

        // Owners answer from the frozen active buffer. |K(M_i)| is the global
        // distinct count, disjoint across owners by the sharding rule.
        let mut unique_this_mb = 0usize;
        let mut reply_payloads: Vec<A2aPayload<(SparseKey, EmbeddingRow)>> =
            Vec::with_capacity(num_workers);
        for owner in 0..num_workers {
            let union: Vec<SparseKey> = {
                let all: Vec<SparseKey> = requests[owner]
                    .from
                    .iter()
                    .flat_map(|l| l.iter().copied())
                    .collect();
                crate::types::canonical_key_order(&all)
            };
            unique_this_mb += union.len();
            let buffer = &workers[owner].buffers.active;
            let mut to: Vec<Vec<(SparseKey, EmbeddingRow)>> = Vec::with_capacity(num_workers);
            for requester in 0..num_workers {
                let rows: Result<Vec<(SparseKey, EmbeddingRow)>, WindowError> = requests[owner]
                    .from[requester]
                    .iter()
                    .map(|key| {
                        buffer.rows.get(key).map(|r| (*key, r.clone())).ok_or(
                            WindowError::Embedding(embedding::EmbeddingError::MissingKey {
                                key: key.0,
                                step,
                            }),
                        )
                    })
                    .collect();
                to.push(rows?);
            }
            reply_payloads.push(A2aPayload { to });
        }
        mb_unique_keys.push(unique_this_mb);
        let replies = fabric::all_to_all(reply_payloads)?;

        // Dense compute per worker against the frozen replica.
        let mut grad_payloads_exact: Vec<A2aPayload<KeyGrad>> = Vec::with_capacity(num_workers);
        let mut grad_payloads_fast: Vec<A2aPayload<(SparseKey, Vec<f64>)>> =
            Vec::with_capacity(num_workers);
        for w in 0..num_workers {
            let mb = &partitions[w].micro_batches[mb_idx];
            let mut rows: BTreeMap<SparseKey, EmbeddingRow> = BTreeMap::new();
            for source in &replies[w].from {
                for (key, row) in source {
                    rows.insert(*key, row.clone());
                }
            }
            let pooled: Vec<Vec<f32>> = mb.samples.iter().map(|s| dense::pool(s, &rows)).collect();
            let labels: Vec<u8> = mb.samples.iter().map(|s| s.label).collect();
            let (losses, cache) = dense::forward(&workers[w].params, &pooled, &labels);
            for (loss, sample) in losses.iter().zip(&mb.samples) {
                if !loss.is_finite() {
                    return Err(WindowError::NonFiniteLoss {
                        step,
                        sample_id: sample.sample_id,
                    });
                }
                loss_sum += *loss as f64;
            }

            let mut pooled_grads = Vec::with_capacity(mb.samples.len());
            for (sample, sample_cache) in mb.samples.iter().zip(&cache) {
                let (grad, dx) = dense::backward_sample(&workers[w].params, sample_cache);
                match &mut accumulators[w].dense {
                    DenseStore::Exact(list) => list.push((sample.sample_id, grad.flatten())),
                    DenseStore::Fast(acc) => {
                        for (a, g) in acc.iter_mut().zip(grad.flatten()) {
                            *a += g as f64;
                        }
                    }
                }
                pooled_grads.push(dx);
            }

            let key_grads = dense::scatter_embedding_grads(&mb.samples, &pooled_grads);
            if exact {
                let mut to: Vec<Vec<KeyGrad>> = vec![Vec::new(); num_workers];
                for kg in key_grads {
                    to[embedding::shard_of(kg.key, num_workers)].push(kg);
                }
                grad_payloads_exact.push(A2aPayload { to });
            } else {
                // Pre-sum per key over this worker's micro-batch samples
                // (ascending sample id) in f64.
                let mut sums: BTreeMap<SparseKey, Vec<f64>> = BTreeMap::new();
                for kg in &key_grads {
                    let entry = sums
                        .entry(kg.key)
                        .or_insert_with(|| vec![0.0; kg.grad.len()]);
                    for (a, g) in entry.iter_mut().zip(&kg.grad) {
                        *a += *g as f64;
                    }
                }
                let mut to: Vec<Vec<(SparseKey, Vec<f64>)>> = vec![Vec::new(); num_workers];
                for (key, sum) in sums {
                    to[embedding::shard_of(key, num_workers)].push((key, sum));
                }
                grad_payloads_fast.push(A2aPayload { to });
            }
        }

        // Gradient exchange back to owners; receive order (micro-batch index,
        // then ascending source id) is the canonical fast-mode merge order.
        if exact {
            let results = fabric::all_to_all(grad_payloads_exact)?;
            for (owner, result) in results.into_iter().enumerate() {
                let SparseStore::Exact(list) = &mut accumulators[owner].sparse else {
                    unreachable!("store mode fixed per run")
                };
                for source in result.from {
                    list.extend(source);
                }
            }
        } else {
            let results = fabric::all_to_all(grad_payloads_fast)?;
            for (owner, result) in results.into_iter().enumerate() {
                let SparseStore::Fast(map) = &mut accumulators[owner].sparse else {
                    unreachable!("store mode fixed per run")
                };
                for source in result.from {
                    for (key, sum) in source {
                        let entry = map.entry(key).or_insert_with(|| vec![0.0; sum.len()]);
                        for (a, g) in entry.iter_mut().zip(&sum) {
                            *a += g;
                        }
                    }
                }
            }
        }

        if eager_updates {
            let drained: Vec<FrozenAccumulator> = std::mem::replace(
                &mut accumulators,
                (0..num_workers)
                    .map(|_| FrozenAccumulator::new(exact, dense_len))
                    .collect(),
            );
            apply_accumulated(workers, drained, batch.samples.len(), cfg)?;
        }
    }

    if !eager_updates {
        // The whole point of the window: nothing moved while it was open.
        if frozen_fingerprint(workers) != open_fingerprint {
            return Err(WindowError::FrozenStateMutated { step });
        }
        apply_accumulated(
            workers,
            std::mem::take(&mut accumulators),
            batch.samples.len(),
            cfg,
        )?;
    }

    for w in workers.iter_mut() {
        w.buffers.active.grads_applied = true;
    }

    // Replication check: every dense replica must be bit-identical.
    let reference = workers[0].params.flatten();
    for w in workers.iter().skip(1) {
        let flat = w.params.flatten();
        if flat.len() != reference.len()
            || flat
                .iter()
                .zip(&reference)
                .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(WindowError::ReplicationBroken {
                step,
                worker: w.worker_id,
            });
        }
    }

    let mb_samples: Vec<usize> = partitions[0]
        .micro_batches
        .iter()
        .enumerate()
        .map(|(i, _)| {
            (0..num_workers)
                .map(|w| partitions[w].micro_batches[i].samples.len())
                .sum()
        })
        .collect();
    let dag = build_schedule_dag(
        &mb_unique_keys,
        &mb_samples,
        cfg.emb_dim,
        DagOptions::default(),
    );
    Ok(WindowOutput {
        input_rows,
        mb_unique_keys,
        dag,
        mean_loss: loss_sum / batch.samples.len() as f64,
    })
}

/// The deferred update: dense gradients aggregated canonically and applied to
/// every replica, sparse contributions applied once per owner.
fn apply_accumulated(
    workers: &mut [WorkerTrainState],
    accumulators: Vec<FrozenAccumulator>,
    batch_size: usize,
    cfg: &TrainConfig,
) -> Result<(), WindowError> {
    let num_workers = cfg.num_workers;
    let lr = cfg.learning_rate as f32;
    let mut dense_exact: Vec<Vec<(u64, Vec<f32>)>> = Vec::new();
    let mut dense_fast: Vec<Vec<f64>> = Vec::new();
    let mut sparse_stores = Vec::with_capacity(num_workers);
    for mut acc in accumulators {
        assert!(!acc.closed, "accumulator closes exactly once per batch");
        acc.closed = true;
        match acc.dense {
            DenseStore::Exact(list) => dense_exact.push(list),
            DenseStore::Fast(sum) => dense_fast.push(sum),
        }
        sparse_stores.push(acc.sparse);
    }

    // Dense update, replicated bit-identically.
    let dense_sum32: Vec<f32> = if cfg.exact_order_mode {
        // Every worker shares its per-sample gradients with every peer; each
        // then folds the identical flat list ascending by sample id, exactly
        // the oracle's summation order.
        let payloads: Vec<A2aPayload<(u64, Vec<f32>)>> = dense_exact
            .iter()
            .map(|list| A2aPayload {
                to: (0..num_workers).map(|_| list.clone()).collect(),
            })
            .collect();
        let results = fabric::all_to_all(payloads)?;
        let mut gathered: Vec<(u64, Vec<f32>)> = results
            .into_iter()
            .next()
            .expect("at least one worker")
            .from
            .into_iter()
            .flatten()
            .collect();
        gathered.sort_by_key(|(sample_id, _)| *sample_id);
        let mut sum = vec![0.0f32; workers[0].params.flatten().len()];
        for (_, grad) in &gathered {
            for (a, g) in sum.iter_mut().zip(grad) {
                *a += g;
            }
        }
        sum
    } else {
        let reduced = fabric::all_reduce_sum(&dense_fast)?;
        reduced
            .into_iter()
            .next()
            .expect("at least one worker")
            .iter()
            .map(|&v| v as f32)
            .collect()
    };
    for w in workers.iter_mut() {
        let grad = w.params.unflatten_from(&dense_sum32);
        dense::sgd_step(&mut w.params, &grad, batch_size, lr);
    }

    // Sparse update, once per owner on its active buffer.
    for (owner, store) in sparse_stores.into_iter().enumerate() {
        let buffer: &mut HbmBuffer = &mut workers[owner].buffers.active;
        match store {
            SparseStore::Exact(list) => {
                embedding::apply_sparse_grads(buffer, &list, batch_size, lr)?
            }
            SparseStore::Fast(map) => embedding::apply_grad_sums(buffer, &map, batch_size, lr)?,
        }
    }
    Ok(())
}
