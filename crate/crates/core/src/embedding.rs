//! The sharded hierarchical embedding store: per-owner host tables, dual HBM
//! buffers, deduplication, retrieval, dual-buffer synchronization, gradient
//! application, and write-back.
//!
//! Rows materialize lazily through the keyed PRF, so any context (owner worker
//! or oracle) reconstructs bit-identical initial values without coordination.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::math::sgd_update_f32;
use crate::prf::Prf;
use crate::types::{SparseKey, WorkerId};

/// One trainable embedding row, 32-bit floats of length `emb_dim`.
pub type EmbeddingRow = Vec<f32>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbeddingError {
    #[error("key {key} belongs to worker {expected}, not {got}")]
    ForeignKey {
        key: u64,
        expected: WorkerId,
        got: WorkerId,
    },
    #[error("gradient for key {key} absent from buffer (step {step})")]
    MissingKey { key: u64, step: u64 },
    #[error("buffer owned by worker {buffer_owner} written back to shard of worker {shard_owner}")]
    OwnershipMismatch {
        buffer_owner: WorkerId,
        shard_owner: WorkerId,
    },
    #[error("dual-buffer sync ordering violated: active step {active_step} vs prefetch step {prefetch_step}, grads_applied={grads_applied}")]
    SyncOrdering {
        active_step: u64,
        prefetch_step: u64,
        grads_applied: bool,
    },
}

/// Owner of `key` under the `key mod W` sharding rule.
pub fn shard_of(key: SparseKey, num_workers: usize) -> WorkerId {
    (key.0 % num_workers as u64) as WorkerId
}

/// Deduplicate preserving reconstructability: `unique` is strictly ascending
/// and `unique[inverse[i]] == keys[i]` for every original position.
pub fn dedup(keys: &[SparseKey]) -> (Vec<SparseKey>, Vec<usize>) {
    let mut unique: Vec<SparseKey> = keys.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let inverse = keys
        .iter()
        .map(|k| unique.binary_search(k).expect("key present after dedup"))
        .collect();
    (unique, inverse)
}

/// Deterministic row initialization: `values[j] = U(-1/sqrt(d), 1/sqrt(d))`
/// keyed by `(key, j)`. Identical wherever computed.
pub fn init_row(prf: &Prf, key: SparseKey, emb_dim: usize) -> EmbeddingRow {
    let bound = 1.0 / (emb_dim as f64).sqrt();
    (0..emb_dim)
        .map(|j| prf.uniform("emb", &[key.0, j as u64], -bound, bound) as f32)
        .collect()
}

/// Per-owner host table slice; contains only keys with `shard_of(k) == owner`.
#[derive(Debug, Clone)]
pub struct HostShard {
    pub owner: WorkerId,
    pub rows: BTreeMap<SparseKey, EmbeddingRow>,
}

impl HostShard {
    pub fn new(owner: WorkerId) -> Self {
        Self {
            owner,
            rows: BTreeMap::new(),
        }
    }

    /// Debug dump: `(key, row)` pairs ascending by key, key as little-endian
    /// u64 followed by `emb_dim` little-endian f32s.
    pub fn write_dump(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (key, row) in &self.rows {
            out.write_all(&key.0.to_le_bytes())?;
            for v in row {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }
}

/// Buffer role in the dual-buffer pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferRole {
    Active,
    Prefetch,
}

/// One HBM buffer: the rows requested (post-dedup) for a single batch step.
#[derive(Debug, Clone)]
pub struct HbmBuffer {
    pub role: BufferRole,
    /// Batch step this buffer serves.
    pub step: u64,
    pub rows: BTreeMap<SparseKey, EmbeddingRow>,
    /// Keys updated by gradient application since retrieval.
    pub dirty: BTreeSet<SparseKey>,
    /// Set once the owning batch's gradients have been applied; the
    /// dual-buffer sync precondition.
    pub grads_applied: bool,
}

impl HbmBuffer {
    pub fn new(role: BufferRole, step: u64) -> Self {
        Self {
            role,
            step,
            rows: BTreeMap::new(),
            dirty: BTreeSet::new(),
            grads_applied: false,
        }
    }

    pub fn reset_for_step(&mut self, role: BufferRole, step: u64) {
        self.role = role;
        self.step = step;
        self.rows.clear();
        self.dirty.clear();
        self.grads_applied = false;
    }
}

/// Retrieve `keys` (ascending, unique, all owned by this shard) into a fresh
/// prefetch buffer. Rows missing from the host materialize via `init_row` and
/// are recorded back into the shard.
pub fn retrieve(
    shard: &mut HostShard,
    keys: &[SparseKey],
    prf: &Prf,
    emb_dim: usize,
    num_workers: usize,
    step: u64,
) -> Result<HbmBuffer, EmbeddingError> {
    let mut buffer = HbmBuffer::new(BufferRole::Prefetch, step);
    for &key in keys {
        let owner = shard_of(key, num_workers);
        if owner != shard.owner {
            return Err(EmbeddingError::ForeignKey {
                key: key.0,
                expected: owner,
                got: shard.owner,
            });
        }
        let row = shard
            .rows
            .entry(key)
            .or_insert_with(|| init_row(prf, key, emb_dim));
        buffer.rows.insert(key, row.clone());
    }
    Ok(buffer)
}

/// Copy every row at the intersection of the two buffers' key sets from the
/// active buffer (which holds step t-1 fully updated) into the prefetch buffer
/// (step t). All other prefetch rows are untouched.
pub fn dual_buffer_sync(
    active: &HbmBuffer,
    prefetch: &mut HbmBuffer,
) -> Result<(), EmbeddingError> {
    if active.step + 1 != prefetch.step || !active.grads_applied {
        return Err(EmbeddingError::SyncOrdering {
            active_step: active.step,
            prefetch_step: prefetch.step,
            grads_applied: active.grads_applied,
        });
    }
    for (key, row) in prefetch.rows.iter_mut() {
        if let Some(fresh) = active.rows.get(key) {
            row.clone_from(fresh);
        }
    }
    Ok(())
}

/// Per-key gradient contribution. `contributor` carries the global sample id
/// in exact-order mode so owners can reproduce the canonical summation order.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyGrad {
    pub key: SparseKey,
    pub grad: Vec<f32>,
    pub contributor: Option<u64>,
}

/// Exact-order application of raw contributions: per key, contributions are
/// sorted ascending by contributor sample id and summed in f32, then
/// `e -= lr * (sum / batch)`. Keys with gradients enter the dirty set.
pub fn apply_sparse_grads(
    buffer: &mut HbmBuffer,
    grads: &[KeyGrad],
    batch_size: usize,
    lr: f32,
) -> Result<(), EmbeddingError> {
    let mut ordered: Vec<&KeyGrad> = grads.iter().collect();
    ordered.sort_by_key(|g| (g.key, g.contributor));
    let mut idx = 0;
    while idx < ordered.len() {
        let key = ordered[idx].key;
        let row = buffer
            .rows
            .get_mut(&key)
            .ok_or(EmbeddingError::MissingKey {
                key: key.0,
                step: buffer.step,
            })?;
        let mut sum = vec![0.0f32; row.len()];
        while idx < ordered.len() && ordered[idx].key == key {
            for (acc, g) in sum.iter_mut().zip(&ordered[idx].grad) {
                *acc += g;
            }
            idx += 1;
        }
        sgd_update_f32(row, &sum, batch_size as f32, lr);
        buffer.dirty.insert(key);
    }
    Ok(())
}

/// Fast-mode application: per-key f64 gradient sums (already merged in the
/// canonical `(micro-batch, source worker)` order) are cast once to f32 and
/// applied with the shared update formula.
pub fn apply_grad_sums(
    buffer: &mut HbmBuffer,
    sums: &BTreeMap<SparseKey, Vec<f64>>,
    batch_size: usize,
    lr: f32,
) -> Result<(), EmbeddingError> {
    for (key, sum64) in sums {
        let row = buffer.rows.get_mut(key).ok_or(EmbeddingError::MissingKey {
            key: key.0,
            step: buffer.step,
        })?;
        let sum32: Vec<f32> = sum64.iter().map(|&v| v as f32).collect();
        sgd_update_f32(row, &sum32, batch_size as f32, lr);
        buffer.dirty.insert(*key);
    }
    Ok(())
}

/// Write only the dirty rows back to the host shard; clean rows untouched.
pub fn write_back(
    buffer: &HbmBuffer,
    shard: &mut HostShard,
    num_workers: usize,
) -> Result<(), EmbeddingError> {
    for key in &buffer.dirty {
        let owner = shard_of(*key, num_workers);
        if owner != shard.owner {
            return Err(EmbeddingError::OwnershipMismatch {
                buffer_owner: owner,
                shard_owner: shard.owner,
            });
        }
        let row = buffer.rows.get(key).expect("dirty subset of rows");
        shard.rows.insert(*key, row.clone());
    }
    Ok(())
}

/// Dual-buffer pair owned by one worker.
#[derive(Debug, Clone)]
pub struct BufferPair {
    pub active: HbmBuffer,
    pub prefetch: HbmBuffer,
}

impl BufferPair {
    pub fn new() -> Self {
        Self {
            active: HbmBuffer::new(BufferRole::Active, 0),
            prefetch: HbmBuffer::new(BufferRole::Prefetch, 1),
        }
    }

    /// Prefetch becomes active; the outgoing active buffer is emptied and
    /// recycled as the prefetch buffer for the following step.
    pub fn swap(&mut self) {
        std::mem::swap(&mut self.active, &mut self.prefetch);
        self.active.role = BufferRole::Active;
        let next_step = self.active.step + 1;
        self.prefetch
            .reset_for_step(BufferRole::Prefetch, next_step);
    }
}

impl Default for BufferPair {
    fn default() -> Self {
        Self::new()
    }
}
