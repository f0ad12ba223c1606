//! Shared domain types and the canonical-ordering rules every other module obeys.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of one row of the global embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SparseKey(pub u64);

/// Logical worker index in `[0, num_workers)`.
pub type WorkerId = usize;

/// One training record: a set of sparse keys plus a binary label.
///
/// Canonical form: `keys` strictly ascending by id, no duplicates, non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub sample_id: u64,
    pub keys: Vec<SparseKey>,
    /// Binary label, 0 or 1.
    pub label: u8,
}

impl Sample {
    pub fn new(sample_id: u64, keys: Vec<SparseKey>, label: u8) -> Self {
        let keys = canonical_key_order(&keys);
        debug_assert!(!keys.is_empty(), "sample {sample_id} has no keys");
        debug_assert!(label <= 1, "label must be 0 or 1");
        Self {
            sample_id,
            keys,
            label,
        }
    }

    /// Checks canonical form without repairing it.
    pub fn is_canonical(&self) -> bool {
        !self.keys.is_empty() && self.keys.windows(2).all(|w| w[0] < w[1]) && self.label <= 1
    }
}

/// One global training batch, samples ascending by `sample_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// 1-based training-step index.
    pub step: u64,
    pub samples: Vec<Sample>,
}

impl Batch {
    /// Distinct keys accessed by this batch, ascending.
    pub fn key_set(&self) -> Vec<SparseKey> {
        let all: Vec<SparseKey> = self
            .samples
            .iter()
            .flat_map(|s| s.keys.iter().copied())
            .collect();
        canonical_key_order(&all)
    }

    /// Canonical contiguous per-worker split: samples sorted by id are cut
    /// into `num_workers` equal slices; worker `w` gets slice `w`.
    pub fn worker_slice(&self, worker: WorkerId, num_workers: usize) -> &[Sample] {
        let per = self.samples.len() / num_workers;
        &self.samples[worker * per..(worker + 1) * per]
    }
}

/// One of N equal disjoint slices of a batch, the unit of intra-batch pipelining.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroBatch {
    pub parent_step: u64,
    /// 1-based index in `[1..=N]`.
    pub index: usize,
    pub samples: Vec<Sample>,
}

impl MicroBatch {
    /// Distinct keys of this micro-batch, ascending.
    pub fn key_set(&self) -> Vec<SparseKey> {
        let all: Vec<SparseKey> = self
            .samples
            .iter()
            .flat_map(|s| s.keys.iter().copied())
            .collect();
        canonical_key_order(&all)
    }
}

/// Training-run configuration shared by the distributed engine and the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub num_workers: usize,
    pub vocab_size: u64,
    pub emb_dim: usize,
    /// Number of hidden layers in the dense model (0 = output head only).
    pub dense_layers: usize,
    pub hidden_dim: usize,
    /// Global batch size; must be divisible by `num_workers * num_micro_batches`.
    pub batch_size: usize,
    pub num_micro_batches: usize,
    pub learning_rate: f64,
    /// Number of training steps to run.
    pub steps: u64,
    pub seed: u64,
    /// Key-centric sample clustering for micro-batch formation.
    pub clustering_enabled: bool,
    /// Canonical per-sample-id gradient summation for bitwise oracle equality.
    pub exact_order_mode: bool,
    /// Deliberately skip dual-buffer synchronization (one-step-asynchrony negative control).
    pub unsafe_six_stage: bool,
    /// In-flight batch window of the five-stage pipeline, 1..=5.
    #[serde(default = "default_pipeline_depth")]
    pub pipeline_depth: usize,
}

fn default_pipeline_depth() -> usize {
    5
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |field, reason: String| Err(ConfigError::Invalid { field, reason });
        if self.num_workers == 0 {
            return fail("num_workers", "must be >= 1".into());
        }
        if self.num_micro_batches == 0 {
            return fail("num_micro_batches", "must be >= 1".into());
        }
        if self.batch_size == 0
            || !self
                .batch_size
                .is_multiple_of(self.num_workers * self.num_micro_batches)
        {
            return fail(
                "batch_size",
                format!(
                    "{} not divisible by num_workers*num_micro_batches = {}",
                    self.batch_size,
                    self.num_workers * self.num_micro_batches
                ),
            );
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return fail("learning_rate", "must be > 0".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size", "must be >= 1".into());
        }
        if self.emb_dim == 0 {
            return fail("emb_dim", "must be >= 1".into());
        }
        if self.dense_layers > 0 && self.hidden_dim == 0 {
            return fail("hidden_dim", "must be >= 1 when dense_layers > 0".into());
        }
        if self.pipeline_depth == 0 || self.pipeline_depth > 5 {
            return fail(
                "pipeline_depth",
                format!("{} outside 1..=5", self.pipeline_depth),
            );
        }
        Ok(())
    }

    /// Samples per worker per batch.
    pub fn local_batch(&self) -> usize {
        self.batch_size / self.num_workers
    }

    /// Samples per worker per micro-batch.
    pub fn local_micro_batch(&self) -> usize {
        self.local_batch() / self.num_micro_batches
    }
}

/// Sorts ascending by id and removes duplicates. Idempotent.
pub fn canonical_key_order(keys: &[SparseKey]) -> Vec<SparseKey> {
    let mut out = keys.to_vec();
    out.sort_unstable();
    out.dedup();
    out
}
