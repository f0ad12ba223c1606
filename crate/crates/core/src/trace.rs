//! Per-step training trajectories: the states the consistency verifier compares.

use std::collections::BTreeMap;

use crate::dense::DenseParams;
use crate::embedding::EmbeddingRow;
use crate::types::{SparseKey, TrainConfig};

/// Fields two runs must share for a comparison to be meaningful. Worker count,
/// micro-batch count, clustering, and pipeline depth may legitimately differ.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub vocab_size: u64,
    pub emb_dim: usize,
    pub dense_layers: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl TrajectoryMeta {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            seed: cfg.seed,
            vocab_size: cfg.vocab_size,
            emb_dim: cfg.emb_dim,
            dense_layers: cfg.dense_layers,
            hidden_dim: cfg.hidden_dim,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
        }
    }
}

/// State captured around one training step.
#[derive(Debug, Clone)]
pub struct StepSnapshot {
    /// 1-based step index.
    pub step: u64,
    /// Embedding rows as read by this step's forward pass (pre-update values).
    pub input_rows: BTreeMap<SparseKey, EmbeddingRow>,
    /// Dense parameters after the step's update, flattened canonically.
    pub dense_after: Vec<f32>,
    /// All materialized embedding rows after the step's update.
    pub rows_after: BTreeMap<SparseKey, EmbeddingRow>,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub steps: Vec<StepSnapshot>,
}

impl Trajectory {
    pub fn new(meta: TrajectoryMeta) -> Self {
        Self {
            meta,
            steps: Vec::new(),
        }
    }

    pub fn final_dense(&self) -> Option<&[f32]> {
        self.steps.last().map(|s| s.dense_after.as_slice())
    }

    /// Materialized table state entering 1-based `step`: the previous step's
    /// post state, or `None` for step 1 (pristine lazily-initialized table).
    pub fn table_before_step(&self, step: u64) -> Option<&BTreeMap<SparseKey, EmbeddingRow>> {
        if step <= 1 {
            None
        } else {
            self.steps.get(step as usize - 2).map(|s| &s.rows_after)
        }
    }
}

/// Convenience for engine code assembling snapshots.
pub fn flatten_dense(params: &DenseParams<f32>) -> Vec<f32> {
    params.flatten()
}
