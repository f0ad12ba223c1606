//! The synchronous reference trainer and trajectory comparison.
//!
//! The oracle runs single-context with no sharding, no buffers, and no
//! micro-batching: pool, forward, backward over the whole batch against the
//! current parameters, then one dense update and one per-key sparse update
//! with contributions summed ascending by sample id. Agreement with the
//! distributed engine is the artifact's consistency evidence.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::dense::{self, DenseParams};
use crate::embedding::{self, EmbeddingRow, KeyGrad};
use crate::prf::Prf;
use crate::trace::{StepSnapshot, Trajectory, TrajectoryMeta};
use crate::types::{Batch, Sample, SparseKey, TrainConfig};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("non-finite loss at step {step} (sample {sample_id})")]
    NonFiniteLoss { step: u64, sample_id: u64 },
    #[error("trajectory configs differ: {0}")]
    ConfigMismatch(String),
}

/// Single-context trainer state.
#[derive(Debug, Clone)]
pub struct OracleState {
    pub params: DenseParams<f32>,
    pub table: BTreeMap<SparseKey, EmbeddingRow>,
    pub step: u64,
    prf: Prf,
    emb_dim: usize,
}

impl OracleState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let prf = Prf::new(cfg.seed);
        Self {
            params: DenseParams::init(&prf, cfg.emb_dim, cfg.hidden_dim, cfg.dense_layers),
            table: BTreeMap::new(),
            step: 0,
            prf,
            emb_dim: cfg.emb_dim,
        }
    }

    fn materialize(&mut self, keys: &[SparseKey]) {
        for &key in keys {
            self.table
                .entry(key)
                .or_insert_with(|| embedding::init_row(&self.prf, key, self.emb_dim));
        }
    }
}

/// One synchronous step over `batch`; returns the rows the forward pass read.
pub fn sync_step(
    state: &mut OracleState,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<BTreeMap<SparseKey, EmbeddingRow>, OracleError> {
    let keys = batch.key_set();
    state.materialize(&keys);
    let input_rows: BTreeMap<SparseKey, EmbeddingRow> =
        keys.iter().map(|k| (*k, state.table[k].clone())).collect();

    // Per-sample forward/backward against the frozen pre-step parameters,
    // samples ascending by id (the canonical fold order).
    let pooled: Vec<Vec<f32>> = batch
        .samples
        .iter()
        .map(|s| dense::pool(s, &input_rows))
        .collect();
    let labels: Vec<u8> = batch.samples.iter().map(|s| s.label).collect();
    let (losses, cache) = dense::forward(&state.params, &pooled, &labels);
    for (loss, sample) in losses.iter().zip(&batch.samples) {
        if !loss.is_finite() {
            return Err(OracleError::NonFiniteLoss {
                step: batch.step,
                sample_id: sample.sample_id,
            });
        }
    }
    let (dense_sum, pooled_grads) = dense::backward(&state.params, &cache);

    let lr = cfg.learning_rate as f32;
    dense::sgd_step(&mut state.params, &dense_sum, batch.samples.len(), lr);

    let key_grads: Vec<KeyGrad> = dense::scatter_embedding_grads(&batch.samples, &pooled_grads);
    apply_to_table(&mut state.table, &key_grads, batch.samples.len(), lr);

    state.step = batch.step;
    Ok(input_rows)
}

/// Sparse update on the flat table: contributions per key sorted ascending by
/// contributor sample id, summed in f32, applied with the shared SGD formula.
fn apply_to_table(
    table: &mut BTreeMap<SparseKey, EmbeddingRow>,
    grads: &[KeyGrad],
    batch_size: usize,
    lr: f32,
) {
    let mut ordered: Vec<&KeyGrad> = grads.iter().collect();
    ordered.sort_by_key(|g| (g.key, g.contributor));
    let mut idx = 0;
    while idx < ordered.len() {
        let key = ordered[idx].key;
        let row = table.get_mut(&key).expect("materialized before update");
        let mut sum = vec![0.0f32; row.len()];
        while idx < ordered.len() && ordered[idx].key == key {
            for (acc, g) in sum.iter_mut().zip(&ordered[idx].grad) {
                *acc += g;
            }
            idx += 1;
        }
        crate::math::sgd_update_f32(row, &sum, batch_size as f32, lr);
    }
}

/// Run the oracle over the dataset for `cfg.steps` batches (or until the
/// dataset runs out of whole batches), recording the trajectory.
pub fn run_oracle(dataset: &[Sample], cfg: &TrainConfig) -> Result<Trajectory, OracleError> {
    let mut state = OracleState::new(cfg);
    let mut trajectory = Trajectory::new(TrajectoryMeta::from_config(cfg));
    let mut cursor = 0usize;
    for step in 1..=cfg.steps {
        if cursor + cfg.batch_size > dataset.len() {
            break;
        }
        let mut samples = dataset[cursor..cursor + cfg.batch_size].to_vec();
        samples.sort_by_key(|s| s.sample_id);
        cursor += cfg.batch_size;
        let batch = Batch { step, samples };
        let input_rows = sync_step(&mut state, &batch, cfg)?;
        trajectory.steps.push(StepSnapshot {
            step,
            input_rows,
            dense_after: state.params.flatten(),
            rows_after: state.table.clone(),
        });
    }
    Ok(trajectory)
}

/// Divergence metrics of run B against reference run A.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub steps_compared: u64,
    pub max_abs_dense_diff: f64,
    pub max_abs_embedding_diff: f64,
    /// 1-based first step whose diff exceeds the tolerance, if any.
    pub first_divergent_step: Option<u64>,
    /// Steps of lag when divergence is attributable to stale reads.
    pub estimated_staleness_lag: Option<u64>,
    /// Whole-trajectory bitwise equality over dense params and rows.
    pub bitwise_equal: bool,
    /// Per-step (dense, embedding) max-abs diffs, for export.
    pub per_step: Vec<(u64, f64, f64)>,
}

impl ConsistencyReport {
    pub fn max_abs_diff(&self) -> f64 {
        self.max_abs_dense_diff.max(self.max_abs_embedding_diff)
    }

    /// Step-indexed structured text for CLI display.
    pub fn write_text(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "steps_compared\t{}", self.steps_compared)?;
        writeln!(out, "max_abs_dense_diff\t{:e}", self.max_abs_dense_diff)?;
        writeln!(
            out,
            "max_abs_embedding_diff\t{:e}",
            self.max_abs_embedding_diff
        )?;
        writeln!(
            out,
            "first_divergent_step\t{}",
            self.first_divergent_step
                .map_or("none".into(), |s| s.to_string())
        )?;
        writeln!(
            out,
            "estimated_staleness_lag\t{}",
            self.estimated_staleness_lag
                .map_or("none".into(), |t| t.to_string())
        )?;
        writeln!(out, "bitwise_equal\t{}", self.bitwise_equal)?;
        writeln!(out, "step\tdense_diff\tembedding_diff")?;
        for (step, d, e) in &self.per_step {
            writeln!(out, "{step}\t{d:e}\t{e:e}")?;
        }
        out.flush()
    }
}

fn rows_bitwise_eq(a: &EmbeddingRow, b: &EmbeddingRow) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn max_row_diff(
    a: &BTreeMap<SparseKey, EmbeddingRow>,
    b: &BTreeMap<SparseKey, EmbeddingRow>,
    prf: &Prf,
    emb_dim: usize,
) -> (f64, bool) {
    let mut max = 0.0f64;
    let mut bitwise = true;
    let keys: std::collections::BTreeSet<SparseKey> = a.keys().chain(b.keys()).copied().collect();
    for key in keys {
        let init;
        let row_a = match a.get(&key) {
            Some(r) => r,
            None => {
                init = embedding::init_row(prf, key, emb_dim);
                &init
            }
        };
        let init_b;
        let row_b = match b.get(&key) {
            Some(r) => r,
            None => {
                init_b = embedding::init_row(prf, key, emb_dim);
                &init_b
            }
        };
        if !rows_bitwise_eq(row_a, row_b) {
            bitwise = false;
        }
        for (x, y) in row_a.iter().zip(row_b) {
            max = max.max((*x as f64 - *y as f64).abs());
        }
    }
    (max, bitwise)
}

/// Compare two trajectories step by step. Divergence is the first step whose
/// max-abs diff (dense, post-step rows, or input rows) exceeds `tolerance`;
/// the staleness lag is estimated by matching B's divergent input rows
/// bitwise against A's table state from `tau` steps earlier, smallest
/// `tau` in 1..=3 first.
pub fn compare_trajectories(
    reference: &Trajectory,
    candidate: &Trajectory,
    tolerance: f64,
) -> Result<ConsistencyReport, OracleError> {
    if reference.meta != candidate.meta {
        return Err(OracleError::ConfigMismatch(format!(
            "{:?} vs {:?}",
            reference.meta, candidate.meta
        )));
    }
    let prf = Prf::new(reference.meta.seed);
    let emb_dim = reference.meta.emb_dim;
    let steps_compared = reference.steps.len().min(candidate.steps.len()) as u64;

    let mut report = ConsistencyReport {
        steps_compared,
        max_abs_dense_diff: 0.0,
        max_abs_embedding_diff: 0.0,
        first_divergent_step: None,
        estimated_staleness_lag: None,
        bitwise_equal: true,
        per_step: Vec::with_capacity(steps_compared as usize),
    };

    for idx in 0..steps_compared as usize {
        let a = &reference.steps[idx];
        let b = &candidate.steps[idx];
        let mut dense_diff = 0.0f64;
        let mut dense_bitwise = true;
        for (x, y) in a.dense_after.iter().zip(&b.dense_after) {
            if x.to_bits() != y.to_bits() {
                dense_bitwise = false;
            }
            dense_diff = dense_diff.max((*x as f64 - *y as f64).abs());
        }
        let (post_diff, post_bitwise) = max_row_diff(&a.rows_after, &b.rows_after, &prf, emb_dim);
        let (input_diff, input_bitwise) = max_row_diff(&a.input_rows, &b.input_rows, &prf, emb_dim);

        let emb_diff = post_diff.max(input_diff);
        report.max_abs_dense_diff = report.max_abs_dense_diff.max(dense_diff);
        report.max_abs_embedding_diff = report.max_abs_embedding_diff.max(emb_diff);
        if !(dense_bitwise && post_bitwise && input_bitwise) {
            report.bitwise_equal = false;
        }
        report.per_step.push((a.step, dense_diff, emb_diff));

        let diverged = dense_diff.max(emb_diff) > tolerance;
        if diverged && report.first_divergent_step.is_none() {
            report.first_divergent_step = Some(a.step);
            report.estimated_staleness_lag =
                estimate_staleness(reference, candidate, idx, tolerance, &prf, emb_dim);
        }
    }
    Ok(report)
}

/// At the first divergent step, check whether every divergent input row of the
/// candidate equals the reference's table from `tau` steps earlier, bitwise.
fn estimate_staleness(
    reference: &Trajectory,
    candidate: &Trajectory,
    step_idx: usize,
    tolerance: f64,
    prf: &Prf,
    emb_dim: usize,
) -> Option<u64> {
    let a = &reference.steps[step_idx];
    let b = &candidate.steps[step_idx];
    let step = a.step;
    let divergent: Vec<SparseKey> = b
        .input_rows
        .iter()
        .filter(|(key, row)| match a.input_rows.get(key) {
            Some(ref_row) => row
                .iter()
                .zip(ref_row.iter())
                .any(|(x, y)| (*x as f64 - *y as f64).abs() > tolerance),
            None => true,
        })
        .map(|(key, _)| *key)
        .collect();
    if divergent.is_empty() {
        return None;
    }
    for tau in 1..=3u64 {
        if tau >= step {
            // Lag tau means the value entering `step` matches the reference
            // table entering `step - tau`; step 1 reads pristine init values.
            let all_match = divergent.iter().all(|key| {
                let init = embedding::init_row(prf, *key, emb_dim);
                rows_bitwise_eq(&b.input_rows[key], &init)
            });
            if all_match {
                return Some(tau);
            }
            continue;
        }
        let lagged = reference.table_before_step(step - tau);
        let all_match = divergent.iter().all(|key| {
            let lagged_row = lagged.and_then(|t| t.get(key));
            match lagged_row {
                Some(row) => rows_bitwise_eq(&b.input_rows[key], row),
                None => {
                    let init = embedding::init_row(prf, *key, emb_dim);
                    rows_bitwise_eq(&b.input_rows[key], &init)
                }
            }
        });
        if all_match {
            return Some(tau);
        }
    }
    None
}
