//! Per-worker training context: the host shard it owns, its dual HBM buffers,
//! and its replica of the dense parameters. Contexts are only ever touched by
//! the scheduler driving them; cross-worker traffic goes through the fabric.

use crate::dense::DenseParams;
use crate::embedding::{BufferPair, HostShard};
use crate::prf::Prf;
use crate::types::{TrainConfig, WorkerId};

#[derive(Debug, Clone)]
pub struct WorkerTrainState {
    pub worker_id: WorkerId,
    pub shard: HostShard,
    pub buffers: BufferPair,
    pub params: DenseParams<f32>,
}

/// All workers start from identical dense replicas and empty shards; rows
/// materialize lazily through the shared PRF.
pub fn init_workers(cfg: &TrainConfig) -> Vec<WorkerTrainState> {
    let prf = Prf::new(cfg.seed);
    (0..cfg.num_workers)
        .map(|worker_id| WorkerTrainState {
            worker_id,
            shard: HostShard::new(worker_id),
            buffers: BufferPair::new(),
            params: DenseParams::init(&prf, cfg.emb_dim, cfg.hidden_dim, cfg.dense_layers),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workers_start_replicated() {
        let cfg = TrainConfig {
            num_workers: 3,
            vocab_size: 10,
            emb_dim: 4,
            dense_layers: 2,
            hidden_dim: 4,
            batch_size: 6,
            num_micro_batches: 1,
            learning_rate: 0.1,
            steps: 1,
            seed: 77,
            clustering_enabled: false,
            exact_order_mode: true,
            unsafe_six_stage: false,
            pipeline_depth: 1,
        };
        let workers = init_workers(&cfg);
        let reference = workers[0].params.flatten();
        for w in &workers {
            assert_eq!(w.params.flatten(), reference);
            assert_eq!(w.shard.owner, w.worker_id);
            assert!(w.shard.rows.is_empty());
        }
    }
}
