//! Deterministic desk-scale engine for decentralized sparse-embedding training.
//!
//! Training runs as nested pipelines: an inter-batch five-stage pipeline with
//! dual-buffer synchronization (`dbp`) and an intra-batch frozen window that
//! overlaps embedding exchange with dense compute (`fwp`). A single-context
//! synchronous trainer (`oracle`) certifies exact training consistency, and a
//! discrete-event cost model (`timing`) reproduces the performance behavior:
//! exposed-communication ratio, pipeline bottlenecks, and scaling trends.

pub mod dbp;
pub mod dense;
pub mod embedding;
pub mod fabric;
pub mod fwp;
pub mod math;
pub mod oracle;
pub mod prf;
pub mod timing;
pub mod trace;
pub mod types;
pub mod worker;
pub mod workload;

pub use prf::Prf;
pub use types::{Batch, MicroBatch, Sample, SparseKey, TrainConfig, WorkerId};
