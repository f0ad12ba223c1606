//! Simulated collective communication among W logical workers.
//!
//! Collectives are synchronous rendezvous points: every worker supplies its
//! payload before any result is released, and delivery order is pinned
//! (receivers iterate sources in ascending worker id). Latency is modeled
//! exclusively in the timing module; this module is pure data movement.

use thiserror::Error;

use crate::types::WorkerId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FabricError {
    #[error("worker {worker} supplied {got} destination lists, expected {expected}")]
    PayloadArity {
        worker: WorkerId,
        got: usize,
        expected: usize,
    },
    #[error("all_reduce vector length mismatch: worker {worker} has {got}, expected {expected}")]
    LengthMismatch {
        worker: WorkerId,
        got: usize,
        expected: usize,
    },
}

/// Per-sender payload: one ordered item list per destination worker
/// (self included, possibly empty).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct A2aPayload<T> {
    pub to: Vec<Vec<T>>,
}

impl<T> A2aPayload<T> {
    pub fn empty(num_workers: usize) -> Self {
        Self {
            to: (0..num_workers).map(|_| Vec::new()).collect(),
        }
    }
}

/// Per-receiver result: W source-ordered lists, indexed by source worker id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct A2aResult<T> {
    pub from: Vec<Vec<T>>,
}

/// Full exchange: receiver r's list s is exactly what sender s addressed to r,
/// in sender order. Pure permutation of items; nothing lost or duplicated.
pub fn all_to_all<T>(payloads: Vec<A2aPayload<T>>) -> Result<Vec<A2aResult<T>>, FabricError> {
    let num_workers = payloads.len();
    for (worker, p) in payloads.iter().enumerate() {
        if p.to.len() != num_workers {
            return Err(FabricError::PayloadArity {
                worker,
                got: p.to.len(),
                expected: num_workers,
            });
        }
    }
    let mut results: Vec<A2aResult<T>> = (0..num_workers)
        .map(|_| A2aResult {
            from: Vec::with_capacity(num_workers),
        })
        .collect();
    // Move sender-by-sender so each receiver's lists end up source-ordered.
    let mut staged: Vec<Vec<Option<Vec<T>>>> = payloads
        .into_iter()
        .map(|p| p.to.into_iter().map(Some).collect())
        .collect();
    for (receiver, result) in results.iter_mut().enumerate() {
        for sender_lists in staged.iter_mut() {
            result.from.push(
                sender_lists[receiver]
                    .take()
                    .expect("each (s,r) list moved once"),
            );
        }
    }
    Ok(results)
}

/// Element-wise sum of per-worker vectors, summed in ascending worker-id order
/// (the canonical reduction order), replicated bit-identically to every worker.
pub fn all_reduce_sum(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, FabricError> {
    let expected = vectors.first().map_or(0, |v| v.len());
    for (worker, v) in vectors.iter().enumerate() {
        if v.len() != expected {
            return Err(FabricError::LengthMismatch {
                worker,
                got: v.len(),
                expected,
            });
        }
    }
    let mut sum = vec![0.0f64; expected];
    for v in vectors {
        for (acc, x) in sum.iter_mut().zip(v) {
            *acc += x;
        }
    }
    Ok(vec![sum; vectors.len()])
}
