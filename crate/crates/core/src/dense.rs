//! The replicated dense model: key-sum pooling, an L-layer ReLU MLP with a
//! linear output head and sigmoid/BCE loss, analytic forward/backward, and the
//! SGD step.
//!
//! Math is generic over the float width so gradient checks can run on f64
//! clones of the f32 training parameters.

use std::collections::BTreeMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::embedding::{EmbeddingRow, KeyGrad};
use crate::math::sgd_update_f32;
use crate::prf::Prf;
use crate::types::{Sample, SparseKey};

pub trait Scalar:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + std::fmt::Debug
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln_1p(self) -> Self {
                self.ln_1p()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// One hidden layer: `weight[out][in]` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<S> {
    pub weight: Vec<Vec<S>>,
    pub bias: Vec<S>,
}

/// Replicated dense parameters: L hidden layers plus a scalar output head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<S> {
    pub layers: Vec<DenseLayer<S>>,
    pub head_weight: Vec<S>,
    pub head_bias: S,
}

impl<S: Scalar> DenseParams<S> {
    /// Deterministic initialization: uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// weights keyed by `(layer, i, j)`, zero biases. Layer index 0 is reserved
    /// for the head in the PRF keying.
    pub fn init(prf: &Prf, emb_dim: usize, hidden_dim: usize, num_layers: usize) -> Self {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 1..=num_layers {
            let fan_in = if l == 1 { emb_dim } else { hidden_dim };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = (0..hidden_dim)
                .map(|i| {
                    (0..fan_in)
                        .map(|j| {
                            S::from_f64(prf.uniform(
                                "dense",
                                &[l as u64, i as u64, j as u64],
                                -bound,
                                bound,
                            ))
                        })
                        .collect()
                })
                .collect();
            layers.push(DenseLayer {
                weight,
                bias: vec![S::ZERO; hidden_dim],
            });
        }
        let head_in = if num_layers == 0 { emb_dim } else { hidden_dim };
        let bound = 1.0 / (head_in as f64).sqrt();
        let head_weight = (0..head_in)
            .map(|j| S::from_f64(prf.uniform("dense", &[0, 0, j as u64], -bound, bound)))
            .collect();
        Self {
            layers,
            head_weight,
            head_bias: S::ZERO,
        }
    }

    /// Zero gradients shaped like these parameters.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: l
                        .weight
                        .iter()
                        .map(|row| vec![S::ZERO; row.len()])
                        .collect(),
                    bias: vec![S::ZERO; l.bias.len()],
                })
                .collect(),
            head_weight: vec![S::ZERO; self.head_weight.len()],
            head_bias: S::ZERO,
        }
    }

    /// Element-wise accumulate; fold order over calls is the caller's
    /// canonical summation order.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (ra, rb) in a.weight.iter_mut().zip(&b.weight) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x = *x + *y;
                }
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x = *x + *y;
            }
        }
        for (x, y) in self.head_weight.iter_mut().zip(&other.head_weight) {
            *x = *x + *y;
        }
        self.head_bias = self.head_bias + other.head_bias;
    }

    /// Canonical flattening: layers in order (weights row-major, then bias),
    /// then head weight, then head bias.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for l in &self.layers {
            for row in &l.weight {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.head_weight);
        out.push(self.head_bias);
        out
    }

    pub fn unflatten_from(&self, values: &[S]) -> Self {
        let mut out = self.clone();
        let mut it = values.iter().copied();
        for l in out.layers.iter_mut() {
            for row in l.weight.iter_mut() {
                for v in row.iter_mut() {
                    *v = it.next().expect("flat length");
                }
            }
            for v in l.bias.iter_mut() {
                *v = it.next().expect("flat length");
            }
        }
        for v in out.head_weight.iter_mut() {
            *v = it.next().expect("flat length");
        }
        out.head_bias = it.next().expect("flat length");
        assert!(it.next().is_none(), "flat vector longer than params");
        out
    }

    pub fn to_f64(&self) -> DenseParams<f64> {
        DenseParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: l
                        .weight
                        .iter()
                        .map(|r| r.iter().map(|v| v.to_f64()).collect())
                        .collect(),
                    bias: l.bias.iter().map(|v| v.to_f64()).collect(),
                })
                .collect(),
            head_weight: self.head_weight.iter().map(|v| v.to_f64()).collect(),
            head_bias: self.head_bias.to_f64(),
        }
    }
}

/// Per-sample forward state kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SampleCache<S> {
    pub pooled: Vec<S>,
    /// Pre-activations per hidden layer.
    pub pre_acts: Vec<Vec<S>>,
    /// Post-ReLU activations per hidden layer.
    pub acts: Vec<Vec<S>>,
    pub logit: S,
    pub prob: S,
    pub label: S,
}

/// Forward cache for a list of samples, in the order they were passed.
pub type ForwardCache<S> = Vec<SampleCache<S>>;

/// Element-wise sum of the sample's key rows, keys in canonical ascending order.
pub fn pool(sample: &Sample, rows: &BTreeMap<SparseKey, EmbeddingRow>) -> Vec<f32> {
    let dim = rows.values().next().map_or(0, |r| r.len());
    let mut out = vec![0.0f32; dim];
    for key in &sample.keys {
        let row = rows
            .get(key)
            .unwrap_or_else(|| panic!("missing row for key {}", key.0));
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    out
}

fn relu<S: Scalar>(x: S) -> S {
    if x > S::ZERO {
        x
    } else {
        S::ZERO
    }
}

/// Gate derivative with ReLU'(0) := 0 pinned.
fn relu_gate<S: Scalar>(x: S) -> S {
    if x > S::ZERO {
        S::ONE
    } else {
        S::ZERO
    }
}

fn sigmoid<S: Scalar>(z: S) -> S {
    S::ONE / (S::ONE + (-z).exp())
}

/// Numerically stable BCE of `sigmoid(logit)` against a 0/1 label.
fn bce_loss<S: Scalar>(logit: S, label: S) -> S {
    // max(z,0) - z*y + ln(1 + exp(-|z|))
    let max_part = if logit > S::ZERO { logit } else { S::ZERO };
    max_part - logit * label + (-logit.abs()).exp().ln_1p()
}

/// Forward pass over pooled inputs; returns per-sample losses and the cache.
pub fn forward<S: Scalar>(
    params: &DenseParams<S>,
    pooled_inputs: &[Vec<S>],
    labels: &[u8],
) -> (Vec<S>, ForwardCache<S>) {
    assert_eq!(
        pooled_inputs.len(),
        labels.len(),
        "inputs/labels length mismatch"
    );
    let mut losses = Vec::with_capacity(pooled_inputs.len());
    let mut cache = Vec::with_capacity(pooled_inputs.len());
    for (x, &label) in pooled_inputs.iter().zip(labels) {
        let mut pre_acts = Vec::with_capacity(params.layers.len());
        let mut acts = Vec::with_capacity(params.layers.len());
        let mut current = x.clone();
        for layer in &params.layers {
            let pre: Vec<S> = layer
                .weight
                .iter()
                .zip(&layer.bias)
                .map(|(row, &b)| {
                    assert_eq!(row.len(), current.len(), "layer shape mismatch");
                    row.iter()
                        .zip(&current)
                        .fold(S::ZERO, |acc, (&w, &v)| acc + w * v)
                        + b
                })
                .collect();
            let act: Vec<S> = pre.iter().map(|&z| relu(z)).collect();
            pre_acts.push(pre);
            current = act.clone();
            acts.push(act);
        }
        assert_eq!(
            params.head_weight.len(),
            current.len(),
            "head shape mismatch"
        );
        let logit = params
            .head_weight
            .iter()
            .zip(&current)
            .fold(S::ZERO, |acc, (&w, &v)| acc + w * v)
            + params.head_bias;
        let y = S::from_f64(label as f64);
        let prob = sigmoid(logit);
        losses.push(bce_loss(logit, y));
        cache.push(SampleCache {
            pooled: x.clone(),
            pre_acts,
            acts,
            logit,
            prob,
            label: y,
        });
    }
    (losses, cache)
}

/// Analytic gradients of one sample's (mean-free) loss: parameter gradients
/// plus the gradient w.r.t. the pooled input.
pub fn backward_sample<S: Scalar>(
    params: &DenseParams<S>,
    cache: &SampleCache<S>,
) -> (DenseParams<S>, Vec<S>) {
    let mut grad = params.zeros_like();
    let dlogit = cache.prob - cache.label;
    let last_act: &[S] = cache.acts.last().map_or(&cache.pooled, |a| a);
    for (g, &a) in grad.head_weight.iter_mut().zip(last_act) {
        *g = dlogit * a;
    }
    grad.head_bias = dlogit;

    // d(loss)/d(activation) flowing backwards.
    let mut d_act: Vec<S> = params.head_weight.iter().map(|&w| dlogit * w).collect();
    for l in (0..params.layers.len()).rev() {
        let pre = &cache.pre_acts[l];
        let d_pre: Vec<S> = d_act
            .iter()
            .zip(pre)
            .map(|(&d, &z)| d * relu_gate(z))
            .collect();
        let input: &[S] = if l == 0 {
            &cache.pooled
        } else {
            &cache.acts[l - 1]
        };
        for (i, &dz) in d_pre.iter().enumerate() {
            for (j, &x) in input.iter().enumerate() {
                grad.layers[l].weight[i][j] = dz * x;
            }
            grad.layers[l].bias[i] = dz;
        }
        let weight = &params.layers[l].weight;
        d_act = (0..input.len())
            .map(|j| {
                d_pre
                    .iter()
                    .enumerate()
                    .fold(S::ZERO, |acc, (i, &dz)| acc + dz * weight[i][j])
            })
            .collect();
    }
    (grad, d_act)
}

/// Summed (unaveraged) gradients over a cache, folded in cache order, plus
/// per-sample pooled-input gradients.
pub fn backward<S: Scalar>(
    params: &DenseParams<S>,
    cache: &ForwardCache<S>,
) -> (DenseParams<S>, Vec<Vec<S>>) {
    let mut total = params.zeros_like();
    let mut pooled_grads = Vec::with_capacity(cache.len());
    for sample_cache in cache {
        let (g, dx) = backward_sample(params, sample_cache);
        total.add_assign(&g);
        pooled_grads.push(dx);
    }
    (total, pooled_grads)
}

/// One `KeyGrad` per (sample, key) pair: sum-pooling routes the sample's
/// pooled-input gradient to every key unchanged.
pub fn scatter_embedding_grads(samples: &[Sample], pooled_grads: &[Vec<f32>]) -> Vec<KeyGrad> {
    assert_eq!(
        samples.len(),
        pooled_grads.len(),
        "grads misaligned with samples"
    );
    let mut out = Vec::new();
    for (sample, grad) in samples.iter().zip(pooled_grads) {
        for &key in &sample.keys {
            out.push(KeyGrad {
                key,
                grad: grad.clone(),
                contributor: Some(sample.sample_id),
            });
        }
    }
    out
}

/// `theta -= lr * (grad_sum / batch)` via the shared f32 update formula.
pub fn sgd_step(
    params: &mut DenseParams<f32>,
    grad_sum: &DenseParams<f32>,
    batch_size: usize,
    lr: f32,
) {
    let mut flat = params.flatten();
    let grad_flat = grad_sum.flatten();
    sgd_update_f32(&mut flat, &grad_flat, batch_size as f32, lr);
    *params = params.unflatten_from(&flat);
}
