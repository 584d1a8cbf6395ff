//! Numerical substrate: parameter vectors, replayable random streams,
//! optimizers and a finite-difference gradient oracle.
//!
//! Every reduction here accumulates in a fixed order (outer list index, then
//! element index) so results never depend on how callers schedule work.

use std::ops::Deref;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Flat vector of model parameters; the unit exchanged between clients and
/// the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps `values`, rejecting empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::structural("parameter vector must be non-empty"));
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "parameter vector must be non-empty");
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        same_len(self, other)?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
    }

    /// Size in bytes of the little-endian f64 serialization.
    pub fn serialized_len(&self) -> u64 {
        (self.0.len() * std::mem::size_of::<f64>()) as u64
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// CRC32 over the serialized parameters; used as a model fingerprint in logs.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.to_le_bytes())
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::numeric(Some(i), format!("non-finite value {}", values[i]))),
        None => Ok(()),
    }
}

fn same_len(x: &ParamVector, y: &ParamVector) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::structural(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    Ok(())
}

/// Returns `alpha * x + y`.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    same_len(x, y)?;
    let out: Vec<f64> = x.0.iter().zip(&y.0).map(|(xi, yi)| alpha * xi + yi).collect();
    check_finite(&out)?;
    Ok(ParamVector(out))
}

/// Tolerance on the sum of aggregation weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Returns `sum_i weights[i] * vectors[i]`, accumulated in list order.
pub fn weighted_mean(vectors: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if vectors.is_empty() {
        return Err(Error::structural("weighted_mean of an empty list"));
    }
    if vectors.len() != weights.len() {
        return Err(Error::structural(format!(
            "{} vectors but {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    validate_weights(weights)?;
    let len = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != len) {
        return Err(Error::structural(format!("length mismatch: {} vs {}", v.len(), len)));
    }
    let mut acc = vec![0.0; len];
    for (v, &w) in vectors.iter().zip(weights) {
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += w * x;
        }
    }
    check_finite(&acc)?;
    Ok(ParamVector(acc))
}

pub(crate) fn validate_weights(weights: &[f64]) -> Result<()> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::config(format!("weight {w} is not a non-negative number")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::config(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Deterministic random stream keyed by `(seed, stream)`.
///
/// Backed by ChaCha8, which is counter based: each stream id selects an
/// independent keystream, so per-client and per-pass randomness can be
/// replayed without coordination.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child stream identified by `tag`, independent of how much of this
    /// stream has been consumed.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng::new(self.seed, splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x51_7c_c1_b7))))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is at most n / 2^64.
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    PlainSgd,
    /// Adam with weight decay applied directly to the parameters.
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub const DEFAULT_ADAMW: OptimizerKind =
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
}

/// Optimizer hyperparameters; `OptimizerState::new` instantiates them for a
/// given parameter count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerSpec {
    pub fn adamw(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::DEFAULT_ADAMW, learning_rate }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::PlainSgd, learning_rate }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    spec: OptimizerSpec,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec, num_params: usize) -> Result<Self> {
        if !(spec.learning_rate > 0.0 && spec.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be > 0", spec.learning_rate)));
        }
        let (m, v) = match spec.kind {
            OptimizerKind::PlainSgd => (Vec::new(), Vec::new()),
            OptimizerKind::AdamW { .. } => (vec![0.0; num_params], vec![0.0; num_params]),
        };
        Ok(Self { spec, step: 0, first_moment: m, second_moment: v })
    }

    pub fn spec(&self) -> OptimizerSpec {
        self.spec
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        same_len(params, grad)?;
        check_finite(grad).map_err(|e| match e {
            Error::Numeric { index, .. } => Error::numeric(index, "non-finite gradient entry"),
            other => other,
        })?;
        let lr = self.spec.learning_rate;
        match self.spec.kind {
            OptimizerKind::PlainSgd => {
                for (p, g) in params.0.iter_mut().zip(&grad.0) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::structural(format!(
                        "optimizer tracks {} parameters, got {}",
                        self.first_moment.len(),
                        params.len()
                    )));
                }
                let t = (self.step + 1) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad.0[i];
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    let p = &mut params.0[i];
                    *p *= 1.0 - lr * weight_decay;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        self.step += 1;
        check_finite(params)
    }
}

/// Functional form of [`OptimizerState::step`].
pub fn optimizer_step(
    state: &OptimizerState,
    params: &ParamVector,
    grad: &ParamVector,
) -> Result<(OptimizerState, ParamVector)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.step(&mut params, grad)?;
    Ok((state, params))
}

/// Central-difference gradient of `f` at `params` with step `h`.
pub fn finite_diff_grad<F>(f: F, params: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step {h} must be > 0")));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let plus = f(&probe);
        probe.0[i] = orig - h;
        let minus = f(&probe);
        probe.0[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::numeric(Some(i), "objective is not finite"));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(ParamVector(grad))
}
