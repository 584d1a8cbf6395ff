//! Differentially private training: per-sample clipping with Gaussian noise
//! (DP-SGD) and a Rényi-DP accountant for the subsampled Gaussian mechanism.

use std::io::Write;

use rayon::prelude::*;

use crate::consensus::majority_vote;
use crate::error::{Error, Result};
use crate::federation::aggregate;
use crate::metrics::dsc;
use crate::numcore::{check_finite, OptimizerSpec, OptimizerState, ParamVector, Rng};
use crate::scenario::Sample;
use crate::segmodel::{SegModel, DEFAULT_THRESHOLD};
use crate::training::BatchSampler;

/// Rényi orders tracked by default.
pub const DEFAULT_ORDERS: [f64; 11] = [1.25, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0, 32.0, 64.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    pub clip: f64,
    pub sigma: f64,
    pub delta: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { clip: 1.0, sigma: 4.0, delta: 1e-5 }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::config(format!("clip norm must be positive, got {}", self.clip)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("noise multiplier must be positive, got {}", self.sigma)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// Clips each per-sample gradient to norm `clip`, sums, adds `N(0, (sigma
/// clip)^2)` per coordinate and divides by the batch size. `sigma = 0` is
/// accepted here (noiseless limit) even though accounting rejects it.
pub fn clip_and_noise(grads: &[ParamVector], clip: f64, sigma: f64, rng: &mut Rng) -> Result<ParamVector> {
    let first = grads.first().ok_or_else(|| Error::config("clip_and_noise needs at least one gradient"))?;
    if !(clip > 0.0) || !(sigma >= 0.0) {
        return Err(Error::config("clip must be positive and sigma non-negative"));
    }
    let mut sum = vec![0.0; first.len()];
    for g in grads {
        if g.len() != sum.len() {
            return Err(Error::structural("per-sample gradients differ in length"));
        }
        check_finite(g)?;
        let scale = 1.0 / (g.norm() / clip).max(1.0);
        for (s, v) in sum.iter_mut().zip(g.iter()) {
            *s += scale * v;
        }
    }
    let n = grads.len() as f64;
    for s in &mut sum {
        *s = (*s + sigma * clip * rng.normal()) / n;
    }
    ParamVector::new(sum)
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// RDP of one step of the Gaussian mechanism with Poisson-style sampling
/// rate `q` at order `alpha`. `q = 1` gives the exact `alpha / (2 sigma^2)`.
/// For `q < 1` the exact integer-order expansion is used. Fractional orders
/// take the chord of `(alpha - 1) * rdp` between the neighbouring integers,
/// an upper bound because that quantity is convex in `alpha`. The result is
/// capped by the unsampled value.
pub fn rdp_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::config(format!("Renyi order must exceed 1, got {alpha}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::config("noise multiplier must be positive"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    let full = alpha / (2.0 * sigma * sigma);
    if q == 1.0 {
        return Ok(full);
    }
    let hi = alpha.ceil();
    let lo = alpha.floor();
    let scaled = if hi == lo {
        log_moment(q, sigma, hi as u64)
    } else {
        let t = alpha - lo;
        let at_lo = if lo <= 1.0 { 0.0 } else { log_moment(q, sigma, lo as u64) };
        (1.0 - t) * at_lo + t * log_moment(q, sigma, hi as u64)
    };
    Ok((scaled / (alpha - 1.0)).min(full).max(0.0))
}

/// `ln E[(p/p0)^a]` for the sampled Gaussian at integer order `a >= 2`.
fn log_moment(q: f64, sigma: f64, a: u64) -> f64 {
    let terms: Vec<f64> = (0..=a)
        .map(|k| {
            let kf = k as f64;
            ln_binomial(a, k) + (a - k) as f64 * (-q).ln_1p() + kf * q.ln() + (kf * kf - kf) / (2.0 * sigma * sigma)
        })
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Accumulated RDP per order.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpLedger {
    orders: Vec<f64>,
    rdp: Vec<f64>,
    steps: u64,
}

impl RdpLedger {
    pub fn new(orders: &[f64]) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::config("RDP ledger needs at least one order"));
        }
        if let Some(a) = orders.iter().find(|a| !(**a > 1.0 && a.is_finite())) {
            return Err(Error::config(format!("Renyi order must exceed 1, got {a}")));
        }
        Ok(Self { orders: orders.to_vec(), rdp: vec![0.0; orders.len()], steps: 0 })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Per-order cost of one step.
    pub fn increment(&self, q: f64, sigma: f64) -> Result<Vec<f64>> {
        self.orders.iter().map(|&a| rdp_gaussian(q, sigma, a)).collect()
    }

    /// Composes `count` steps with the given per-order increment.
    pub fn add(&mut self, increment: &[f64], count: u64) {
        for (r, inc) in self.rdp.iter_mut().zip(increment) {
            *r += count as f64 * inc;
        }
        self.steps += count;
    }

    pub fn step(&mut self, q: f64, sigma: f64) -> Result<()> {
        let inc = self.increment(q, sigma)?;
        self.add(&inc, 1);
        Ok(())
    }

    /// `min over alpha of rdp(alpha) + ln(1/delta) / (alpha - 1)`.
    pub fn to_epsilon(&self, delta: f64) -> f64 {
        epsilon_of(&self.orders, &self.rdp, delta)
    }
}

fn epsilon_of(orders: &[f64], rdp: &[f64], delta: f64) -> f64 {
    orders
        .iter()
        .zip(rdp)
        .map(|(a, r)| r + (1.0 / delta).ln() / (a - 1.0))
        .fold(f64::INFINITY, f64::min)
}

/// Largest step count `k <= cap` whose composed cost stays within `epsilon`.
pub fn steps_within_budget(orders: &[f64], increment: &[f64], delta: f64, epsilon: f64, cap: u64) -> u64 {
    let eps_at = |k: u64| {
        let rdp: Vec<f64> = increment.iter().map(|i| k as f64 * i).collect();
        epsilon_of(orders, &rdp, delta)
    };
    if eps_at(0) > epsilon {
        return 0;
    }
    // epsilon is non-decreasing in k, so bisect
    let (mut lo, mut hi) = (0u64, cap);
    if eps_at(hi) <= epsilon {
        return hi;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eps_at(mid) <= epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Settings for one private training trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpTrainSpec {
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
    pub dp: DpConfig,
}

impl DpTrainSpec {
    /// Sampling rate for a client holding `n` samples.
    pub fn sampling_rate(&self, n: usize) -> f64 {
        (self.batch_size as f64 / n as f64).min(1.0)
    }
}

/// Runs `steps` DP-SGD steps on `data`, charging `ledger` once per step.
/// Per-sample gradients are computed without dropout.
pub fn dp_train_steps(
    model: &SegModel,
    data: &[Sample],
    spec: &DpTrainSpec,
    steps: u64,
    rng: &Rng,
    ledger: &mut RdpLedger,
) -> Result<SegModel> {
    spec.dp.validate()?;
    if data.is_empty() {
        return Err(Error::Protocol("private training requires a non-empty dataset".into()));
    }
    if spec.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let inc = ledger.increment(spec.sampling_rate(data.len()), spec.dp.sigma)?;
    let mut sampler = BatchSampler::new(data.len(), spec.batch_size.min(data.len()), rng.fork(1));
    let mut noise = rng.fork(3);
    let mut state = OptimizerState::new(spec.optimizer, model.params().len())?;
    let mut current = model.clone();
    let mut params = model.params().clone();
    for _ in 0..steps {
        let idx = sampler.next_batch();
        let batch: Vec<_> = idx.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
        let grads = current.per_sample_grads(&batch)?;
        let g = clip_and_noise(&grads, spec.dp.clip, spec.dp.sigma, &mut noise)?;
        state.step(&mut params, &g)?;
        current = current.with_params(params.clone())?;
        ledger.add(&inc, 1);
    }
    Ok(current)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SweepMethod {
    MvCbm,
    FedAvgFl,
}

impl SweepMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SweepMethod::MvCbm => "MV-CBM",
            SweepMethod::FedAvgFl => "FedAvg-FL",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub method: SweepMethod,
    pub seed: u64,
    /// Target budget of this grid point.
    pub epsilon: f64,
    /// Budget actually spent (worst client).
    pub spent: f64,
    /// Largest number of private steps taken by any client.
    pub steps: u64,
    pub mean_dsc: f64,
    /// Set when the budget did not allow a single step.
    pub zero_step: bool,
}

/// Inputs shared by every point of a privacy sweep.
#[derive(Debug, Clone)]
pub struct SweepSetup<'a> {
    pub seed: u64,
    pub clients: Vec<&'a [Sample]>,
    /// Held-out evaluation cases.
    pub test: &'a [Sample],
    pub initial: &'a SegModel,
    pub train: DpTrainSpec,
    /// Non-private local schedule, capping consensus training.
    pub local_steps_cap: u64,
    /// Non-private federated schedule: rounds and steps per round.
    pub rounds_cap: u64,
    pub steps_per_round: u64,
    pub rng: Rng,
}

fn mean_dsc(masks: &[crate::volume::MaskVolume], test: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for (m, (_, truth)) in masks.iter().zip(test) {
        total += dsc(m, truth)?;
    }
    Ok(total / test.len().max(1) as f64)
}

/// One consensus point: every client spends its own budget independently
/// (parallel composition); the reported cost is the worst client's.
pub fn sweep_consensus(setup: &SweepSetup<'_>, epsilon: f64) -> Result<SweepPoint> {
    let dp = setup.train.dp;
    let trained = setup
        .clients
        .par_iter()
        .enumerate()
        .map(|(i, data)| {
            let mut ledger = RdpLedger::new(&DEFAULT_ORDERS)?;
            let inc = ledger.increment(setup.train.sampling_rate(data.len()), dp.sigma)?;
            let k = steps_within_budget(&DEFAULT_ORDERS, &inc, dp.delta, epsilon, setup.local_steps_cap);
            let model = dp_train_steps(setup.initial, data, &setup.train, k, &setup.rng.fork(i as u64), &mut ledger)?;
            Ok((model, k, ledger.to_epsilon(dp.delta)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fused = Vec::with_capacity(setup.test.len());
    for (image, _) in setup.test {
        let masks = trained.iter().map(|(m, _, _)| m.predict_mask(image, DEFAULT_THRESHOLD)).collect::<Result<Vec<_>>>()?;
        fused.push(majority_vote(&masks)?);
    }
    let steps = trained.iter().map(|t| t.1).max().unwrap_or(0);
    Ok(SweepPoint {
        method: SweepMethod::MvCbm,
        seed: setup.seed,
        epsilon,
        spent: trained.iter().map(|t| if t.1 == 0 { 0.0 } else { t.2 }).fold(0.0, f64::max),
        steps,
        mean_dsc: mean_dsc(&fused, setup.test)?,
        zero_step: steps == 0,
    })
}

/// One federated point: all clients run `steps_per_round` private steps per
/// round and the federation stops before any client's composed cost over
/// the whole trajectory would exceed the budget.
pub fn sweep_federated(setup: &SweepSetup<'_>, epsilon: f64) -> Result<SweepPoint> {
    let dp = setup.train.dp;
    let s = setup.steps_per_round;
    let mut rounds = setup.rounds_cap;
    let mut incs = Vec::with_capacity(setup.clients.len());
    for data in &setup.clients {
        let inc = RdpLedger::new(&DEFAULT_ORDERS)?.increment(setup.train.sampling_rate(data.len()), dp.sigma)?;
        let k = steps_within_budget(&DEFAULT_ORDERS, &inc, dp.delta, epsilon, setup.rounds_cap * s);
        rounds = rounds.min(k / s.max(1));
        incs.push(inc);
    }
    let sizes: Vec<usize> = setup.clients.iter().map(|d| d.len()).collect();
    let weights = crate::federation::size_weights(&sizes)?;
    let mut global = setup.initial.params().clone();
    let mut ledgers = vec![RdpLedger::new(&DEFAULT_ORDERS)?; setup.clients.len()];
    for round in 0..rounds {
        let start = setup.initial.with_params(global.clone())?;
        let updates = setup
            .clients
            .par_iter()
            .zip(ledgers.par_iter_mut())
            .enumerate()
            .map(|(i, (data, ledger))| {
                let rng = setup.rng.fork(i as u64).fork(round);
                dp_train_steps(&start, data, &setup.train, s, &rng, ledger).map(|m| m.params().clone())
            })
            .collect::<Result<Vec<_>>>()?;
        global = aggregate(&updates, &weights)?;
    }
    let model = setup.initial.with_params(global)?;
    let masks = setup.test.iter().map(|(img, _)| model.predict_mask(img, DEFAULT_THRESHOLD)).collect::<Result<Vec<_>>>()?;
    Ok(SweepPoint {
        method: SweepMethod::FedAvgFl,
        seed: setup.seed,
        epsilon,
        spent: if rounds == 0 { 0.0 } else { ledgers.iter().map(|l| l.to_epsilon(dp.delta)).fold(0.0, f64::max) },
        steps: rounds * s,
        mean_dsc: mean_dsc(&masks, setup.test)?,
        zero_step: rounds == 0,
    })
}

/// Both methods over an increasing budget grid.
pub fn budget_sweep(setup: &SweepSetup<'_>, grid: &[f64]) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) || grid[0] <= 0.0 {
        return Err(Error::config("budget grid must be positive and strictly increasing"));
    }
    let mut out = Vec::with_capacity(2 * grid.len());
    for &eps in grid {
        out.push(sweep_consensus(setup, eps)?);
    }
    for &eps in grid {
        out.push(sweep_federated(setup, eps)?);
    }
    Ok(out)
}

/// Columns: `method,seed,epsilon,steps,mean_dsc,spent,zero_step`.
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "seed", "epsilon", "steps", "mean_dsc", "spent", "zero_step"])?;
    for p in points {
        w.write_record([
            p.method.name().to_string(),
            p.seed.to_string(),
            format!("{}", p.epsilon),
            p.steps.to_string(),
            format!("{:.6}", p.mean_dsc),
            format!("{:.6}", p.spent),
            p.zero_step.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `dsc` against `epsilon`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}
