//! Cross-silo federated optimization: FedAvg and FedProx over fully
//! participating clients.
//!
//! Each round the server broadcasts the global parameters, every client runs
//! `s` local optimizer steps from them, and the server replaces the global
//! model by the weighted mean of the returned parameters. The server only
//! ever sees [`ParamVector`]s and scalar weights.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numcore::{validate_weights, weighted_mean, OptimizerSpec, ParamVector, Rng};
use crate::scenario::Sample;
use crate::segmodel::SegModel;
use crate::training::{train_steps, Proximal, TrainSpec, TrainStats};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlStrategy {
    FedAvg,
    FedProx { mu: f64 },
}

impl FlStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            FlStrategy::FedAvg => "FedAvg",
            FlStrategy::FedProx { .. } => "FedProx",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlConfig {
    pub strategy: FlStrategy,
    pub local_steps: u64,
    pub batch_size: usize,
    pub rounds: u64,
    /// Aggregation weights `p_i`, one per training client.
    pub weights: Vec<f64>,
    pub optimizer: OptimizerSpec,
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::config("local steps must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if let FlStrategy::FedProx { mu } = self.strategy {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::config(format!("FedProx mu {mu} must be >= 0")));
            }
        }
        validate_weights(&self.weights)?;
        self.train_spec().validate()
    }

    pub fn train_spec(&self) -> TrainSpec {
        TrainSpec { optimizer: self.optimizer, batch_size: self.batch_size }
    }
}

/// `ceil(E * N_T / (M * B * s))`, at least 1.
pub fn compute_rounds(epochs: u64, total_samples: u64, clients: u64, batch: u64, local_steps: u64) -> Result<u64> {
    if epochs == 0 || total_samples == 0 || clients == 0 || batch == 0 || local_steps == 0 {
        return Err(Error::config("compute_rounds needs positive inputs"));
    }
    let num = epochs * total_samples;
    let den = clients * batch * local_steps;
    Ok(num.div_ceil(den).max(1))
}

/// Dataset-size weights `N_i / N_T`, with the last entry absorbing rounding
/// so the weights sum to one.
pub fn size_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(Error::config("size weights need at least one sample"));
    }
    let mut w: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let sum: f64 = w.iter().sum();
    let last = w.len() - 1;
    w[last] += 1.0 - sum;
    Ok(w)
}

/// A training client: its id, private samples and random stream.
#[derive(Debug, Clone)]
pub struct FlClient {
    pub id: String,
    data: Vec<Sample>,
    rng: Rng,
}

impl FlClient {
    pub fn new(id: impl Into<String>, data: Vec<Sample>, rng: Rng) -> Self {
        Self { id: id.into(), data, rng }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Runs the local objective for one round from the broadcast global
    /// parameters. FedProx adds `mu * (theta - theta_global)` to each
    /// stochastic gradient before the optimizer step.
    pub fn local_update(
        &self,
        template: &SegModel,
        global: &ParamVector,
        config: &FlConfig,
        round: u64,
    ) -> Result<(ParamVector, TrainStats)> {
        if self.data.is_empty() {
            return Err(Error::Protocol(format!("client {} has no training data", self.id)));
        }
        let start = template.with_params(global.clone())?;
        let prox = match config.strategy {
            FlStrategy::FedAvg => None,
            FlStrategy::FedProx { mu } => Some(Proximal { anchor: global, mu }),
        };
        let (model, stats) =
            train_steps(&start, &self.data, &config.train_spec(), config.local_steps, &self.rng.fork(round), prox)?;
        Ok((model.params().clone(), stats))
    }
}

/// Aggregation server. Holds only the global parameters and the weights.
#[derive(Debug, Clone)]
pub struct Server {
    global: ParamVector,
    weights: Vec<f64>,
}

impl Server {
    pub fn new(initial: ParamVector, weights: Vec<f64>) -> Result<Self> {
        validate_weights(&weights)?;
        Ok(Self { global: initial, weights })
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn model_bytes(&self) -> u64 {
        self.global.serialized_len()
    }

    /// Replaces the global model with the weighted mean of `updates`.
    pub fn aggregate(&mut self, updates: &[ParamVector]) -> Result<&ParamVector> {
        self.global = aggregate(updates, &self.weights)?;
        Ok(&self.global)
    }
}

pub fn aggregate(models: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    weighted_mean(models, weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundStats {
    pub client: String,
    pub steps: u64,
    pub loss_pre: f64,
    pub loss_post: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: u64,
    pub clients: Vec<ClientRoundStats>,
    pub global_checksum: u32,
}

impl RoundLog {
    pub fn bytes(&self) -> u64 {
        self.clients.iter().map(|c| c.bytes_up + c.bytes_down).sum()
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RoundLog {
        let mut out = self.clone();
        for c in &mut out.clients {
            c.seconds = 0.0;
        }
        out
    }
}

/// Writes round logs as CSV with columns
/// `round,client,loss_pre,loss_post,bytes_up,bytes_down,seconds`.
pub fn write_round_logs<W: Write>(logs: &[RoundLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "client", "loss_pre", "loss_post", "bytes_up", "bytes_down", "seconds"])?;
    for log in logs {
        for c in &log.clients {
            w.write_record([
                log.round.to_string(),
                c.client.clone(),
                format!("{:.9}", c.loss_pre),
                format!("{:.9}", c.loss_post),
                c.bytes_up.to_string(),
                c.bytes_down.to_string(),
                format!("{:.6}", c.seconds),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Runs `config.rounds` rounds of broadcast, local update on every client and
/// aggregation. Clients train in parallel; results are merged in client
/// order, so the outcome does not depend on the thread schedule.
pub fn run_federated(
    clients: &[FlClient],
    initial: &SegModel,
    config: &FlConfig,
) -> Result<(SegModel, Vec<RoundLog>)> {
    config.validate()?;
    if clients.is_empty() {
        return Err(Error::config("federation needs at least one training client"));
    }
    if clients.len() != config.weights.len() {
        return Err(Error::config(format!("{} clients but {} weights", clients.len(), config.weights.len())));
    }
    let mut server = Server::new(initial.params().clone(), config.weights.clone())?;
    let model_bytes = server.model_bytes();
    let mut logs = Vec::with_capacity(config.rounds as usize);
    for round in 0..config.rounds {
        let broadcast = server.global().clone();
        let results: Vec<Result<(ParamVector, TrainStats, f64)>> = clients
            .par_iter()
            .map(|c| {
                let t0 = Instant::now();
                c.local_update(initial, &broadcast, config, round)
                    .map(|(p, s)| (p, s, t0.elapsed().as_secs_f64()))
                    .map_err(|e| Error::Protocol(format!("client {}: {e}", c.id)))
            })
            .collect();
        let mut updates = Vec::with_capacity(clients.len());
        let mut stats = Vec::with_capacity(clients.len());
        for (c, r) in clients.iter().zip(results) {
            let (params, s, seconds) = r?;
            updates.push(params);
            stats.push(ClientRoundStats {
                client: c.id.clone(),
                steps: s.steps,
                loss_pre: s.loss_pre,
                loss_post: s.loss_post,
                bytes_up: model_bytes,
                bytes_down: model_bytes,
                seconds,
            });
        }
        let global = server.aggregate(&updates)?;
        logs.push(RoundLog { round, clients: stats, global_checksum: global.checksum() });
    }
    let model = initial.with_params(server.global().clone())?;
    Ok((model, logs))
}
