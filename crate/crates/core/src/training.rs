//! Mini-batch training loop shared by local, centralized, federated and
//! consensus strategies.

use crate::error::{Error, Result};
use crate::numcore::{OptimizerSpec, OptimizerState, ParamVector, Rng};
use crate::scenario::Sample;
use crate::segmodel::{Dropout, SegModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub optimizer: OptimizerSpec,
    pub batch_size: usize,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        OptimizerState::new(self.optimizer, 1).map(|_| ())
    }
}

/// Draws mini-batches without replacement within an epoch and reshuffles at
/// every epoch boundary. The final batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, rng: Rng) -> Self {
        assert!(len > 0 && batch > 0);
        Self { order: (0..len).collect(), pos: len, batch, rng }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Proximal anchor: adds `mu * (theta - anchor)` to every gradient.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub anchor: &'a ParamVector,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainStats {
    pub steps: u64,
    /// Loss of the first mini-batch before any update.
    pub loss_pre: f64,
    /// Loss of the last mini-batch after the final update.
    pub loss_post: f64,
}

/// Runs `steps` optimizer steps from `model` with a fresh optimizer state.
/// Dropout is active during training when the architecture has a nonzero
/// rate.
pub fn train_steps(
    model: &SegModel,
    data: &[Sample],
    spec: &TrainSpec,
    steps: u64,
    rng: &Rng,
    prox: Option<Proximal<'_>>,
) -> Result<(SegModel, TrainStats)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Protocol("training requires a non-empty dataset".into()));
    }
    let mut sampler = BatchSampler::new(data.len(), spec.batch_size, rng.fork(1));
    let mut dropout_rng = rng.fork(2);
    let mut state = OptimizerState::new(spec.optimizer, model.params().len())?;
    let mut params = model.params().clone();
    let mut current = model.clone();
    let mut stats = TrainStats::default();
    let mut last_batch = Vec::new();
    for step in 0..steps {
        let idx = sampler.next_batch();
        let batch: Vec<_> = idx.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
        let (loss, mut grad) = current.loss_and_grad(&batch, Dropout::On(&mut dropout_rng))?;
        if step == 0 {
            stats.loss_pre = loss;
        }
        if let Some(p) = prox {
            let g = grad.as_mut_slice();
            for ((gi, theta), anchor) in g.iter_mut().zip(params.iter()).zip(p.anchor.iter()) {
                *gi += p.mu * (theta - anchor);
            }
        }
        state.step(&mut params, &grad)?;
        current = current.with_params(params.clone())?;
        last_batch = idx;
        stats.steps += 1;
    }
    if !last_batch.is_empty() {
        let batch: Vec<_> = last_batch.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
        stats.loss_post = current.loss_and_grad(&batch, Dropout::Off)?.0;
    }
    Ok((current, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 4, Rng::new(1, 0));
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
            assert_eq!(seen.len(), 10);
            seen.sort();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn full_batch_returns_everything() {
        let mut s = BatchSampler::new(3, 8, Rng::new(1, 0));
        let mut b = s.next_batch();
        b.sort();
        assert_eq!(b, vec![0, 1, 2]);
    }
}
