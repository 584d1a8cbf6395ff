//! Consensus-based collaboration: clients train once in isolation, then the
//! locally trained models' predictions are fused at inference time by
//! majority voting, STAPLE, or uncertainty-based ensembling (UBE).

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::scenario::Sample;
use crate::segmodel::{Dropout, SegModel, DEFAULT_THRESHOLD};
use crate::training::{train_steps, TrainSpec};
use crate::volume::{ImageVolume, MaskVolume, ProbVolume, Shape};

fn common_shape(masks: &[MaskVolume]) -> Result<Shape> {
    let first = masks.first().ok_or_else(|| Error::config("ensemble needs at least one mask"))?;
    for m in masks {
        m.shape().expect_eq(&first.shape())?;
    }
    Ok(first.shape())
}

/// Voxelwise majority: 1 iff more than half of the raters vote 1. An exact
/// tie resolves to background.
pub fn majority_vote(masks: &[MaskVolume]) -> Result<MaskVolume> {
    let shape = common_shape(masks)?;
    let m = masks.len();
    let mut counts = vec![0usize; shape.len()];
    for mask in masks {
        for (c, &v) in counts.iter_mut().zip(mask.voxels()) {
            *c += v as usize;
        }
    }
    MaskVolume::new(shape, counts.into_iter().map(|c| (2 * c > m) as u8).collect())
}

/// Clamp applied to rater performance parameters and the prior.
pub const STAPLE_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StapleConfig {
    pub tol: f64,
    pub max_iters: usize,
    /// Initial sensitivity and specificity of every rater.
    pub init: f64,
}

impl Default for StapleConfig {
    fn default() -> Self {
        Self { tol: 1e-6, max_iters: 100, init: 0.99 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StapleState {
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    /// Posterior foreground probability per voxel.
    pub weights: ProbVolume,
    pub prior: f64,
    pub iterations: usize,
}

impl StapleState {
    /// Columns: `rater,sensitivity,specificity,iterations`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rater", "sensitivity", "specificity", "iterations"])?;
        for (i, (p, q)) in self.sensitivity.iter().zip(&self.specificity).enumerate() {
            w.write_record([i.to_string(), format!("{p:.9}"), format!("{q:.9}"), self.iterations.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One E-M iteration as recorded by [`staple_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct StapleIterate {
    /// Posterior computed in this iteration's E-step.
    pub weights: Vec<f64>,
    /// Rater parameters after this iteration's M-step.
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
    /// Observed-data log-likelihood under the parameters used by the E-step.
    pub log_likelihood: f64,
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(STAPLE_CLAMP, 1.0 - STAPLE_CLAMP)
}

/// E-step: `W(x) = g A / (g A + (1-g) B)` where `A = prod_i a_i(x)`,
/// `B = prod_i b_i(x)`, `a_i = p_i` or `1-p_i` and `b_i = 1-q_i` or `q_i`
/// for votes 1 or 0. Also returns the observed-data log-likelihood.
pub fn staple_e_step(masks: &[MaskVolume], sens: &[f64], spec: &[f64], prior: f64) -> (Vec<f64>, f64) {
    let n = masks[0].shape().len();
    let mut w = vec![0.0; n];
    let mut ll = 0.0;
    for (x, wx) in w.iter_mut().enumerate() {
        let (mut a, mut b) = (prior, 1.0 - prior);
        for (i, m) in masks.iter().enumerate() {
            if m.voxels()[x] == 1 {
                a *= sens[i];
                b *= 1.0 - spec[i];
            } else {
                a *= 1.0 - sens[i];
                b *= spec[i];
            }
        }
        *wx = a / (a + b);
        ll += (a + b).ln();
    }
    (w, ll)
}

/// M-step: `p_i = sum W h_i / sum W`, `q_i = sum (1-W)(1-h_i) / sum (1-W)`,
/// both clamped into the open unit interval.
pub fn staple_m_step(masks: &[MaskVolume], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let sw: f64 = w.iter().sum();
    let sbg: f64 = w.iter().map(|v| 1.0 - v).sum();
    let mut sens = Vec::with_capacity(masks.len());
    let mut spec = Vec::with_capacity(masks.len());
    for m in masks {
        let (mut tp, mut tn) = (0.0, 0.0);
        for (&h, &wx) in m.voxels().iter().zip(w) {
            if h == 1 {
                tp += wx;
            } else {
                tn += 1.0 - wx;
            }
        }
        sens.push(clamp_unit(if sw > 0.0 { tp / sw } else { 0.5 }));
        spec.push(clamp_unit(if sbg > 0.0 { tn / sbg } else { 0.5 }));
    }
    (sens, spec)
}

/// Runs STAPLE and returns every iterate. The prior is the mean foreground
/// fraction of the inputs and stays fixed. Iteration stops once the
/// posterior moves by less than `tol` everywhere or after `max_iters`
/// E-steps. Identical inputs short-circuit without iterating.
pub fn staple_trace(masks: &[MaskVolume], config: &StapleConfig) -> Result<(MaskVolume, StapleState, Vec<StapleIterate>)> {
    let shape = common_shape(masks)?;
    if masks.len() < 2 {
        return Err(Error::config("STAPLE needs at least two raters"));
    }
    if !(config.tol > 0.0) || config.max_iters == 0 {
        return Err(Error::config("STAPLE needs tol > 0 and max_iters >= 1"));
    }
    let n = shape.len() as f64;
    let prior = clamp_unit(masks.iter().map(|m| m.count() as f64 / n).sum::<f64>() / masks.len() as f64);
    if masks.iter().all(|m| m == &masks[0]) {
        let m = masks.len();
        let state = StapleState {
            sensitivity: vec![clamp_unit(1.0); m],
            specificity: vec![clamp_unit(1.0); m],
            weights: ProbVolume::from(&masks[0]),
            prior,
            iterations: 0,
        };
        return Ok((masks[0].clone(), state, Vec::new()));
    }
    let mut sens = vec![clamp_unit(config.init); masks.len()];
    let mut spec = sens.clone();
    let mut trace: Vec<StapleIterate> = Vec::new();
    let mut weights = Vec::new();
    for _ in 0..config.max_iters {
        let (w, ll) = staple_e_step(masks, &sens, &spec, prior);
        let converged = trace
            .last()
            .map(|prev| prev.weights.iter().zip(&w).all(|(a, b)| (a - b).abs() < config.tol))
            .unwrap_or(false);
        let (s, q) = staple_m_step(masks, &w);
        sens = s;
        spec = q;
        trace.push(StapleIterate { weights: w.clone(), sensitivity: sens.clone(), specificity: spec.clone(), log_likelihood: ll });
        weights = w;
        if converged {
            break;
        }
    }
    let probs = ProbVolume::new(shape, weights.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
    let mask = probs.threshold(0.5);
    let state = StapleState { sensitivity: sens, specificity: spec, weights: probs, prior, iterations: trace.len() };
    Ok((mask, state, trace))
}

pub fn staple(masks: &[MaskVolume], config: &StapleConfig) -> Result<(MaskVolume, StapleState)> {
    staple_trace(masks, config).map(|(m, s, _)| (m, s))
}

/// How UBE turns per-model total variance into fusion weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UbeDirection {
    /// Lower variance, higher weight.
    #[default]
    Inverse,
    /// Higher variance, higher weight.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UbeConfig {
    pub passes: usize,
    pub eps: f64,
    pub direction: UbeDirection,
}

impl Default for UbeConfig {
    fn default() -> Self {
        Self { passes: 20, eps: 1e-9, direction: UbeDirection::Inverse }
    }
}

/// Fusion weights from per-model variance maps. `u_i` is the total variance
/// of map `i`; inverse weighting gives `w_i ∝ 1/(u_i + eps)`.
pub fn ube_weights(variances: &[Vec<f64>], eps: f64, direction: UbeDirection) -> Result<Vec<f64>> {
    if variances.is_empty() {
        return Err(Error::config("UBE needs at least one model"));
    }
    let totals: Vec<f64> = variances.iter().map(|v| v.iter().sum::<f64>()).collect();
    ube_weights_from_totals(&totals, eps, direction)
}

pub fn ube_weights_from_totals(totals: &[f64], eps: f64, direction: UbeDirection) -> Result<Vec<f64>> {
    if let Some(u) = totals.iter().find(|u| !(u.is_finite() && **u >= 0.0)) {
        return Err(Error::numeric(None, format!("invalid total variance {u}")));
    }
    let raw: Vec<f64> = totals
        .iter()
        .map(|&u| match direction {
            UbeDirection::Inverse => 1.0 / (u + eps),
            UbeDirection::Direct => u + eps,
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        // every score degenerate (all zero variance with eps = 0): fall back to uniform
        let m = totals.len() as f64;
        let infinite = raw.iter().filter(|r| r.is_infinite()).count();
        if infinite > 0 {
            return Ok(raw.iter().map(|r| if r.is_infinite() { 1.0 / infinite as f64 } else { 0.0 }).collect());
        }
        return Ok(vec![1.0 / m; totals.len()]);
    }
    Ok(raw.iter().map(|r| r / sum).collect())
}

/// Monte Carlo dropout statistics: per-voxel mean probability and unbiased
/// sample variance over `passes` stochastic forward passes.
pub fn mc_dropout(model: &SegModel, image: &ImageVolume, passes: usize, rng: &Rng) -> Result<(ProbVolume, Vec<f64>)> {
    if passes < 2 {
        return Err(Error::config("MC dropout needs at least two passes"));
    }
    let n = image.shape().len();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut stream = rng.clone();
    for _ in 0..passes {
        let p = model.forward(image, Dropout::On(&mut stream))?;
        for ((s, q), v) in sum.iter_mut().zip(&mut sum_sq).zip(p.voxels()) {
            *s += v;
            *q += v * v;
        }
    }
    let k = passes as f64;
    let mean: Vec<f64> = sum.iter().map(|s| (s / k).clamp(0.0, 1.0)).collect();
    let var: Vec<f64> = sum.iter().zip(&sum_sq).map(|(s, q)| ((q - s * s / k) / (k - 1.0)).max(0.0)).collect();
    Ok((ProbVolume::new(image.shape(), mean)?, var))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UbeOutput {
    pub mask: MaskVolume,
    pub fused: ProbVolume,
    pub weights: Vec<f64>,
    pub total_variance: Vec<f64>,
}

/// Uncertainty-based ensembling. Every model sees the same dropout stream
/// `rng`, so identical models produce identical statistics.
pub fn ube_fuse(models: &[SegModel], image: &ImageVolume, config: &UbeConfig, rng: &Rng) -> Result<UbeOutput> {
    if models.is_empty() {
        return Err(Error::config("UBE needs at least one model"));
    }
    let stats = models.iter().map(|m| mc_dropout(m, image, config.passes, rng)).collect::<Result<Vec<_>>>()?;
    let totals: Vec<f64> = stats.iter().map(|(_, v)| v.iter().sum()).collect();
    let weights = ube_weights_from_totals(&totals, config.eps, config.direction)?;
    let n = image.shape().len();
    let mut fused = vec![0.0; n];
    for ((mean, _), w) in stats.iter().zip(&weights) {
        for (f, m) in fused.iter_mut().zip(mean.voxels()) {
            *f += w * m;
        }
    }
    let fused = ProbVolume::new(image.shape(), fused.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
    Ok(UbeOutput { mask: fused.threshold(DEFAULT_THRESHOLD), fused, weights, total_variance: totals })
}

/// A client's private training data for one-shot local training.
#[derive(Debug, Clone)]
pub struct LocalClient<'a> {
    pub id: &'a str,
    pub data: &'a [Sample],
    pub rng: Rng,
}

/// Trains one model per client independently (no communication), in
/// parallel. Returns the models and the bytes needed to centralize them,
/// `M * m_s`.
pub fn train_local_once(
    clients: &[LocalClient<'_>],
    initial: &SegModel,
    spec: &TrainSpec,
    steps: u64,
) -> Result<(Vec<SegModel>, u64)> {
    if clients.is_empty() {
        return Err(Error::config("consensus training needs at least one client"));
    }
    let models = clients
        .par_iter()
        .map(|c| {
            train_steps(initial, c.data, spec, steps, &c.rng, None)
                .map(|(m, _)| m)
                .map_err(|e| Error::Protocol(format!("client {}: {e}", c.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = models.iter().map(|m| m.params().serialized_len()).sum();
    Ok((models, bytes))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numcore::{OptimizerSpec, Rng};
    use crate::segmodel::Architecture;

    fn mask(bits: &[u8]) -> MaskVolume {
        MaskVolume::new(Shape::plane(1, bits.len()), bits.to_vec()).unwrap()
    }

    #[test]
    fn majority_vote_examples() {
        let a = mask(&[1, 0, 1, 1]);
        assert_eq!(majority_vote(&[a.clone()]).unwrap(), a);
        let out = majority_vote(&[mask(&[1, 1]), mask(&[1, 0]), mask(&[0, 0])]).unwrap();
        assert_eq!(out.voxels(), &[1, 0]);
        let tie = majority_vote(&[mask(&[1]), mask(&[1]), mask(&[0]), mask(&[0])]).unwrap();
        assert_eq!(tie.voxels(), &[0]);
        assert!(majority_vote(&[mask(&[1]), mask(&[1, 0])]).is_err());
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn staple_unanimous_fast_path() {
        let a = mask(&[1, 0, 1, 0, 0]);
        let (out, state) = staple(&[a.clone(), a.clone(), a.clone()], &StapleConfig::default()).unwrap();
        assert_eq!(out, a);
        assert_eq!(state.iterations, 0);
        assert!(state.sensitivity.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(staple(&[a.clone()], &StapleConfig::default()).is_err());
    }

    #[test]
    fn e_step_symmetry() {
        let (w, _) = staple_e_step(&[mask(&[1]), mask(&[0])], &[0.8, 0.8], &[0.8, 0.8], 0.5);
        assert!((w[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn staple_identifies_inverted_rater() {
        let truth = [1, 1, 1, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0];
        let mut noisy = truth;
        noisy[3] = 1;
        let inverted: Vec<u8> = truth.iter().map(|v| 1 - v).collect();
        let raters = [mask(&truth), mask(&noisy), mask(&inverted)];
        let (out, state, trace) = staple_trace(&raters, &StapleConfig::default()).unwrap();
        assert_eq!(out.voxels(), &truth);
        assert!(state.sensitivity[2] < 0.5);
        for pair in trace.windows(2) {
            assert!(pair[1].log_likelihood >= pair[0].log_likelihood - 1e-9);
        }
        let mut buf = Vec::new();
        state.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn ube_weight_examples() {
        let w = ube_weights(&[vec![0.5, 0.5], vec![1.0], vec![0.25, 0.75]], 1e-9, UbeDirection::Inverse).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        let w = ube_weights_from_totals(&[1.0, 3.0], 0.0, UbeDirection::Inverse).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        let w = ube_weights_from_totals(&[1e-12, 1.0, 1.0], 1e-15, UbeDirection::Inverse).unwrap();
        assert!(w[0] > 0.999);
        let w = ube_weights_from_totals(&[0.0, 1.0], 0.0, UbeDirection::Inverse).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
        let w = ube_weights_from_totals(&[1.0, 3.0], 0.0, UbeDirection::Direct).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15);
        assert!(ube_weights_from_totals(&[-1.0], 0.0, UbeDirection::Inverse).is_err());
    }

    fn blob_image(shape: Shape, rng: &mut Rng) -> (ImageVolume, MaskVolume) {
        let truth = MaskVolume::from_fn(shape, |_, y, x| {
            let (dy, dx) = (y as f64 - 5.5, x as f64 - 5.5);
            dy * dy + dx * dx <= 10.0
        });
        let img = truth.voxels().iter().map(|&t| if t == 1 { 1.5 } else { -0.5 } + 0.3 * rng.normal()).collect();
        (ImageVolume::new(shape, img).unwrap(), truth)
    }

    #[test]
    fn ube_single_and_duplicate_models() {
        let mut rng = Rng::new(4, 0);
        let model = SegModel::init(Architecture::default(), &mut rng).unwrap();
        let (img, _) = blob_image(Shape::plane(12, 12), &mut rng);
        let cfg = UbeConfig { passes: 5, ..UbeConfig::default() };
        let stream = Rng::new(1, 9);
        let single = ube_fuse(&[model.clone()], &img, &cfg, &stream).unwrap();
        let (mean, _) = mc_dropout(&model, &img, 5, &stream).unwrap();
        assert_eq!(single.mask, mean.threshold(0.5));
        let dup = ube_fuse(&[model.clone(), model.clone(), model], &img, &cfg, &stream).unwrap();
        assert_eq!(dup.mask, single.mask);
        assert!(dup.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn ube_prefers_trained_model_over_random() {
        let shape = Shape::plane(12, 12);
        let mut rng = Rng::new(8, 0);
        let data: Vec<Sample> = (0..6).map(|_| blob_image(shape, &mut rng)).collect();
        let arch = Architecture { patch_radius: 1, ..Architecture::default() };
        let init = SegModel::init(arch, &mut rng).unwrap();
        let spec = TrainSpec { optimizer: OptimizerSpec::adamw(0.02), batch_size: 3 };
        let clients = [LocalClient { id: "a", data: &data, rng: Rng::new(8, 1) }];
        let (trained, bytes) = train_local_once(&clients, &init, &spec, 150).unwrap();
        assert_eq!(bytes, init.params().serialized_len());
        let random = SegModel::init(arch, &mut Rng::new(77, 0)).unwrap();
        let models = [trained[0].clone(), random];
        let (test_img, truth) = blob_image(shape, &mut rng);
        let cfg = UbeConfig::default();
        let stream = Rng::new(3, 3);
        let ube = ube_fuse(&models, &test_img, &cfg, &stream).unwrap();
        let means: Vec<ProbVolume> = models.iter().map(|m| mc_dropout(m, &test_img, cfg.passes, &stream).unwrap().0).collect();
        let avg = ProbVolume::new(
            shape,
            means[0].voxels().iter().zip(means[1].voxels()).map(|(a, b)| 0.5 * (a + b)).collect(),
        )
        .unwrap()
        .threshold(0.5);
        let d_ube = crate::metrics::dsc(&ube.mask, &truth).unwrap();
        let d_avg = crate::metrics::dsc(&avg, &truth).unwrap();
        assert!(ube.weights[0] > ube.weights[1]);
        assert!(d_ube >= d_avg, "{d_ube} < {d_avg}");
    }

    #[test]
    fn local_training_is_deterministic_and_client_specific() {
        let shape = Shape::plane(10, 10);
        let mut rng = Rng::new(2, 0);
        let d1: Vec<Sample> = (0..3).map(|_| blob_image(shape, &mut rng)).collect();
        let d2: Vec<Sample> = (0..3).map(|_| blob_image(shape, &mut rng)).collect();
        let init = SegModel::init(Architecture { patch_radius: 1, ..Architecture::default() }, &mut rng).unwrap();
        let spec = TrainSpec { optimizer: OptimizerSpec::adamw(0.01), batch_size: 2 };
        let clients = [
            LocalClient { id: "a", data: &d1, rng: Rng::new(5, 1) },
            LocalClient { id: "b", data: &d2, rng: Rng::new(5, 2) },
        ];
        let (m1, bytes) = train_local_once(&clients, &init, &spec, 5).unwrap();
        let (m2, _) = train_local_once(&clients, &init, &spec, 5).unwrap();
        assert_eq!(m1, m2);
        assert_ne!(m1[0].params().checksum(), m1[1].params().checksum());
        assert_eq!(bytes, 2 * init.params().serialized_len());
    }

    fn arb_raters(max_raters: usize, voxels: usize) -> impl Strategy<Value = Vec<MaskVolume>> {
        proptest::collection::vec(proptest::collection::vec(0u8..=1, voxels), 2..=max_raters)
            .prop_map(|rs| rs.iter().map(|r| mask(r)).collect())
    }

    proptest! {
        #[test]
        fn staple_posterior_is_valid_and_likelihood_monotone(raters in arb_raters(5, 16)) {
            let (_, _, trace) = staple_trace(&raters, &StapleConfig::default()).unwrap();
            for it in &trace {
                prop_assert!(it.weights.iter().all(|w| (0.0..=1.0).contains(w)));
            }
            for pair in trace.windows(2) {
                prop_assert!(pair[1].log_likelihood >= pair[0].log_likelihood - 1e-9);
            }
        }

        #[test]
        fn odd_majority_invariant_under_duplication(raters in arb_raters(5, 12)) {
            prop_assume!(raters.len() % 2 == 1);
            let mut doubled = raters.clone();
            doubled.extend(raters.iter().cloned());
            prop_assert_eq!(majority_vote(&raters).unwrap(), majority_vote(&doubled).unwrap());
        }

        #[test]
        fn fusers_are_identity_on_identical_inputs(bits in proptest::collection::vec(0u8..=1, 12), m in 2usize..5) {
            let a = mask(&bits);
            let raters = vec![a.clone(); m];
            prop_assert_eq!(&majority_vote(&raters).unwrap(), &a);
            prop_assert_eq!(&staple(&raters, &StapleConfig::default()).unwrap().0, &a);
        }

        #[test]
        fn ube_weights_normalized_and_scale_invariant(totals in proptest::collection::vec(0.01f64..100.0, 1..6), c in 0.01f64..100.0) {
            let w = ube_weights_from_totals(&totals, 0.0, UbeDirection::Inverse).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let scaled: Vec<f64> = totals.iter().map(|u| u * c).collect();
            let w2 = ube_weights_from_totals(&scaled, 0.0, UbeDirection::Inverse).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
