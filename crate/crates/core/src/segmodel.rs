//! Patchwise two-layer segmentation scorer with dropout, soft Dice loss and
//! analytic gradients.
//!
//! For every voxel the model reads the zero-padded intensity patch of radius
//! `r` around it, applies a `tanh` hidden layer of width `H`, optionally drops
//! hidden units, and emits a sigmoid foreground probability. Parameters are
//! laid out as `[W1 (H x P) | b1 (H) | w2 (H) | b2]` with `P` the patch size.

use crate::error::{Error, Result};
use crate::numcore::{ParamVector, Rng};
use crate::volume::{ImageVolume, MaskVolume, ProbVolume, Shape};

/// Smoothing added to numerator and denominator of the soft Dice ratio.
pub const DICE_SMOOTHING: f64 = 1e-5;

/// Default binarization threshold (`prob >= 0.5` is foreground).
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Architecture {
    pub patch_radius: usize,
    pub hidden: usize,
    /// Dropout rate on hidden units, in `[0, 1)`.
    pub dropout: f64,
    /// Whether patches extend along depth (3D) or stay in-plane (2D).
    pub volumetric: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { patch_radius: 2, hidden: 16, dropout: 0.3, volumetric: false }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("hidden width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        let side = 2 * self.patch_radius + 1;
        if self.volumetric {
            side * side * side
        } else {
            side * side
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.patch_len() + 2 * self.hidden + 1
    }

    fn offsets(&self) -> Vec<(isize, isize, isize)> {
        let r = self.patch_radius as isize;
        let dz = if self.volumetric { -r..=r } else { 0..=0 };
        let mut out = Vec::with_capacity(self.patch_len());
        for z in dz {
            for y in -r..=r {
                for x in -r..=r {
                    out.push((z, y, x));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    arch: Architecture,
    params: ParamVector,
}

/// Dropout mode for a forward pass.
pub enum Dropout<'a> {
    Off,
    On(&'a mut Rng),
}

impl SegModel {
    pub fn new(arch: Architecture, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::structural(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch, params: ParamVector::zeros(arch.param_count()) })
    }

    /// Random initialization: Gaussian hidden weights scaled by fan-in, zero
    /// biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let p = arch.patch_len();
        let h = arch.hidden;
        let mut values = vec![0.0; arch.param_count()];
        let s1 = 1.0 / (p as f64).sqrt();
        for v in &mut values[..h * p] {
            *v = rng.normal() * s1;
        }
        let s2 = 1.0 / (h as f64).sqrt();
        for v in &mut values[h * p + h..h * p + 2 * h] {
            *v = rng.normal() * s2;
        }
        Ok(Self { arch, params: ParamVector::new(values)? })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        SegModel::new(self.arch, params)
    }

    fn check_image(&self, shape: Shape) -> Result<()> {
        if self.arch.volumetric && shape.depth < 2 * self.arch.patch_radius + 1 {
            return Err(Error::structural(format!(
                "volumetric patches need depth >= {}, image is {shape}",
                2 * self.arch.patch_radius + 1
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &ImageVolume, dropout: Dropout<'_>) -> Result<ProbVolume> {
        self.check_image(image.shape())?;
        let n = image.shape().len();
        let pad = Padded::new(&self.arch, image);
        let act = self.hidden_layer(&pad, n);
        let keeps = match dropout {
            Dropout::On(rng) if self.arch.dropout > 0.0 => Some(self.draw_keeps(rng, n)),
            _ => None,
        };
        ProbVolume::new(image.shape(), self.output(&act, keeps.as_deref(), n))
    }

    pub fn predict_mask(&self, image: &ImageVolume, threshold: f64) -> Result<MaskVolume> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::config(format!("threshold {threshold} outside (0, 1)")));
        }
        Ok(self.forward(image, Dropout::Off)?.threshold(threshold))
    }

    /// Mean Dice loss over `batch` and its gradient. With dropout on, each
    /// sample draws its own masks and the backward pass reuses them.
    pub fn loss_and_grad(
        &self,
        batch: &[(&ImageVolume, &MaskVolume)],
        dropout: Dropout<'_>,
    ) -> Result<(f64, ParamVector)> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let mut rng = match dropout {
            Dropout::On(rng) if self.arch.dropout > 0.0 => Some(rng),
            _ => None,
        };
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for (image, truth) in batch {
            total += self.sample_loss_grad(image, truth, rng.as_deref_mut(), scale, &mut grad)?;
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::numeric(None, "non-finite loss"));
        }
        Ok((loss, ParamVector::new(grad)?))
    }

    /// Per-sample gradients of the Dice loss; used by DP-SGD clipping.
    pub fn per_sample_grads(&self, batch: &[(&ImageVolume, &MaskVolume)]) -> Result<Vec<ParamVector>> {
        batch
            .iter()
            .map(|(image, truth)| {
                let mut grad = vec![0.0; self.params.len()];
                let loss = self.sample_loss_grad(image, truth, None, 1.0, &mut grad)?;
                if !loss.is_finite() {
                    return Err(Error::numeric(None, "non-finite loss"));
                }
                ParamVector::new(grad)
            })
            .collect()
    }

    /// Hidden activations laid out unit-major: `act[j * n + voxel]`.
    fn hidden_layer(&self, pad: &Padded, n: usize) -> Vec<f64> {
        let (h, p) = (self.arch.hidden, self.arch.patch_len());
        let params = self.params.as_slice();
        let mut act = vec![0.0; h * n];
        for (j, out) in act.chunks_exact_mut(n).enumerate() {
            out.fill(params[h * p + j]);
            for o in 0..p {
                let w = params[j * p + o];
                for (row, dst) in out.chunks_exact_mut(pad.width).enumerate() {
                    for (d, s) in dst.iter_mut().zip(pad.row(row, o)) {
                        *d += w * s;
                    }
                }
            }
            for a in out.iter_mut() {
                *a = tanh(*a);
            }
        }
        act
    }

    /// Inverted-dropout multipliers, drawn voxel by voxel and stored
    /// unit-major like the activations: 0 with probability `p`, else
    /// `1/(1-p)`.
    fn draw_keeps(&self, rng: &mut Rng, n: usize) -> Vec<f64> {
        let h = self.arch.hidden;
        let inv = 1.0 / (1.0 - self.arch.dropout);
        let mut keeps = vec![0.0; h * n];
        // each 64-bit draw yields two 32-bit uniforms
        let cut = (self.arch.dropout * 4294967296.0) as u64;
        let mut spare: Option<u64> = None;
        for idx in 0..n {
            for j in 0..h {
                let u = match spare.take() {
                    Some(lo) => lo,
                    None => {
                        let bits = rng.next_u64();
                        spare = Some(bits & 0xffff_ffff);
                        bits >> 32
                    }
                };
                keeps[j * n + idx] = if u < cut { 0.0 } else { inv };
            }
        }
        keeps
    }

    fn output(&self, act: &[f64], keeps: Option<&[f64]>, n: usize) -> Vec<f64> {
        let (h, p) = (self.arch.hidden, self.arch.patch_len());
        let w2 = &self.params[h * p + h..h * p + 2 * h];
        let mut logits = vec![self.params[h * p + 2 * h]; n];
        for j in 0..h {
            let a = &act[j * n..(j + 1) * n];
            match keeps {
                Some(k) => {
                    for ((l, a), k) in logits.iter_mut().zip(a).zip(&k[j * n..(j + 1) * n]) {
                        *l += w2[j] * a * k;
                    }
                }
                None => {
                    for (l, a) in logits.iter_mut().zip(a) {
                        *l += w2[j] * a;
                    }
                }
            }
        }
        logits.into_iter().map(sigmoid).collect()
    }

    fn sample_loss_grad(
        &self,
        image: &ImageVolume,
        truth: &MaskVolume,
        rng: Option<&mut Rng>,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        image.shape().expect_eq(&truth.shape())?;
        self.check_image(image.shape())?;
        let n = image.shape().len();
        let (h, p_len) = (self.arch.hidden, self.arch.patch_len());
        let pad = Padded::new(&self.arch, image);
        let act = self.hidden_layer(&pad, n);
        let keeps = rng.map(|r| self.draw_keeps(r, n));
        let probs = self.output(&act, keeps.as_deref(), n);

        let t = truth.voxels();
        let (mut inter, mut sum_p, mut sum_t) = (0.0, 0.0, 0.0);
        for (p, &ti) in probs.iter().zip(t) {
            inter += p * ti as f64;
            sum_p += p;
            sum_t += ti as f64;
        }
        let num = 2.0 * inter + DICE_SMOOTHING;
        let den = sum_p + sum_t + DICE_SMOOTHING;
        let loss = 1.0 - num / den;

        let (w1_end, b1_end, w2_end) = (h * p_len, h * p_len + h, h * p_len + 2 * h);
        let w2 = &self.params[b1_end..w2_end];
        let den2 = den * den;
        // dL/dp = -(2 t den - num) / den^2, chained through the sigmoid
        let dz: Vec<f64> = probs
            .iter()
            .zip(t)
            .map(|(&p, &ti)| scale * (-(2.0 * ti as f64 * den - num) / den2) * p * (1.0 - p))
            .collect();
        grad[w2_end] += dz.iter().sum::<f64>();
        let mut d_pre = vec![0.0; n];
        let mut dz_k = vec![0.0; n];
        for j in 0..h {
            let a = &act[j * n..(j + 1) * n];
            match &keeps {
                Some(k) => {
                    for ((d, z), k) in dz_k.iter_mut().zip(&dz).zip(&k[j * n..(j + 1) * n]) {
                        *d = z * k;
                    }
                }
                None => dz_k.copy_from_slice(&dz),
            }
            grad[b1_end + j] += dot(&dz_k, a);
            for ((d, zk), a) in d_pre.iter_mut().zip(&dz_k).zip(a) {
                *d = zk * w2[j] * (1.0 - a * a);
            }
            grad[w1_end + j] += d_pre.iter().sum::<f64>();
            for o in 0..p_len {
                let mut g = 0.0;
                for (row, dp) in d_pre.chunks_exact(pad.width).enumerate() {
                    g += dot(dp, pad.row(row, o));
                }
                grad[j * p_len + o] += g;
            }
        }
        Ok(loss)
    }
}

/// Zero-padded copy of an image, so every patch element of every voxel in
/// an output row is one contiguous slice.
struct Padded {
    data: Vec<f64>,
    /// Padded index of the first voxel of each output row `(z, y)`.
    rows: Vec<usize>,
    width: usize,
    /// Index shift of each patch element relative to the centre voxel.
    shifts: Vec<isize>,
}

impl Padded {
    fn new(arch: &Architecture, image: &ImageVolume) -> Self {
        let s = image.shape();
        let r = arch.patch_radius;
        let rz = if arch.volumetric { r } else { 0 };
        let (ph, pw) = (s.height + 2 * r, s.width + 2 * r);
        let mut data = vec![0.0; (s.depth + 2 * rz) * ph * pw];
        let mut rows = Vec::with_capacity(s.depth * s.height);
        let v = image.voxels();
        for z in 0..s.depth {
            for y in 0..s.height {
                let start = ((z + rz) * ph + y + r) * pw + r;
                let src = s.index(z, y, 0);
                data[start..start + s.width].copy_from_slice(&v[src..src + s.width]);
                rows.push(start);
            }
        }
        let shifts = arch
            .offsets()
            .iter()
            .map(|&(dz, dy, dx)| (dz * ph as isize + dy) * pw as isize + dx)
            .collect();
        Self { data, rows, width: s.width, shifts }
    }

    fn row(&self, row: usize, o: usize) -> &[f64] {
        let start = (self.rows[row] as isize + self.shifts[o]) as usize;
        &self.data[start..start + self.width]
    }
}

/// Dot product with four independent accumulators so the compiler can
/// vectorize the reduction.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `tanh` through a single `exp`; agrees with `f64::tanh` to a few ulps and
/// is markedly cheaper.
fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Soft Dice loss `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(pred: &ProbVolume, truth: &MaskVolume) -> Result<f64> {
    pred.shape().expect_eq(&truth.shape())?;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.voxels().iter().zip(truth.voxels()) {
        inter += p * t as f64;
        sp += p;
        st += t as f64;
    }
    Ok(1.0 - (2.0 * inter + DICE_SMOOTHING) / (sp + st + DICE_SMOOTHING))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numcore::Rng;
    use crate::numcore::{finite_diff_grad, OptimizerSpec, OptimizerState};

    fn small_arch() -> Architecture {
        Architecture { patch_radius: 1, hidden: 4, dropout: 0.3, volumetric: false }
    }

    fn random_image(shape: Shape, rng: &mut Rng) -> ImageVolume {
        ImageVolume::new(shape, (0..shape.len()).map(|_| rng.normal()).collect()).unwrap()
    }

    fn disc_mask(shape: Shape, cy: f64, cx: f64, r: f64) -> MaskVolume {
        MaskVolume::from_fn(shape, |_, y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            dy * dy + dx * dx <= r * r
        })
    }

    #[test]
    fn param_count_formula() {
        let a = Architecture::default();
        assert_eq!(a.param_count(), 16 * 25 + 33);
        let v = Architecture { volumetric: true, ..a };
        assert_eq!(v.param_count(), 16 * 125 + 33);
        assert!(SegModel::new(a, ParamVector::zeros(10)).is_err());
    }

    #[test]
    fn zero_params_give_one_half() {
        let m = SegModel::zeros(Architecture::default()).unwrap();
        let img = random_image(Shape::plane(6, 7), &mut Rng::new(1, 0));
        let p = m.forward(&img, Dropout::Off).unwrap();
        assert!(p.voxels().iter().all(|&v| v == 0.5));
        let mask = m.predict_mask(&img, 0.5).unwrap();
        assert_eq!(mask.count(), 42);
    }

    #[test]
    fn predict_mask_threshold_contract() {
        let m = SegModel::zeros(Architecture::default()).unwrap();
        let img = ImageVolume::filled(Shape::plane(4, 4), 1.0);
        assert!(m.predict_mask(&img, 1.0).is_err());
        assert!(m.predict_mask(&img, 0.0).is_err());
    }

    #[test]
    fn dropout_off_is_deterministic_and_zero_rate_matches() {
        let mut rng = Rng::new(3, 0);
        let arch = Architecture { dropout: 0.0, ..Architecture::default() };
        let m = SegModel::init(arch, &mut rng).unwrap();
        let img = random_image(Shape::plane(9, 9), &mut rng);
        let a = m.forward(&img, Dropout::Off).unwrap();
        let b = m.forward(&img, Dropout::Off).unwrap();
        assert_eq!(a, b);
        let c = m.forward(&img, Dropout::On(&mut Rng::new(5, 5))).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn dice_loss_examples() {
        let s = Shape::plane(2, 2);
        let t = MaskVolume::new(s, vec![1, 1, 0, 0]).unwrap();
        assert!(dice_loss(&ProbVolume::from(&t), &t).unwrap() < 1e-5);
        let inv = ProbVolume::new(s, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((dice_loss(&inv, &t).unwrap() - 1.0).abs() < 1e-5);
        let half = ProbVolume::filled(s, 0.5);
        let expected = 1.0 - (2.0 * 1.0 + 1e-5) / (2.0 + 2.0 + 1e-5);
        assert!((dice_loss(&half, &t).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.5).abs() < 1e-5);
        assert!(dice_loss(&half, &MaskVolume::zeros(Shape::plane(2, 3))).is_err());
    }

    fn check_gradient(seed: u64, arch: Architecture, shape: Shape) {
        let mut rng = Rng::new(seed, 11);
        let mut model = SegModel::init(arch, &mut rng).unwrap();
        // non-zero output bias so sigmoid is off its symmetric point
        let mut params = model.params().clone();
        let last = params.len() - 1;
        params.as_mut_slice()[last] = rng.normal() * 0.5;
        model = model.with_params(params).unwrap();
        let samples: Vec<(ImageVolume, MaskVolume)> = (0..3)
            .map(|_| {
                let img = random_image(shape, &mut rng);
                let mask = disc_mask(shape, 3.0 + rng.uniform(), 3.0, 2.0 + rng.uniform());
                (img, mask)
            })
            .collect();
        let batch: Vec<_> = samples.iter().map(|(i, m)| (i, m)).collect();
        let (_, analytic) = model.loss_and_grad(&batch, Dropout::Off).unwrap();
        let f = |p: &ParamVector| model.with_params(p.clone()).unwrap().loss_and_grad(&batch, Dropout::Off).unwrap().0;
        let fd = finite_diff_grad(f, model.params(), 1e-5).unwrap();
        let scale = analytic.norm().max(1e-8);
        for (i, (a, b)) in analytic.iter().zip(fd.iter()).enumerate() {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale);
            assert!(rel < 1e-4, "seed {seed} param {i}: analytic {a} fd {b}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            check_gradient(seed, small_arch(), Shape::plane(7, 7));
        }
        check_gradient(9, Architecture { patch_radius: 1, hidden: 3, dropout: 0.0, volumetric: true }, Shape::new(3, 6, 6).unwrap());
    }

    #[test]
    fn dropout_gradient_uses_forward_masks() {
        // Same stream for every evaluation pins the dropout masks.
        let mut rng = Rng::new(21, 0);
        let model = SegModel::init(small_arch(), &mut rng).unwrap();
        let shape = Shape::plane(6, 6);
        let img = random_image(shape, &mut rng);
        let mask = disc_mask(shape, 2.5, 2.5, 2.0);
        let batch = [(&img, &mask)];
        let (_, analytic) = model.loss_and_grad(&batch, Dropout::On(&mut Rng::new(99, 1))).unwrap();
        let f = |p: &ParamVector| {
            model.with_params(p.clone()).unwrap().loss_and_grad(&batch, Dropout::On(&mut Rng::new(99, 1))).unwrap().0
        };
        let fd = finite_diff_grad(f, model.params(), 1e-5).unwrap();
        for (a, b) in analytic.iter().zip(fd.iter()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-6));
        }
    }

    #[test]
    fn duplicating_batch_leaves_loss_and_grad_unchanged() {
        let mut rng = Rng::new(4, 0);
        let model = SegModel::init(small_arch(), &mut rng).unwrap();
        let shape = Shape::plane(6, 6);
        let imgs: Vec<_> = (0..2).map(|_| random_image(shape, &mut rng)).collect();
        let masks = [disc_mask(shape, 2.0, 2.0, 1.5), disc_mask(shape, 3.0, 3.0, 2.0)];
        let once = [(&imgs[0], &masks[0]), (&imgs[1], &masks[1])];
        let twice = [once[0], once[1], once[0], once[1]];
        let (l1, g1) = model.loss_and_grad(&once, Dropout::Off).unwrap();
        let (l2, g2) = model.loss_and_grad(&twice, Dropout::Off).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn overfitting_one_sample_reaches_a_stationary_point() {
        let shape = Shape::plane(8, 8);
        let truth = disc_mask(shape, 3.5, 3.5, 2.5);
        let img = ImageVolume::new(shape, truth.voxels().iter().map(|&t| if t == 1 { 1.0 } else { -1.0 }).collect()).unwrap();
        let mut model = SegModel::init(Architecture { dropout: 0.0, ..small_arch() }, &mut Rng::new(8, 0)).unwrap();
        let mut opt = OptimizerState::new(OptimizerSpec::sgd(2.0), model.params().len()).unwrap();
        let batch = [(&img, &truth)];
        let mut params = model.params().clone();
        for _ in 0..500 {
            let (_, g) = model.loss_and_grad(&batch, Dropout::Off).unwrap();
            opt.step(&mut params, &g).unwrap();
            model = model.with_params(params.clone()).unwrap();
        }
        let (loss, g) = model.loss_and_grad(&batch, Dropout::Off).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
        assert!(g.norm() < 1e-2, "grad norm {}", g.norm());
    }

    #[test]
    fn mc_dropout_mean_approaches_reference() {
        // With tanh hidden units the dropout average equals the p=0 network
        // only in expectation of the logit; compare against a fixed-seed
        // 20000-pass reference instead.
        let mut rng = Rng::new(12, 0);
        let model = SegModel::init(Architecture::default(), &mut rng).unwrap();
        let img = random_image(Shape::plane(5, 5), &mut rng);
        let mean_of = |passes: usize, seed: u64| {
            let mut drng = Rng::new(seed, 7);
            let mut acc = vec![0.0; 25];
            for _ in 0..passes {
                let p = model.forward(&img, Dropout::On(&mut drng)).unwrap();
                for (a, v) in acc.iter_mut().zip(p.voxels()) {
                    *a += v / passes as f64;
                }
            }
            acc
        };
        let reference = mean_of(20_000, 1);
        let estimate = mean_of(1000, 2);
        for (a, b) in reference.iter().zip(&estimate) {
            assert!((a - b).abs() < 0.05);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn forward_stays_in_unit_interval(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let mut rng = Rng::new(seed, 0);
            let base = SegModel::init(small_arch(), &mut rng).unwrap();
            let params = ParamVector::new(base.params().iter().map(|v| v * scale).collect()).unwrap();
            let model = base.with_params(params).unwrap();
            let img = random_image(Shape::plane(5, 6), &mut rng);
            let p = model.forward(&img, Dropout::On(&mut rng)).unwrap();
            prop_assert!(p.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn raising_threshold_never_adds_voxels(seed in 0u64..1000, lo in 0.01f64..0.98, delta in 0.0f64..0.5) {
            let hi = (lo + delta).min(0.99);
            let mut rng = Rng::new(seed, 0);
            let model = SegModel::init(Architecture::default(), &mut rng).unwrap();
            let img = random_image(Shape::plane(6, 6), &mut rng);
            let a = model.predict_mask(&img, lo).unwrap();
            let b = model.predict_mask(&img, hi).unwrap();
            prop_assert!(a.voxels().iter().zip(b.voxels()).all(|(x, y)| y <= x));
        }
    }
}
