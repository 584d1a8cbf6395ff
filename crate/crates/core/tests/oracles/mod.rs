//! Brute-force reference implementations used by the integration and
//! acceptance tests. Each one is written straight from the defining formula
//! and shares no code with the library.

#![allow(dead_code)]

use clbench_core::numcore::{ParamVector, Rng};
use clbench_core::segmodel::{dice_loss, Dropout, SegModel};
use clbench_core::volume::{ImageVolume, MaskVolume};

/// One STAPLE iteration: posterior, then the rater parameters fitted to it.
#[derive(Debug, Clone)]
pub struct NaiveIterate {
    pub w: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Textbook STAPLE EM on flat rater vectors. Prior fixed at the mean rater
/// foreground fraction, p and q start at `init`, everything clamped to
/// `[1e-6, 1 - 1e-6]`. Stops after the E-step whose posterior moved less than
/// `tol` everywhere. With `fast_path`, unanimous raters return immediately.
pub fn naive_staple(
    raters: &[Vec<u8>],
    tol: f64,
    max_iters: usize,
    init: f64,
    fast_path: bool,
) -> (Vec<u8>, Vec<NaiveIterate>) {
    let clamp = |v: f64| v.max(1e-6).min(1.0 - 1e-6);
    let m = raters.len();
    let n = raters[0].len();
    let mut frac = 0.0;
    for r in raters {
        frac += r.iter().filter(|&&v| v == 1).count() as f64 / n as f64;
    }
    let gamma = clamp(frac / m as f64);
    if fast_path && raters.iter().all(|r| r == &raters[0]) {
        return (raters[0].clone(), Vec::new());
    }
    let mut p = vec![clamp(init); m];
    let mut q = vec![clamp(init); m];
    let mut iterates: Vec<NaiveIterate> = Vec::new();
    for _ in 0..max_iters {
        let mut w = vec![0.0; n];
        for x in 0..n {
            let mut a = gamma;
            let mut b = 1.0 - gamma;
            for i in 0..m {
                if raters[i][x] == 1 {
                    a *= p[i];
                    b *= 1.0 - q[i];
                } else {
                    a *= 1.0 - p[i];
                    b *= q[i];
                }
            }
            w[x] = a / (a + b);
        }
        let done = match iterates.last() {
            Some(prev) => (0..n).all(|x| (prev.w[x] - w[x]).abs() < tol),
            None => false,
        };
        let sum_w: f64 = w.iter().sum();
        let sum_bg: f64 = w.iter().map(|v| 1.0 - v).sum();
        for i in 0..m {
            let mut tp = 0.0;
            let mut tn = 0.0;
            for x in 0..n {
                if raters[i][x] == 1 {
                    tp += w[x];
                } else {
                    tn += 1.0 - w[x];
                }
            }
            p[i] = clamp(if sum_w > 0.0 { tp / sum_w } else { 0.5 });
            q[i] = clamp(if sum_bg > 0.0 { tn / sum_bg } else { 0.5 });
        }
        iterates.push(NaiveIterate { w, p: p.clone(), q: q.clone() });
        if done {
            break;
        }
    }
    let last = &iterates.last().expect("at least one iteration").w;
    (last.iter().map(|&v| (v >= 0.5) as u8).collect(), iterates)
}

/// Boundary pixels of a 2D mask: foreground with a 4-neighbour that is
/// background or off the grid.
pub fn brute_boundary(mask: &[u8], h: usize, w: usize) -> Vec<(i64, i64)> {
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && mask[y as usize * w + x as usize] == 1;
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if at(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !at(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// NSD by exhaustive nearest-boundary search.
pub fn brute_nsd(a: &[u8], b: &[u8], h: usize, w: usize, tau: f64) -> f64 {
    let ba = brute_boundary(a, h, w);
    let bb = brute_boundary(b, h, w);
    if ba.is_empty() && bb.is_empty() {
        return 1.0;
    }
    if ba.is_empty() || bb.is_empty() {
        return 0.0;
    }
    let within = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .filter(|&&(y, x)| {
                let d2 = to.iter().map(|&(v, u)| (y - v) * (y - v) + (x - u) * (x - u)).min().unwrap();
                d2 as f64 <= tau * tau
            })
            .count()
    };
    (within(&ba, &bb) + within(&bb, &ba)) as f64 / (ba.len() + bb.len()) as f64
}

/// Mean Dice loss of `model` over `batch` with dropout off, evaluated from
/// the forward pass only.
pub fn batch_loss(model: &SegModel, batch: &[(&ImageVolume, &MaskVolume)]) -> f64 {
    let mut total = 0.0;
    for (image, truth) in batch {
        total += dice_loss(&model.forward(image, Dropout::Off).unwrap(), truth).unwrap();
    }
    total / batch.len() as f64
}

/// Central differences of `f` around `params`, one coordinate at a time.
pub fn central_diff(f: impl Fn(&ParamVector) -> f64, params: &ParamVector, h: f64) -> Vec<f64> {
    let base = params.as_slice().to_vec();
    (0..base.len())
        .map(|j| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[j] += h;
            minus[j] -= h;
            let fp = f(&ParamVector::new(plus).unwrap());
            let fm = f(&ParamVector::new(minus).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Random binary vector with foreground probability `density`.
pub fn random_bits(n: usize, density: f64, rng: &mut Rng) -> Vec<u8> {
    (0..n).map(|_| (rng.uniform() < density) as u8).collect()
}

/// Random axis-aligned blob (rectangle with random holes) on an h×w grid.
pub fn random_blob(h: usize, w: usize, rng: &mut Rng) -> Vec<u8> {
    let y0 = rng.below(h);
    let x0 = rng.below(w);
    let y1 = y0 + rng.below(h - y0);
    let x1 = x0 + rng.below(w - x0);
    let holes = rng.uniform() * 0.2;
    let mut out = vec![0u8; h * w];
    for y in y0..=y1 {
        for x in x0..=x1 {
            out[y * w + x] = (rng.uniform() >= holes) as u8;
        }
    }
    out
}
