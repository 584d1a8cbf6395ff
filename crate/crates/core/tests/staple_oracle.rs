mod oracles;

use clbench_core::consensus::{staple_trace, StapleConfig};
use clbench_core::numcore::Rng;
use clbench_core::volume::{MaskVolume, Shape};

use oracles::naive_staple;

const TOL: f64 = 1e-10;

/// Runs production and reference STAPLE and compares every iterate.
fn compare(raters: &[Vec<u8>], shape: Shape) {
    let cfg = StapleConfig::default();
    let masks: Vec<MaskVolume> = raters.iter().map(|r| MaskVolume::new(shape, r.clone()).unwrap()).collect();
    let (mask, state, trace) = staple_trace(&masks, &cfg).unwrap();
    let (ref_mask, ref_trace) = naive_staple(raters, cfg.tol, cfg.max_iters, cfg.init, true);
    assert_eq!(trace.len(), ref_trace.len(), "iteration count for {raters:?}");
    assert_eq!(state.iterations, ref_trace.len());
    for (it, (a, b)) in trace.iter().zip(&ref_trace).enumerate() {
        for (x, (wa, wb)) in a.weights.iter().zip(&b.w).enumerate() {
            assert!((wa - wb).abs() <= TOL, "iterate {it} voxel {x}: {wa} vs {wb} for {raters:?}");
        }
        for i in 0..raters.len() {
            assert!((a.sensitivity[i] - b.p[i]).abs() <= TOL, "iterate {it} p[{i}] for {raters:?}");
            assert!((a.specificity[i] - b.q[i]).abs() <= TOL, "iterate {it} q[{i}] for {raters:?}");
        }
    }
    assert_eq!(mask.voxels(), &ref_mask[..], "consensus for {raters:?}");
}

#[test]
fn exhaustive_three_raters_on_four_voxels() {
    let shape = Shape::new(1, 2, 2).unwrap();
    for code in 0u32..(1 << 12) {
        let raters: Vec<Vec<u8>> =
            (0..3).map(|r| (0..4).map(|x| ((code >> (4 * r + x)) & 1) as u8).collect()).collect();
        compare(&raters, shape);
    }
}

#[test]
fn random_sixteen_voxel_cases() {
    let shape = Shape::new(1, 4, 4).unwrap();
    let mut rng = Rng::new(41, 0);
    for _ in 0..100 {
        let truth = oracles::random_bits(16, 0.2 + 0.5 * rng.uniform(), &mut rng);
        let raters: Vec<Vec<u8>> = (0..3)
            .map(|_| {
                let flip = 0.3 * rng.uniform();
                truth.iter().map(|&t| if rng.uniform() < flip { 1 - t } else { t }).collect()
            })
            .collect();
        compare(&raters, shape);
    }
}

#[test]
fn unanimous_inputs_are_fixed_points() {
    let shape = Shape::new(1, 2, 2).unwrap();
    for code in 0u8..16 {
        let mask: Vec<u8> = (0..4).map(|x| (code >> x) & 1).collect();
        let raters = vec![mask.clone(); 3];
        let masks: Vec<MaskVolume> = raters.iter().map(|r| MaskVolume::new(shape, r.clone()).unwrap()).collect();
        let (out, state, _) = staple_trace(&masks, &StapleConfig::default()).unwrap();
        assert_eq!(out.voxels(), &mask[..]);
        assert_eq!(state.iterations, 0);
        // Without the shortcut the EM still lands on the unanimous mask.
        let (slow, _) = naive_staple(&raters, 1e-6, 100, 0.99, false);
        assert_eq!(slow, mask);
    }
}
