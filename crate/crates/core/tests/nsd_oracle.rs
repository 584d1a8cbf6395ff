mod oracles;

use clbench_core::metrics::nsd;
use clbench_core::numcore::Rng;
use clbench_core::volume::{MaskVolume, Shape};

use oracles::{brute_nsd, random_bits, random_blob};

#[test]
fn matches_brute_force_on_sampled_pairs() {
    let mut rng = Rng::new(7, 0);
    for case in 0..1000 {
        let h = 1 + rng.below(10);
        let w = 1 + rng.below(10);
        let shape = Shape::new(1, h, w).unwrap();
        let draw = |rng: &mut Rng| {
            if rng.uniform() < 0.5 {
                random_bits(h * w, rng.uniform(), rng)
            } else {
                random_blob(h, w, rng)
            }
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let tau = [0.5, 1.0, 1.5, 2.0, 3.0][rng.below(5)];
        let got = nsd(&MaskVolume::new(shape, a.clone()).unwrap(), &MaskVolume::new(shape, b.clone()).unwrap(), tau)
            .unwrap();
        let want = brute_nsd(&a, &b, h, w, tau);
        assert_eq!(got, want, "case {case}: {h}x{w} tau {tau}");
    }
}

#[test]
fn identical_masks_score_one() {
    let mut rng = Rng::new(8, 0);
    for _ in 0..200 {
        let (h, w) = (1 + rng.below(10), 1 + rng.below(10));
        let m = MaskVolume::new(Shape::new(1, h, w).unwrap(), random_blob(h, w, &mut rng)).unwrap();
        assert_eq!(nsd(&m, &m, 1.0).unwrap(), 1.0);
    }
}
