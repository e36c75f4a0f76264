//! Fused selective scan against the naive recurrence.

use pmsr_core::ssm::{geometric_series_deviation, selective_scan, selective_scan_reference, ScanInstance};
use pmsr_tensor::{SplitMix64, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_matches_reference(seed in any::<u64>()) {
        let inst = ScanInstance::random(&mut SplitMix64::new(seed));
        prop_assert!(inst.deviation().unwrap() < 1e-8);
    }

    #[test]
    fn geometric_series(a in -4.0f64..-0.01, delta in 0.001f64..1.0, len in 1usize..64) {
        prop_assert!(geometric_series_deviation(a, delta, len).unwrap() < 1e-10);
    }

    #[test]
    fn zero_input_gives_zero_output(seed in any::<u64>()) {
        let ScanInstance { u, delta: dt, a_log: a, b, c, d_skip: d } = ScanInstance::random(&mut SplitMix64::new(seed));
        let zero = Tensor::zeros(u.shape());
        let y = selective_scan(&zero, &dt, &a, &b, &c, &d).unwrap();
        prop_assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_is_causal(seed in any::<u64>(), cut in 0usize..64) {
        let ScanInstance { u, delta: dt, a_log: a, b, c, d_skip: d } = ScanInstance::random(&mut SplitMix64::new(seed));
        let (bs, l, dim) = u.dims3().unwrap();
        let cut = cut % l;
        // perturbing steps after `cut` leaves outputs up to `cut` unchanged
        let mut rng = SplitMix64::new(seed ^ 1);
        let v: Vec<f64> = u.data().iter().enumerate()
            .map(|(i, &x)| if (i / dim) % l > cut { x + rng.uniform(-1.0, 1.0) } else { x })
            .collect();
        let u2 = Tensor::new(v, u.shape()).unwrap();
        let y1 = selective_scan_reference(&u, &dt, &a, &b, &c, &d).unwrap();
        let y2 = selective_scan(&u2, &dt, &a, &b, &c, &d).unwrap();
        for bi in 0..bs {
            for t in 0..=cut {
                for ch in 0..dim {
                    let i = (bi * l + t) * dim + ch;
                    prop_assert!((y1.data()[i] - y2.data()[i]).abs() < 1e-8);
                }
            }
        }
    }
}
