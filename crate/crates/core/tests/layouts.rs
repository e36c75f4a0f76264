//! Scan layout invariants over many grid sizes.

mod common;

use pmsr_core::layouts::{build_cardinal_layout, build_window_layout, gather, scatter, Axis, Direction};
use pmsr_tensor::{SplitMix64, Tensor};
use proptest::prelude::*;

fn axis_dir() -> impl Strategy<Value = (Axis, Direction)> {
    (any::<bool>(), any::<bool>()).prop_map(|(v, r)| {
        (
            if v { Axis::Vertical } else { Axis::Horizontal },
            if r { Direction::Reverse } else { Direction::Forward },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_layouts_are_contiguous_bijections(
        wexp in 1u32..=5, nh in 1usize..=4, nw in 1usize..=4, (axis, dir) in axis_dir()
    ) {
        let window = 2usize.pow(wexp);
        let (h, w) = (window * nh, window * nw);
        prop_assume!(h <= 64 && w <= 64);
        let l = build_window_layout(h, w, window, axis, dir).unwrap();
        prop_assert!(common::check_bijection(&l).is_ok());
        prop_assert!(common::check_contiguity(&l, window).is_ok());
        let rev = build_window_layout(h, w, window, axis, dir.flip()).unwrap();
        let mut back = rev.forward.clone();
        back.reverse();
        prop_assert_eq!(back, l.forward);
    }

    #[test]
    fn gather_scatter_round_trip(h in 1usize..=12, w in 1usize..=12, which in 0usize..4, seed in any::<u64>()) {
        let x = Tensor::rand_uniform(&[2, 3, h, w], -1.0, 1.0, &mut SplitMix64::new(seed));
        let l = build_cardinal_layout(h, w, which).unwrap();
        let seq = gather(&x, &l).unwrap();
        let back = scatter(&seq, &l, h, w).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn one_hot_lands_at_inverse(g in 0usize..64, which in 0usize..4) {
        let x = Tensor::from_fn(&[1, 1, 8, 8], |i| if i == g { 1.0 } else { 0.0 });
        let l = build_cardinal_layout(8, 8, which).unwrap();
        let seq = gather(&x, &l).unwrap();
        let pos = seq.data().iter().position(|&v| v == 1.0).unwrap();
        prop_assert_eq!(pos, l.inverse[g]);
    }

    #[test]
    fn schedule_covers_every_window_of_four(start in 0usize..1000) {
        prop_assert!(common::schedule_covers(start));
    }
}

#[test]
fn exhaustive_sweep_up_to_16() {
    assert!(common::layout_sweep(16).unwrap() > 1000);
}
