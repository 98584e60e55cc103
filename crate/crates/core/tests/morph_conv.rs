use mmunet_core::morph_conv::{morph_coordinates, predict_offsets, Axis, KernelGeometry, OffsetField};
use mmunet_core::ndgrad::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn kernel_lengths_must_be_odd_and_at_least_three() {
    for bad in [0, 1, 2, 4, 8] {
        assert!(KernelGeometry::new(bad, Axis::XExtend).is_err());
    }
    let g = KernelGeometry::new(9, Axis::YExtend).unwrap();
    assert_eq!((g.half_span(), g.offset_slots()), (4, 8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn predicted_offsets_stay_in_unit_interval(scale in 0.1f64..1e3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = KernelGeometry::new(5, Axis::XExtend).unwrap();
        let tape = Tape::new();
        let f = tape.constant(Tensor::<f64>::randn(&[2, 3, 4, 5], scale, &mut rng));
        let w = tape.constant(Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng));
        let off = predict_offsets(f, w, geom).unwrap().values.value();
        prop_assert_eq!(off.shape(), &[2, 4, 4, 5]);
        prop_assert!(off.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn coordinates_follow_the_kernel_axis(
        k in prop::sample::select(vec![3usize, 5, 7, 9]),
        h in 1usize..6, w in 1usize..6,
        y_axis in any::<bool>(), seed in any::<u64>(),
    ) {
        let axis = if y_axis { Axis::YExtend } else { Axis::XExtend };
        let geom = KernelGeometry::new(k, axis).unwrap();
        let half = k / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = Tensor::<f64>::uniform(&[1, k - 1, h, w], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let cs = morph_coordinates(OffsetField { values: tape.constant(delta.clone()), axis }, geom).unwrap();
        let c = cs.coords.value();
        prop_assert_eq!(c.shape(), &[1, k, h, w, 2]);
        for s in 0..k {
            let step = s as f64 - half as f64;
            for i in 0..h {
                for j in 0..w {
                    let at = |d| c.data()[(((s * h) + i) * w + j) * 2 + d];
                    let (stepped, bent, along, across) = match axis {
                        Axis::XExtend => (at(0), at(1), i as f64, j as f64),
                        Axis::YExtend => (at(1), at(0), j as f64, i as f64),
                    };
                    prop_assert_eq!(stepped, along + step);
                    prop_assert!((bent - across).abs() <= step.abs() + 1e-12);
                    if s == half {
                        prop_assert_eq!(bent, across);
                    }
                    if s == half + 1 {
                        let d = delta.data()[(i * w) + j];
                        prop_assert!((bent - across - d).abs() < 1e-15);
                    }
                }
            }
        }
    }
}
