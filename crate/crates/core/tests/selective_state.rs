use mmunet_core::morph_conv::Axis;
use mmunet_core::ndgrad::{Tape, Tensor};
use mmunet_core::params::InitRoot;
use mmunet_core::selective_state::{make_scan_order, morph_ssm_fuse, selective_scan, Direction, SelectiveSsm};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn axis_dir(y_axis: bool, backward: bool) -> (Axis, Direction) {
    (
        if y_axis { Axis::YExtend } else { Axis::XExtend },
        if backward { Direction::Backward } else { Direction::Forward },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scatter_inverts_gather(h in 1usize..9, w in 1usize..9, y_axis in any::<bool>(), backward in any::<bool>(), seed in any::<u64>()) {
        let (axis, dir) = axis_dir(y_axis, backward);
        let order = make_scan_order(axis, dir, h, w);
        let mut seen = vec![false; h * w];
        for &p in order.permutation() {
            prop_assert!(!seen[p]);
            seen[p] = true;
        }
        prop_assert!(seen.iter().all(|&s| s));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::<f64>::randn(&[2, 3, h, w], 1.0, &mut rng);
        let tape = Tape::new();
        let seq = order.gather(tape.constant(f.clone())).unwrap();
        prop_assert_eq!(seq.shape(), vec![2, 3, h * w]);
        let back = order.scatter(seq, h, w).unwrap().value();
        prop_assert!(back.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_alpha_fusion_is_identity(h in 1usize..7, w in 1usize..7, bidir in any::<bool>(), y_axis in any::<bool>(), seed in any::<u64>()) {
        let c = 3;
        let mut root = InitRoot::<f64>::new(seed);
        let ssm = SelectiveSsm::new(&mut root.init(), c, 4);
        let store = root.store;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let f = Tensor::<f64>::randn(&[2, c, h, w], 1.0, &mut rng);
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let (axis, _) = axis_dir(y_axis, false);
        let order = make_scan_order(axis, Direction::Forward, h, w);
        let out = morph_ssm_fuse(tape.constant(f.clone()), &order, &ssm.bind(&bound), tape.constant(Tensor::zeros(&[1])), bidir)
            .unwrap()
            .value();
        prop_assert!(out.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn row_and_column_orders() {
    let x = make_scan_order(Axis::XExtend, Direction::Forward, 2, 3);
    assert_eq!(x.permutation(), &[0, 1, 2, 3, 4, 5]);
    let y = make_scan_order(Axis::YExtend, Direction::Forward, 2, 3);
    assert_eq!(y.permutation(), &[0, 3, 1, 4, 2, 5]);
    let yb = make_scan_order(Axis::YExtend, Direction::Backward, 2, 3);
    assert_eq!(yb.permutation(), &[5, 2, 4, 1, 3, 0]);
}

#[test]
fn long_sequences_stay_bounded() {
    let (d, n, l) = (2, 4, 100_000);
    let mut root = InitRoot::<f64>::new(5);
    let ssm = SelectiveSsm::new(&mut root.init(), d, n);
    let store = root.store;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::<f64>::uniform(&[1, d, l], -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let bound = store.bind_frozen(&tape);
    let y = selective_scan(tape.constant(x), &ssm.bind(&bound)).unwrap().value();
    assert!(y.is_finite());
    let peak = y.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak < 1e3, "peak output {peak}");
}
