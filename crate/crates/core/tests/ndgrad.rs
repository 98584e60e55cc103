use mmunet_core::ndgrad::{broadcast_to, conv2d, elementwise, matmul, Elementwise, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &[f64], wt: &[f64], (b, c, h, w): (usize, usize, usize, usize), (o, k): (usize, usize), stride: usize, pad: usize) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let r = (i * stride + u) as isize - pad as isize;
                                let q = (j * stride + v) as isize - pad as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                    continue;
                                }
                                acc += wt[((oc * c + ci) * k + u) * k + v] * x[((bi * c + ci) * h + r as usize) * w + q as usize];
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_direct_loops(
        b in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[b, c, h, w], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn(&[o, c, k, k], 1.0, &mut rng);
        let tape = Tape::new();
        let y = conv2d(tape.constant(x.clone()), tape.constant(wt.clone()), stride, pad).unwrap().value();
        let want = conv_oracle(x.data(), wt.data(), (b, c, h, w), (o, k), stride, pad);
        prop_assert_eq!(y.numel(), want.len());
        for (g, e) in y.data().iter().zip(&want) {
            prop_assert!((g - e).abs() < 1e-12, "{} vs {}", g, e);
        }
    }

    #[test]
    fn implicit_broadcast_equals_materialized(seed in any::<u64>(), op in 0usize..4) {
        let kind = [Elementwise::Add, Elementwise::Sub, Elementwise::Mul, Elementwise::Div][op];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::uniform(&[2, 1, 5], 0.5, 2.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[1, 3, 1], 0.5, 2.0, &mut rng);
        let tape = Tape::new();
        let (va, vb) = (tape.param(a), tape.param(b));
        let implicit = elementwise(kind, va, Some(vb)).unwrap();
        let explicit = elementwise(kind, broadcast_to(va, &[2, 3, 5]).unwrap(), Some(broadcast_to(vb, &[2, 3, 5]).unwrap())).unwrap();
        let (vi, ve) = (implicit.value(), explicit.value());
        prop_assert_eq!(vi.shape(), ve.shape());
        prop_assert!(vi.data().iter().zip(ve.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        let gi = tape.backward(mmunet_core::ndgrad::sum(implicit)).unwrap();
        let ge = tape.backward(mmunet_core::ndgrad::sum(explicit)).unwrap();
        for v in [va, vb] {
            let (p, q) = (gi.get_or_zeros(v), ge.get_or_zeros(v));
            prop_assert!(p.iter().zip(&q).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}

#[test]
fn matmul_matches_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, k, n) = (7, 13, 5);
    let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng);
    let tape = Tape::new();
    let c = matmul(tape.constant(a.clone()), tape.constant(b.clone())).unwrap().value();
    for i in 0..m {
        for j in 0..n {
            let want: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
            assert!((c.data()[i * n + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn incompatible_shapes_are_dimension_errors() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 3]));
    assert!(matches!(elementwise(Elementwise::Add, a, Some(b)), Err(mmunet_core::Error::Dimension(_))));
    assert!(matches!(matmul(a, b), Err(mmunet_core::Error::Dimension(_))));
}
