use std::rc::Rc;

use super::parallel;
use super::{Real, Tensor, Var};
use crate::error::{dim_err, Result};

/// `[M, K] x [K, N] -> [M, N]`.
pub fn matmul<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let av = a.value();
    let bv = b.value();
    let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
        return Err(dim_err!("matmul needs rank-2 operands, got {:?} and {:?}", av.shape(), bv.shape()));
    };
    if k != k2 {
        return Err(dim_err!("matmul inner extents differ: {:?} x {:?}", av.shape(), bv.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), av.data(), (k as isize, 1), bv.data(), (n as isize, 1), T::zero(), &mut out, (n as isize, 1));
    let value = Tensor::from_parts(vec![m, n], out);
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    Ok(a.tape().record(value, &[a, b], move |g| {
        // dA = dY . B^T ; dB = A^T . dY
        let ga = need_a.then(|| {
            let mut ga = vec![T::zero(); m * k];
            T::gemm(m, n, k, T::one(), g, (n as isize, 1), bv.data(), (1, n as isize), T::zero(), &mut ga, (k as isize, 1));
            ga
        });
        let gb = need_b.then(|| {
            let mut gb = vec![T::zero(); k * n];
            T::gemm(k, m, n, T::one(), av.data(), (1, k as isize), g, (n as isize, 1), T::zero(), &mut gb, (n as isize, 1));
            gb
        });
        vec![ga, gb]
    }))
}

/// Mixes the channel axis of `x: [B, K, ...]` with `weight: [M, K]`,
/// giving `[B, M, ...]`. This is a 1x1 convolution without bias.
pub fn channel_mix<'t, T: Real>(weight: Var<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let wv = weight.value();
    let xv = x.value();
    let &[m, k] = wv.shape() else {
        return Err(dim_err!("channel_mix weight must be [M, K], got {:?}", wv.shape()));
    };
    if xv.rank() < 2 || xv.shape()[1] != k {
        return Err(dim_err!("channel_mix of {:?} by weight {:?}: channel mismatch", xv.shape(), wv.shape()));
    }
    let batch = xv.shape()[0];
    let n: usize = xv.shape()[2..].iter().product();
    let mut out_shape = xv.shape().to_vec();
    out_shape[1] = m;
    let mut out = vec![T::zero(); batch * m * n];
    {
        let (wd, xd) = (wv.data(), xv.data());
        parallel::for_each_chunk(&mut out, m * n, |b, chunk| {
            T::gemm(m, k, n, T::one(), wd, (k as isize, 1), &xd[b * k * n..(b + 1) * k * n], (n as isize, 1), T::zero(), chunk, (n as isize, 1));
        });
    }
    let value = Tensor::from_parts(out_shape, out);
    let (need_w, need_x) = (weight.requires_grad(), x.requires_grad());
    let (keep_w, keep_x) = (Rc::clone(&wv), Rc::clone(&xv));
    Ok(x.tape().record(value, &[weight, x], move |g| {
        let wd = keep_w.data();
        let xd = keep_x.data();
        let gw = need_w.then(|| {
            let mut gw = vec![T::zero(); m * k];
            for b in 0..batch {
                let gb = &g[b * m * n..(b + 1) * m * n];
                let xb = &xd[b * k * n..(b + 1) * k * n];
                T::gemm(m, n, k, T::one(), gb, (n as isize, 1), xb, (1, n as isize), T::one(), &mut gw, (k as isize, 1));
            }
            gw
        });
        let gx = need_x.then(|| {
            let mut gx = vec![T::zero(); batch * k * n];
            parallel::for_each_chunk(&mut gx, k * n, |b, chunk| {
                let gb = &g[b * m * n..(b + 1) * m * n];
                T::gemm(k, m, n, T::one(), wd, (1, k as isize), gb, (n as isize, 1), T::zero(), chunk, (n as isize, 1));
            });
            gx
        });
        vec![gw, gx]
    }))
}

/// Adds `bias: [C]` along the channel axis of `x: [B, C, ...]`.
pub fn add_bias<'t, T: Real>(x: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
    let (xv, bv) = (x.value(), bias.value());
    if xv.rank() < 2 || bv.rank() != 1 || bv.numel() != xv.shape()[1] {
        return Err(dim_err!("bias {:?} does not match channels of {:?}", bv.shape(), xv.shape()));
    }
    let c = bv.numel();
    let n: usize = xv.shape()[2..].iter().product();
    let bd = bv.data();
    let out: Vec<T> = xv.data().iter().enumerate().map(|(i, &v)| v + bd[(i / n) % c]).collect();
    let value = Tensor::from_parts(xv.shape().to_vec(), out);
    Ok(x.tape().record(value, &[x, bias], move |g| {
        let mut gb = vec![T::zero(); c];
        for (i, &v) in g.iter().enumerate() {
            gb[(i / n) % c] += v;
        }
        vec![Some(g.to_vec()), Some(gb)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tape;
    use rand::SeedableRng;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn identity_times_matrix() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.constant(Tensor::new(&[2, 2], vec![1.5, -2.0, 3.0, 4.25]).unwrap());
        assert_eq!(matmul(eye, x).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn row_times_column() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
        assert_eq!(matmul(a, b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn random_matches_triple_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let y = matmul(tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
        for (x, e) in y.value().data().iter().zip(naive(&a, &b)) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
        assert!(matches!(matmul(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn channel_mix_is_pointwise_matmul() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 2, 2, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let y = channel_mix(tape.constant(w.clone()), tape.constant(x.clone())).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 2, 2]);
        for b in 0..2 {
            for o in 0..3 {
                for p in 0..4 {
                    let e: f64 = (0..2).map(|c| w.data()[o * 2 + c] * x.data()[b * 8 + c * 4 + p]).sum();
                    assert!((y.value().data()[b * 12 + o * 4 + p] - e).abs() < 1e-12);
                }
            }
        }
    }
}
