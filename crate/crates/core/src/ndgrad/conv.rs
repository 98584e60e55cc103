//! Spatial kernels on `[B, C, H, W]` feature maps.

use std::rc::Rc;

use super::parallel;
use super::{Real, Tensor, Var};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.ph as isize;
                        let line = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ii as usize * self.w..(ii as usize + 1) * self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pw as isize;
                            *v = if jj < 0 || jj >= self.w as isize { T::zero() } else { src[jj as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], gx: &mut [T]) {
        let cols = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.ph as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base = c * self.h * self.w + ii as usize * self.w;
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride + kj) as isize - self.pw as isize;
                            if jj >= 0 && jj < self.w as isize {
                                gx[base + jj as usize] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding; `padding` applies to both axes.
pub fn conv2d<'t, T: Real>(x: Var<'t, T>, weight: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
    conv2d_padded(x, weight, stride, (padding, padding))
}

/// Cross-correlation with separate row/column zero padding.
pub fn conv2d_padded<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    stride: usize,
    padding: (usize, usize),
) -> Result<Var<'t, T>> {
    let xv = x.value();
    let wv = weight.value();
    let (&[b, c, h, w], &[o, c2, kh, kw]) = (xv.shape(), wv.shape()) else {
        return Err(dim_err!("conv2d needs [B,C,H,W] and [O,C,kh,kw], got {:?} and {:?}", xv.shape(), wv.shape()));
    };
    if c != c2 {
        return Err(dim_err!("conv2d input has {c} channels, weight expects {c2}"));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(dim_err!("conv2d kernel {kh}x{kw} must have odd extents"));
    }
    if stride == 0 {
        return Err(dim_err!("conv2d stride must be positive"));
    }
    let (ph, pw) = padding;
    let (span_h, span_w) = (h + 2 * ph, w + 2 * pw);
    if span_h < kh || span_w < kw {
        return Err(dim_err!("conv2d output extent is non-positive for {h}x{w} input, {kh}x{kw} kernel"));
    }
    let geom = ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        ph,
        pw,
        oh: (span_h - kh) / stride + 1,
        ow: (span_w - kw) / stride + 1,
    };
    let (rows, cols) = (geom.rows(), geom.cols());
    let mut out = vec![T::zero(); b * o * cols];
    {
        let (xd, wd) = (xv.data(), wv.data());
        parallel::for_each_chunk(&mut out, o * cols, |bi, chunk| {
            let mut col = vec![T::zero(); rows * cols];
            geom.im2col(&xd[bi * c * h * w..(bi + 1) * c * h * w], &mut col);
            T::gemm(o, rows, cols, T::one(), wd, (rows as isize, 1), &col, (cols as isize, 1), T::zero(), chunk, (cols as isize, 1));
        });
    }
    let value = Tensor::from_parts(vec![b, o, geom.oh, geom.ow], out);
    let (need_x, need_w) = (x.requires_grad(), weight.requires_grad());
    let (keep_x, keep_w) = (Rc::clone(&xv), Rc::clone(&wv));
    Ok(x.tape().record(value, &[x, weight], move |g| {
        let (xd, wd) = (keep_x.data(), keep_w.data());
        let gw = need_w.then(|| {
            let mut gw = vec![T::zero(); o * rows];
            let mut col = vec![T::zero(); rows * cols];
            for bi in 0..b {
                geom.im2col(&xd[bi * c * h * w..(bi + 1) * c * h * w], &mut col);
                let gb = &g[bi * o * cols..(bi + 1) * o * cols];
                T::gemm(o, cols, rows, T::one(), gb, (cols as isize, 1), &col, (1, cols as isize), T::one(), &mut gw, (rows as isize, 1));
            }
            gw
        });
        let gx = need_x.then(|| {
            let mut gx = vec![T::zero(); b * c * h * w];
            parallel::for_each_chunk(&mut gx, c * h * w, |bi, chunk| {
                let mut gcol = vec![T::zero(); rows * cols];
                let gb = &g[bi * o * cols..(bi + 1) * o * cols];
                T::gemm(rows, o, cols, T::one(), wd, (1, rows as isize), gb, (cols as isize, 1), T::zero(), &mut gcol, (cols as isize, 1));
                geom.col2im(&gcol, chunk);
            });
            gx
        });
        vec![gx, gw]
    }))
}

/// Max pooling with implicit `-inf` padding.
pub fn max_pool2d<'t, T: Real>(x: Var<'t, T>, kernel: usize, stride: usize, padding: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let &[b, c, h, w] = xv.shape() else {
        return Err(dim_err!("max_pool2d needs [B,C,H,W], got {:?}", xv.shape()));
    };
    if kernel == 0 || stride == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(dim_err!("max_pool2d kernel {kernel} stride {stride} invalid for {h}x{w}"));
    }
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = T::neg_infinity();
                let mut at = usize::MAX;
                for ki in 0..kernel {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let src = base + ii as usize * w + jj as usize;
                        if xv.data()[src] > best {
                            best = xv.data()[src];
                            at = src;
                        }
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    let value = Tensor::from_parts(vec![b, c, oh, ow], out);
    let n = xv.numel();
    Ok(x.tape().record(value, &[x], move |g| {
        let mut gx = vec![T::zero(); n];
        for (&a, &gv) in arg.iter().zip(g) {
            gx[a] += gv;
        }
        vec![Some(gx)]
    }))
}

/// Linear interpolation taps for one axis (half-pixel centers, edge clamp).
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `[B, C, H, W]` to `[B, C, out_h, out_w]`; exact
/// identity when the extents already match.
pub fn resize_bilinear<'t, T: Real>(x: Var<'t, T>, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let &[b, c, h, w] = xv.shape() else {
        return Err(dim_err!("resize needs [B,C,H,W], got {:?}", xv.shape()));
    };
    if out_h == 0 || out_w == 0 {
        return Err(dim_err!("resize target {out_h}x{out_w} must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x);
    }
    let rows = Rc::new(resize_taps(h, out_h));
    let cols = Rc::new(resize_taps(w, out_w));
    let mut out = vec![T::zero(); b * c * out_h * out_w];
    let xd = xv.data();
    for plane in 0..b * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
            let fr = T::of(fr);
            for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                let fc = T::of(fc);
                let top = src[r0 * w + c0] * (T::one() - fc) + src[r0 * w + c1] * fc;
                let bot = src[r1 * w + c0] * (T::one() - fc) + src[r1 * w + c1] * fc;
                dst[i * out_w + j] = top * (T::one() - fr) + bot * fr;
            }
        }
    }
    let value = Tensor::from_parts(vec![b, c, out_h, out_w], out);
    Ok(x.tape().record(value, &[x], move |g| {
        let mut gx = vec![T::zero(); b * c * h * w];
        for plane in 0..b * c {
            let gs = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            let gd = &mut gx[plane * h * w..(plane + 1) * h * w];
            for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                let fr = T::of(fr);
                for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                    let fc = T::of(fc);
                    let gv = gs[i * out_w + j];
                    let (top, bot) = (gv * (T::one() - fr), gv * fr);
                    gd[r0 * w + c0] += top * (T::one() - fc);
                    gd[r0 * w + c1] += top * fc;
                    gd[r1 * w + c0] += bot * (T::one() - fc);
                    gd[r1 * w + c1] += bot * fc;
                }
            }
        }
        vec![Some(gx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tape;
    use rand::SeedableRng;

    /// Direct six-loop cross-correlation with zero padding.
    pub(crate) fn conv_oracle(x: &Tensor<f64>, wt: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (wt.shape()[0], wt.shape()[2], wt.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Tensor::from_fn(&[b, o, oh, ow], |flat| {
            let (bi, rest) = (flat / (o * oh * ow), flat % (o * oh * ow));
            let (oc, rest) = (rest / (oh * ow), rest % (oh * ow));
            let (oi, oj) = (rest / ow, rest % ow);
            let mut acc = 0.0;
            for ci in 0..c {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            acc += x.at(&[bi, ci, ii as usize, jj as usize]) * wt.at(&[oc, ci, ki, kj]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 - 5.5));
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        assert_eq!(conv2d(x, k, 1, 0).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = conv2d(x, k, 1, 1).unwrap().value();
        for i in 1..4 {
            for j in 1..4 {
                assert_eq!(y.at(&[0, 0, i, j]), 9.0);
            }
        }
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn random_matches_direct_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 3, 7)] {
            let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(&[4, 3, k, k], 1.0, &mut rng);
            let tape = Tape::new();
            let y = conv2d(tape.constant(x.clone()), tape.constant(wt.clone()), stride, pad).unwrap();
            assert!(y.value().max_abs_diff(&conv_oracle(&x, &wt, stride, pad)) < 1e-12);
        }
    }

    #[test]
    fn degenerate_output_is_dimension_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(Tensor::<f64>::zeros(&[1, 1, 3, 3]));
        assert!(matches!(conv2d(x, k, 1, 0), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn resize_same_extent_is_identity_and_halving_averages() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64));
        assert_eq!(resize_bilinear(x, 2, 2).unwrap().id(), x.id());
        let big = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let small = resize_bilinear(big, 2, 2).unwrap();
        assert_eq!(small.value().data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn max_pool_halves() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let y = max_pool2d(x, 3, 2, 1).unwrap();
        assert_eq!(y.value().data(), &[5.0, 7.0, 13.0, 15.0]);
    }
}
