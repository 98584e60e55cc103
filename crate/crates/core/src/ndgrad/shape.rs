//! Reshaping, concatenation, gathers and reductions.

use std::rc::Rc;

use super::tensor::numel_of;
use super::{Real, Tensor, Var};
use crate::error::{dim_err, Result};

pub fn reshape<'t, T: Real>(x: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let xv = x.value();
    if numel_of(shape) != xv.numel() {
        return Err(dim_err!("cannot reshape {:?} into {shape:?}", xv.shape()));
    }
    if xv.shape() == shape {
        return Ok(x);
    }
    let value = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
    Ok(x.tape().record(value, &[x], |g| vec![Some(g.to_vec())]))
}

/// Joins tensors along `dim`; all other extents must agree.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>], dim: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if dim >= base.len() {
        return Err(dim_err!("concat axis {dim} out of range for {base:?}"));
    }
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != dim && a != b) {
            return Err(dim_err!("concat of {base:?} with {s:?} along {dim}"));
        }
    }
    let outer: usize = base[..dim].iter().product();
    let inner: usize = base[dim + 1..].iter().product();
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[dim] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base;
    shape[dim] = total / inner;
    let value = Tensor::from_parts(shape, out);
    Ok(first.tape().record(value, parts, move |g| {
        let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
        let mut at = 0;
        for _ in 0..outer {
            for (gr, &w) in grads.iter_mut().zip(&widths) {
                gr.extend_from_slice(&g[at..at + w]);
                at += w;
            }
        }
        grads.into_iter().map(Some).collect()
    }))
}

/// `out[.., j] = x[.., index[j]]` along the last axis.
pub fn gather_last<'t, T: Real>(x: Var<'t, T>, index: Rc<Vec<usize>>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let src = *xv.shape().last().ok_or_else(|| dim_err!("gather on a scalar"))?;
    if let Some(&bad) = index.iter().find(|&&i| i >= src) {
        return Err(dim_err!("gather index {bad} out of range {src}"));
    }
    let rows = xv.numel() / src;
    let dst = index.len();
    let mut out = Vec::with_capacity(rows * dst);
    for r in 0..rows {
        let row = &xv.data()[r * src..(r + 1) * src];
        out.extend(index.iter().map(|&i| row[i]));
    }
    let mut shape = xv.shape().to_vec();
    *shape.last_mut().unwrap() = dst;
    let value = Tensor::from_parts(shape, out);
    Ok(x.tape().record(value, &[x], move |g| {
        let mut gx = vec![T::zero(); rows * src];
        for r in 0..rows {
            for (j, &i) in index.iter().enumerate() {
                gx[r * src + i] += g[r * dst + j];
            }
        }
        vec![Some(gx)]
    }))
}

/// Keeps every `stride`-th row and column of `[B, C, H, W]`.
pub fn subsample<'t, T: Real>(x: Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let &[b, c, h, w] = xv.shape() else {
        return Err(dim_err!("subsample needs [B, C, H, W], got {:?}", xv.shape()));
    };
    if stride == 0 {
        return Err(dim_err!("subsample stride must be positive"));
    }
    if stride == 1 {
        return Ok(x);
    }
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let p = &xv.data()[plane * h * w..(plane + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                out.push(p[i * stride * w + j * stride]);
            }
        }
    }
    let value = Tensor::from_parts(vec![b, c, oh, ow], out);
    Ok(x.tape().record(value, &[x], move |g| {
        let mut gx = vec![T::zero(); b * c * h * w];
        for plane in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    gx[plane * h * w + i * stride * w + j * stride] = g[plane * oh * ow + i * ow + j];
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Sum of all elements as a scalar.
pub fn sum<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let xv = x.value();
    let n = xv.numel();
    let value = Tensor::scalar(xv.sum());
    x.tape().record(value, &[x], move |g| vec![Some(vec![g[0]; n])])
}

/// Mean of all elements as a scalar.
pub fn mean<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let n = x.value().numel();
    sum(x).scale(1.0 / n as f64)
}

fn split_axis(shape: &[usize], dim: usize) -> Result<(usize, usize, usize)> {
    if dim >= shape.len() {
        return Err(dim_err!("axis {dim} out of range for {shape:?}"));
    }
    Ok((shape[..dim].iter().product(), shape[dim], shape[dim + 1..].iter().product()))
}

/// Mean along `dim`, keeping it as an extent of 1.
pub fn mean_dim<'t, T: Real>(x: Var<'t, T>, dim: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (outer, len, inner) = split_axis(xv.shape(), dim)?;
    let scale = T::one() / T::of(len as f64);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let row = &xv.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    let mut shape = xv.shape().to_vec();
    shape[dim] = 1;
    let value = Tensor::from_parts(shape, out);
    Ok(x.tape().record(value, &[x], move |g| {
        let mut gx = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    gx[(o * len + k) * inner + i] = g[o * inner + i] * scale;
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Maximum along `dim`, keeping it as an extent of 1. Ties route the
/// gradient to the first maximal element.
pub fn max_dim<'t, T: Real>(x: Var<'t, T>, dim: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (outer, len, inner) = split_axis(xv.shape(), dim)?;
    let mut out = vec![T::neg_infinity(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                let src = (o * len + k) * inner + i;
                let v = xv.data()[src];
                if v > out[o * inner + i] {
                    out[o * inner + i] = v;
                    arg[o * inner + i] = src;
                }
            }
        }
    }
    let mut shape = xv.shape().to_vec();
    shape[dim] = 1;
    let value = Tensor::from_parts(shape, out);
    let n = xv.numel();
    Ok(x.tape().record(value, &[x], move |g| {
        let mut gx = vec![T::zero(); n];
        for (&a, &gv) in arg.iter().zip(g) {
            gx[a] += gv;
        }
        vec![Some(gx)]
    }))
}
