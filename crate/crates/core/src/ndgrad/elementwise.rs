//! Pointwise unary and broadcasting binary operations.

use std::rc::Rc;

use super::{Real, Tensor, Var};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Relu,
    Softplus,
    Neg,
    Square,
    /// Multiplication by a constant.
    Scale(f64),
    /// Addition of a constant.
    Shift(f64),
    /// Clamp to `[lo, hi]`; the gradient is passed only strictly inside.
    Clamp(f64, f64),
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul | Self::Div)
    }
}

/// Applies `kind` to `a` (and `b` for binary kinds).
pub fn elementwise<'t, T: Real>(kind: Elementwise, a: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    match (kind.is_binary(), b) {
        (true, Some(b)) => binary(kind, a, b),
        (true, None) => Err(dim_err!("{kind:?} needs two operands")),
        (false, None) => Ok(unary(kind, a)),
        (false, Some(_)) => Err(dim_err!("{kind:?} takes one operand")),
    }
}

/// Trailing-dimension broadcast of two shapes; only explicit 1s expand.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Flat source index of every output element for a broadcast operand.
fn broadcast_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

/// Sums `g` (laid out as `out`) down to the operand layout given by `map`.
fn reduce_to<T: Real>(g: &[T], map: Option<&[usize]>, len: usize) -> Vec<T> {
    match map {
        None => g.to_vec(),
        Some(map) => {
            let mut acc = vec![T::zero(); len];
            for (&m, &v) in map.iter().zip(g) {
                acc[m] += v;
            }
            acc
        }
    }
}

/// Materializes `x` at the broadcast shape `shape`.
pub fn broadcast_to<'t, T: Real>(x: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let xv = x.value();
    let out_shape = broadcast_shape(xv.shape(), shape)?;
    if out_shape != shape {
        return Err(dim_err!("{:?} cannot be broadcast to {shape:?}", xv.shape()));
    }
    if xv.shape() == shape {
        return Ok(x);
    }
    let map = broadcast_map(xv.shape(), shape);
    let data = map.iter().map(|&i| xv.data()[i]).collect();
    let len = xv.numel();
    let value = Tensor::from_parts(shape.to_vec(), data);
    Ok(x.tape().record(value, &[x], move |g| vec![Some(reduce_to(g, Some(&map), len))]))
}

fn binary<'t, T: Real>(kind: Elementwise, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let av = a.value();
    let bv = b.value();
    let out_shape = broadcast_shape(av.shape(), bv.shape())?;
    let map_a = (av.shape() != out_shape.as_slice()).then(|| broadcast_map(av.shape(), &out_shape));
    let map_b = (bv.shape() != out_shape.as_slice()).then(|| broadcast_map(bv.shape(), &out_shape));
    let n: usize = out_shape.iter().product();
    let f = |x: T, y: T| match kind {
        Elementwise::Add => x + y,
        Elementwise::Sub => x - y,
        Elementwise::Mul => x * y,
        Elementwise::Div => x / y,
        _ => unreachable!(),
    };
    let (ad, bd) = (av.data(), bv.data());
    let data: Vec<T> = match (&map_a, &map_b) {
        (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        _ => (0..n)
            .map(|i| {
                let x = ad[map_a.as_ref().map_or(i, |m| m[i])];
                let y = bd[map_b.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect(),
    };
    let value = Tensor::from_parts(out_shape, data);
    let tape = a.tape();
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    let (len_a, len_b) = (av.numel(), bv.numel());
    let keep_a = matches!(kind, Elementwise::Mul | Elementwise::Div).then(|| Rc::clone(&av));
    let keep_b = matches!(kind, Elementwise::Mul | Elementwise::Div).then(|| Rc::clone(&bv));
    Ok(tape.record(value, &[a, b], move |g| {
        let at = |i: usize| keep_a.as_ref().unwrap().data()[map_a.as_ref().map_or(i, |m| m[i])];
        let bt = |i: usize| keep_b.as_ref().unwrap().data()[map_b.as_ref().map_or(i, |m| m[i])];
        let ga: Option<Vec<T>> = need_a.then(|| {
            let local: Vec<T> = match kind {
                Elementwise::Add | Elementwise::Sub => g.to_vec(),
                Elementwise::Mul => g.iter().enumerate().map(|(i, &v)| v * bt(i)).collect(),
                Elementwise::Div => g.iter().enumerate().map(|(i, &v)| v / bt(i)).collect(),
                _ => unreachable!(),
            };
            reduce_to(&local, map_a.as_deref(), len_a)
        });
        let gb: Option<Vec<T>> = need_b.then(|| {
            let local: Vec<T> = match kind {
                Elementwise::Add => g.to_vec(),
                Elementwise::Sub => g.iter().map(|&v| -v).collect(),
                Elementwise::Mul => g.iter().enumerate().map(|(i, &v)| v * at(i)).collect(),
                Elementwise::Div => g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let y = bt(i);
                        -v * at(i) / (y * y)
                    })
                    .collect(),
                _ => unreachable!(),
            };
            reduce_to(&local, map_b.as_deref(), len_b)
        });
        vec![ga, gb]
    }))
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus_scalar<T: Real>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn unary<'t, T: Real>(kind: Elementwise, a: Var<'t, T>) -> Var<'t, T> {
    let av = a.value();
    let f = |x: T| -> T {
        match kind {
            Elementwise::Sigmoid => sigmoid_scalar(x),
            Elementwise::Tanh => x.tanh(),
            Elementwise::Exp => x.exp(),
            Elementwise::Ln => x.ln(),
            Elementwise::Relu => x.max(T::zero()),
            Elementwise::Softplus => softplus_scalar(x),
            Elementwise::Neg => -x,
            Elementwise::Square => x * x,
            Elementwise::Scale(c) => x * T::of(c),
            Elementwise::Shift(c) => x + T::of(c),
            Elementwise::Clamp(lo, hi) => x.max(T::of(lo)).min(T::of(hi)),
            _ => unreachable!(),
        }
    };
    let data: Vec<T> = av.data().iter().map(|&x| f(x)).collect();
    let value = Tensor::from_parts(av.shape().to_vec(), data);
    let out_keep = matches!(kind, Elementwise::Sigmoid | Elementwise::Tanh | Elementwise::Exp)
        .then(|| value.data().to_vec());
    let in_keep = Rc::clone(&av);
    a.tape().record(value, &[a], move |g| {
        let x = in_keep.data();
        let grad: Vec<T> = match kind {
            Elementwise::Sigmoid => {
                let y = out_keep.as_ref().unwrap();
                g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect()
            }
            Elementwise::Tanh => {
                let y = out_keep.as_ref().unwrap();
                g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect()
            }
            Elementwise::Exp => {
                let y = out_keep.as_ref().unwrap();
                g.iter().zip(y).map(|(&g, &y)| g * y).collect()
            }
            Elementwise::Ln => g.iter().zip(x).map(|(&g, &x)| g / x).collect(),
            Elementwise::Relu => g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect(),
            Elementwise::Softplus => g.iter().zip(x).map(|(&g, &x)| g * sigmoid_scalar(x)).collect(),
            Elementwise::Neg => g.iter().map(|&g| -g).collect(),
            Elementwise::Square => g.iter().zip(x).map(|(&g, &x)| g * (x + x)).collect(),
            Elementwise::Scale(c) => g.iter().map(|&g| g * T::of(c)).collect(),
            Elementwise::Shift(_) => g.to_vec(),
            Elementwise::Clamp(lo, hi) => g
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::of(lo) && x < T::of(hi) { g } else { T::zero() })
                .collect(),
            _ => unreachable!(),
        };
        vec![Some(grad)]
    })
}

impl<'t, T: Real> Var<'t, T> {
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(Elementwise::Add, self, other)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(Elementwise::Sub, self, other)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(Elementwise::Mul, self, other)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        binary(Elementwise::Div, self, other)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        unary(Elementwise::Sigmoid, self)
    }

    pub fn tanh(self) -> Var<'t, T> {
        unary(Elementwise::Tanh, self)
    }

    pub fn exp(self) -> Var<'t, T> {
        unary(Elementwise::Exp, self)
    }

    pub fn ln(self) -> Var<'t, T> {
        unary(Elementwise::Ln, self)
    }

    pub fn relu(self) -> Var<'t, T> {
        unary(Elementwise::Relu, self)
    }

    pub fn softplus(self) -> Var<'t, T> {
        unary(Elementwise::Softplus, self)
    }

    pub fn neg(self) -> Var<'t, T> {
        unary(Elementwise::Neg, self)
    }

    pub fn square(self) -> Var<'t, T> {
        unary(Elementwise::Square, self)
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        unary(Elementwise::Scale(c), self)
    }

    pub fn shift(self, c: f64) -> Var<'t, T> {
        unary(Elementwise::Shift(c), self)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        unary(Elementwise::Clamp(lo, hi), self)
    }
}
