//! Selective state-space scans and the MMC layer.
//!
//! A diagonal continuous-time system `h' = a h + B x`, `y = C h + d x` is
//! discretized per step by zero-order hold with an input-dependent step
//! `Δ_t = softplus(W_Δ x_t + b_Δ)`. `B_t` and `C_t` are linear in `x_t`.
//! Feature maps are flattened into sequences by a [`ScanOrder`] before the
//! scan and scattered back afterwards. Sequences are stored channel-major,
//! `[B, D, L]`.

use std::rc::Rc;

use crate::error::{contract_err, dim_err, Result};
use crate::morph_conv::{axis_aggregate, bilinear_sample, morph_coordinates, predict_offsets, Axis, KernelGeometry};
use crate::ndgrad::{add_bias, channel_mix, concat, gather_last, reshape, Real, Tensor, Var};
use crate::params::{Bound, Init, ParamId};

/// Per-step factors of the zero-order hold: `a_bar = exp(Δ a)` and
/// `phi = (exp(Δ a) - 1) / a`, so that `b_bar = phi B`.
fn zoh<T: Real>(a: T, dt: T) -> (T, T) {
    let z = dt * a;
    let ab = z.exp();
    let phi = if a.abs() < T::of(1e-8) { dt } else { z.exp_m1() / a };
    (ab, phi)
}

/// `d phi / d a` for `phi = (exp(Δ a) - 1) / a`.
fn dphi_da<T: Real>(a: T, dt: T) -> T {
    let z = dt * a;
    if z.abs() < T::of(0.1) {
        // Δ² Σ_{k≥1} k z^{k-1} / (k+1)!
        let mut term = T::one();
        let mut fact = T::one();
        let mut acc = T::zero();
        for k in 1..=9 {
            fact *= T::of((k + 1) as f64);
            acc += T::of(k as f64) * term / fact;
            term *= z;
        }
        dt * dt * acc
    } else {
        (dt * a * z.exp() - z.exp_m1()) / (a * a)
    }
}

/// Zero-order-hold discretization of one step: returns `a_bar` per state and
/// `b_bar = ((exp(Δ a) - 1) / a) B` per state.
pub fn discretize<T: Real>(a: &[T], b: &[T], delta: T) -> Result<(Vec<T>, Vec<T>)> {
    if !(delta > T::zero()) {
        return Err(contract_err!("discretization step must be positive, got {delta}"));
    }
    if a.len() != b.len() {
        return Err(dim_err!("state matrix has {} entries, B has {}", a.len(), b.len()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&an, &bn)| {
            let (ab, phi) = zoh(an, delta);
            (ab, phi * bn)
        })
        .unzip())
}

/// Core recurrence over explicit per-step quantities.
///
/// `x, delta: [B, D, L]`, `a: [D, N]`, `b, c: [B, N, L]`; returns
/// `y_t = <C_t, h_t>` with `h_t = a_bar_t h_{t-1} + b_bar_t x_t`, `h_0 = 0`.
pub fn scan_core<'t, T: Real>(
    x: Var<'t, T>,
    delta: Var<'t, T>,
    a: Var<'t, T>,
    b: Var<'t, T>,
    c: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (xv, dv, av, bv, cv) = (x.value(), delta.value(), a.value(), b.value(), c.value());
    let &[nb, d, l] = xv.shape() else {
        return Err(dim_err!("scan input must be [B, D, L], got {:?}", xv.shape()));
    };
    let &[d2, n] = av.shape() else {
        return Err(dim_err!("state matrix must be [D, N], got {:?}", av.shape()));
    };
    if dv.shape() != xv.shape() || d2 != d || bv.shape() != [nb, n, l] || cv.shape() != [nb, n, l] {
        return Err(dim_err!(
            "scan operands disagree: x {:?}, delta {:?}, a {:?}, b {:?}, c {:?}",
            xv.shape(),
            dv.shape(),
            av.shape(),
            bv.shape(),
            cv.shape()
        ));
    }
    // hidden states per (batch, channel): [L, N]
    let mut states = vec![T::zero(); nb * d * l * n];
    let mut y = vec![T::zero(); nb * d * l];
    {
        let (xd, dd, ad, bd, cd) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data());
        let mut hs = vec![T::zero(); n];
        for bi in 0..nb {
            for ch in 0..d {
                let row = (bi * d + ch) * l;
                let st = &mut states[row * n..(row + l) * n];
                hs.iter_mut().for_each(|h| *h = T::zero());
                for t in 0..l {
                    let (xt, dt) = (xd[row + t], dd[row + t]);
                    let mut acc = T::zero();
                    for s in 0..n {
                        let (ab, phi) = zoh(ad[ch * n + s], dt);
                        let h = ab * hs[s] + phi * bd[(bi * n + s) * l + t] * xt;
                        hs[s] = h;
                        st[t * n + s] = h;
                        acc += cd[(bi * n + s) * l + t] * h;
                    }
                    y[row + t] = acc;
                }
            }
        }
    }
    let value = Tensor::from_parts(vec![nb, d, l], y);
    let parents = [x, delta, a, b, c];
    let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
    Ok(x.tape().record(value, &parents, move |gy| {
        let (xd, dd, ad, bd, cd) = (xv.data(), dv.data(), av.data(), bv.data(), cv.data());
        let mut gx = vec![T::zero(); nb * d * l];
        let mut gdt = vec![T::zero(); nb * d * l];
        let mut ga = vec![T::zero(); d * n];
        let mut gb = vec![T::zero(); nb * n * l];
        let mut gc = vec![T::zero(); nb * n * l];
        let mut carry = vec![T::zero(); n];
        for bi in 0..nb {
            for ch in 0..d {
                let row = (bi * d + ch) * l;
                let st = &states[row * n..(row + l) * n];
                carry.iter_mut().for_each(|v| *v = T::zero());
                for t in (0..l).rev() {
                    let (xt, dt, g) = (xd[row + t], dd[row + t], gy[row + t]);
                    for s in 0..n {
                        let at = (bi * n + s) * l + t;
                        let an = ad[ch * n + s];
                        let (ab, phi) = zoh(an, dt);
                        let h = st[t * n + s];
                        let h_prev = if t > 0 { st[(t - 1) * n + s] } else { T::zero() };
                        gc[at] += g * h;
                        let gh = g * cd[at] + carry[s];
                        let u = bd[at] * xt;
                        let g_ab = gh * h_prev;
                        let g_phi = gh * u;
                        let gu = gh * phi;
                        gx[row + t] += gu * bd[at];
                        gb[at] += gu * xt;
                        gdt[row + t] += g_ab * ab * an + g_phi * ab;
                        ga[ch * n + s] += g_ab * ab * dt + g_phi * dphi_da(an, dt);
                        carry[s] = gh * ab;
                    }
                }
            }
        }
        let grads = [gx, gdt, ga, gb, gc];
        grads.into_iter().zip(&needs).map(|(g, &need)| need.then_some(g)).collect()
    }))
}

/// Bound parameters of one selective scan over `D` channels with `N` states.
#[derive(Clone, Copy, Debug)]
pub struct SsmParams<'t, T> {
    /// `[D, N]`; the state matrix is `a = -exp(a_log)`, strictly negative.
    pub a_log: Var<'t, T>,
    /// `[N, D]`
    pub b_proj: Var<'t, T>,
    /// `[N, D]`
    pub c_proj: Var<'t, T>,
    /// `[D, D]`
    pub delta_proj: Var<'t, T>,
    /// `[D]`
    pub delta_bias: Var<'t, T>,
    /// `[D]`
    pub d_skip: Var<'t, T>,
}

impl<'t, T: Real> SsmParams<'t, T> {
    pub fn state_dim(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.a_log.shape()[0]
    }
}

/// Parameter handles of a selective scan inside a
/// [`ParamStore`](crate::params::ParamStore).
#[derive(Clone, Copy, Debug)]
pub struct SelectiveSsm {
    a_log: ParamId,
    b_proj: ParamId,
    c_proj: ParamId,
    delta_proj: ParamId,
    delta_bias: ParamId,
    d_skip: ParamId,
}

impl SelectiveSsm {
    /// `a` is initialized log-spaced over `[-1, -N]` for every channel and the
    /// initial step is about 0.1.
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, state_dim: usize) -> Self {
        let (d, n) = (channels, state_dim);
        let a_log = Tensor::from_fn(&[d, n], |i| {
            let s = i % n;
            let frac = if n > 1 { s as f64 / (n - 1) as f64 } else { 0.0 };
            T::of(frac * (n as f64).ln())
        });
        let std = 1.0 / (d as f64).sqrt();
        Self {
            a_log: init.tensor("a_log", a_log),
            b_proj: init.normal("b_proj", &[n, d], std),
            c_proj: init.normal("c_proj", &[n, d], std),
            delta_proj: init.normal("delta_proj", &[d, d], 0.1 * std),
            delta_bias: init.full("delta_bias", &[d], (0.1f64).exp_m1().ln()),
            d_skip: init.full("d_skip", &[d], 1.0),
        }
    }

    pub fn bind<'t, T: Real>(&self, bound: &Bound<'t, T>) -> SsmParams<'t, T> {
        SsmParams {
            a_log: bound.get(self.a_log),
            b_proj: bound.get(self.b_proj),
            c_proj: bound.get(self.c_proj),
            delta_proj: bound.get(self.delta_proj),
            delta_bias: bound.get(self.delta_bias),
            d_skip: bound.get(self.d_skip),
        }
    }
}

/// Selective scan `Ma(x)` of `x: [B, D, L]`.
pub fn selective_scan<'t, T: Real>(x: Var<'t, T>, p: &SsmParams<'t, T>) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != p.channels() {
        return Err(dim_err!("scan of {shape:?} with a {}-channel model", p.channels()));
    }
    let d = shape[1];
    let delta = add_bias(channel_mix(p.delta_proj, x)?, p.delta_bias)?.softplus();
    let b = channel_mix(p.b_proj, x)?;
    let c = channel_mix(p.c_proj, x)?;
    let a = p.a_log.exp().neg();
    let y = scan_core(x, delta, a, b, c)?;
    y.add(x.mul(reshape(p.d_skip, &[d, 1])?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Bijection from sequence step to flat spatial index `row * W + col`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    permutation: Rc<Vec<usize>>,
    direction: Direction,
}

impl ScanOrder {
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn reversed(&self) -> Self {
        let mut p = self.permutation.as_ref().clone();
        p.reverse();
        Self {
            permutation: Rc::new(p),
            direction: match self.direction {
                Direction::Forward => Direction::Backward,
                Direction::Backward => Direction::Forward,
            },
        }
    }

    /// Flat spatial index to sequence step.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (t, &p) in self.permutation.iter().enumerate() {
            inv[p] = t;
        }
        inv
    }

    /// Flattens `[B, C, H, W]` into `[B, C, L]` in scan order.
    pub fn gather<'t, T: Real>(&self, f: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = f.shape();
        let &[b, c, h, w] = s.as_slice() else {
            return Err(dim_err!("scan gather needs [B, C, H, W], got {s:?}"));
        };
        if h * w != self.len() {
            return Err(dim_err!("scan order of length {} for a {h}x{w} map", self.len()));
        }
        let flat = reshape(f, &[b, c, h * w])?;
        if self.is_identity() {
            return Ok(flat);
        }
        gather_last(flat, Rc::clone(&self.permutation))
    }

    /// Inverse of [`gather`](Self::gather).
    pub fn scatter<'t, T: Real>(&self, seq: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
        let s = seq.shape();
        let &[b, c, l] = s.as_slice() else {
            return Err(dim_err!("scan scatter needs [B, C, L], got {s:?}"));
        };
        if l != h * w || l != self.len() {
            return Err(dim_err!("scatter of length {l} onto {h}x{w}"));
        }
        let spatial = if self.is_identity() {
            seq
        } else {
            gather_last(seq, Rc::new(self.inverse()))?
        };
        reshape(spatial, &[b, c, h, w])
    }

    fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }
}

/// Row-major traversal for [`Axis::XExtend`], column-major for
/// [`Axis::YExtend`]; [`Direction::Backward`] reverses it.
pub fn make_scan_order(axis: Axis, direction: Direction, height: usize, width: usize) -> ScanOrder {
    let mut p: Vec<usize> = match axis {
        Axis::XExtend => (0..height * width).collect(),
        Axis::YExtend => (0..width).flat_map(|j| (0..height).map(move |i| i * width + j)).collect(),
    };
    if direction == Direction::Backward {
        p.reverse();
    }
    ScanOrder {
        permutation: Rc::new(p),
        direction,
    }
}

/// `f + alpha * m`, returning `f` bitwise when `alpha` is zero.
fn residual_scale<'t, T: Real>(f: Var<'t, T>, m: Var<'t, T>, alpha: Var<'t, T>) -> Result<Var<'t, T>> {
    let (fv, mv, av) = (f.value(), m.value(), alpha.value());
    if fv.shape() != mv.shape() || av.numel() != 1 {
        return Err(dim_err!("residual of {:?} with {:?} scaled by {:?}", fv.shape(), mv.shape(), av.shape()));
    }
    let a = av.data()[0];
    let out = if a == T::zero() {
        fv.data().to_vec()
    } else {
        fv.data().iter().zip(mv.data()).map(|(&x, &y)| x + a * y).collect()
    };
    let value = Tensor::from_parts(fv.shape().to_vec(), out);
    Ok(f.tape().record(value, &[f, m, alpha], move |g| {
        let gm = g.iter().map(|&v| a * v).collect();
        let ga = g.iter().zip(mv.data()).map(|(&v, &y)| v * y).sum();
        vec![Some(g.to_vec()), Some(gm), Some(vec![ga])]
    }))
}

/// `alpha * Ma(f flattened by order) + f`, optionally averaging the scan
/// with its reverse.
pub fn morph_ssm_fuse<'t, T: Real>(
    f: Var<'t, T>,
    order: &ScanOrder,
    params: &SsmParams<'t, T>,
    alpha: Var<'t, T>,
    bidirectional: bool,
) -> Result<Var<'t, T>> {
    let s = f.shape();
    let &[_, _, h, w] = s.as_slice() else {
        return Err(dim_err!("morph_ssm_fuse needs [B, C, H, W], got {s:?}"));
    };
    let scan = |o: &ScanOrder| -> Result<Var<'t, T>> {
        let seq = o.gather(f)?;
        o.scatter(selective_scan(seq, params)?, h, w)
    };
    let mut m = scan(order)?;
    if bidirectional {
        m = m.add(scan(&order.reversed())?)?.scale(0.5);
    }
    residual_scale(f, m, alpha)
}

/// Dual-axis morph convolution with state-space fusion and a channel
/// projection, used in place of every pointwise convolution.
#[derive(Clone, Debug)]
pub struct MmcLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_len: usize,
    pub bidirectional: bool,
    offset_x: ParamId,
    offset_y: ParamId,
    kernel_x: ParamId,
    kernel_y: ParamId,
    ssm_x: SelectiveSsm,
    ssm_y: SelectiveSsm,
    alpha: ParamId,
    proj: ParamId,
    proj_bias: ParamId,
}

impl MmcLayer {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel_len: usize,
        state_dim: usize,
        bidirectional: bool,
    ) -> Result<Self> {
        KernelGeometry::new(kernel_len, Axis::XExtend)?;
        let (ci, co, k) = (in_channels, out_channels, kernel_len);
        Ok(Self {
            in_channels,
            out_channels,
            kernel_len,
            bidirectional,
            offset_x: init.zeros("offset_x", &[k - 1, ci]),
            offset_y: init.zeros("offset_y", &[k - 1, ci]),
            kernel_x: init.he("kernel_x", &[co, ci, k], ci * k),
            kernel_y: init.he("kernel_y", &[co, ci, k], ci * k),
            ssm_x: SelectiveSsm::new(&mut init.scope("ssm_x"), co, state_dim),
            ssm_y: SelectiveSsm::new(&mut init.scope("ssm_y"), co, state_dim),
            alpha: init.zeros("alpha", &[1]),
            proj: init.he("proj", &[co, 2 * co], 2 * co),
            proj_bias: init.zeros("proj_bias", &[co]),
        })
    }

    fn axis_view<'t, T: Real>(
        &self,
        bound: &Bound<'t, T>,
        x: Var<'t, T>,
        axis: Axis,
        alpha: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let geom = KernelGeometry::new(self.kernel_len, axis)?;
        let (offset, kernel, ssm) = match axis {
            Axis::XExtend => (self.offset_x, self.kernel_x, &self.ssm_x),
            Axis::YExtend => (self.offset_y, self.kernel_y, &self.ssm_y),
        };
        let field = predict_offsets(x, bound.get(offset), geom)?;
        let coords = morph_coordinates(field, geom)?;
        let view = axis_aggregate(bilinear_sample(x, coords)?, bound.get(kernel))?;
        let s = view.shape();
        let order = make_scan_order(axis, Direction::Forward, s[2], s[3]);
        morph_ssm_fuse(view, &order, &ssm.bind(bound), alpha, self.bidirectional)
    }

    pub fn forward<'t, T: Real>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        mmc_forward(x, self, bound)
    }
}

/// `proj (view_x || view_y) + bias` for `x: [B, C_in, H, W]`.
pub fn mmc_forward<'t, T: Real>(x: Var<'t, T>, layer: &MmcLayer, bound: &Bound<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != layer.in_channels {
        return Err(dim_err!("MMC layer expects {} input channels, got {s:?}", layer.in_channels));
    }
    let alpha = bound.get(layer.alpha);
    let vx = layer.axis_view(bound, x, Axis::XExtend, alpha)?;
    let vy = layer.axis_view(bound, x, Axis::YExtend, alpha)?;
    let t = concat(&[vx, vy], 1)?;
    add_bias(channel_mix(bound.get(layer.proj), t)?, bound.get(layer.proj_bias))
}

/// Hyperparameters shared by every MMC layer of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MmcOptions {
    pub kernel_len: usize,
    pub state_dim: usize,
    pub bidirectional: bool,
}

impl Default for MmcOptions {
    fn default() -> Self {
        Self {
            kernel_len: 3,
            state_dim: 8,
            bidirectional: false,
        }
    }
}

/// A channel projection: an MMC layer, or a plain 1x1 convolution when MMC is
/// ablated.
#[derive(Clone, Debug)]
pub enum Pointwise {
    Mmc(MmcLayer),
    Conv { weight: ParamId, bias: ParamId, out_channels: usize },
}

impl Pointwise {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        in_channels: usize,
        out_channels: usize,
        mmc: Option<MmcOptions>,
    ) -> Result<Self> {
        Ok(match mmc {
            Some(o) => Pointwise::Mmc(MmcLayer::new(
                init,
                in_channels,
                out_channels,
                o.kernel_len,
                o.state_dim,
                o.bidirectional,
            )?),
            None => Pointwise::Conv {
                weight: init.he("weight", &[out_channels, in_channels], in_channels),
                bias: init.zeros("bias", &[out_channels]),
                out_channels,
            },
        })
    }

    pub fn forward<'t, T: Real>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Pointwise::Mmc(layer) => mmc_forward(x, layer, bound),
            Pointwise::Conv { weight, bias, .. } => add_bias(channel_mix(bound.get(*weight), x)?, bound.get(*bias)),
        }
    }
}
