//! Morph-offset sampling along one kernel axis.
//!
//! A kernel of odd length `K` is laid along one axis of the image. Along that
//! axis the slot `±c` sits exactly `c` pixels from the center; across it the
//! slot drifts by the cumulative sum of learned offsets `Δ` along its arm, so
//! the receptive field can bend to follow a curvilinear structure. Features
//! are read at the resulting sub-pixel coordinates by bilinear interpolation
//! and combined with per-slot kernel weights.
//!
//! Coordinates are `(row, col)`. [`Axis::XExtend`] steps the row coordinate
//! (a `K x 1` kernel) and bends the column; [`Axis::YExtend`] steps the
//! column (a `1 x K` kernel) and bends the row.

use crate::error::{dim_err, Result};
use crate::ndgrad::{channel_mix, reshape, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    XExtend,
    YExtend,
}

impl Axis {
    pub fn tag(self) -> &'static str {
        match self {
            Axis::XExtend => "x",
            Axis::YExtend => "y",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelGeometry {
    kernel_len: usize,
    axis: Axis,
}

impl KernelGeometry {
    pub fn new(kernel_len: usize, axis: Axis) -> Result<Self> {
        if kernel_len < 3 || kernel_len % 2 == 0 {
            return Err(dim_err!("morph kernel length {kernel_len} must be odd and at least 3"));
        }
        Ok(Self { kernel_len, axis })
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_len
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    /// `c_max = (K - 1) / 2`.
    pub fn half_span(&self) -> usize {
        (self.kernel_len - 1) / 2
    }

    /// Offset channels per center: `c_max` for the `+` arm then `c_max` for
    /// the `-` arm.
    pub fn offset_slots(&self) -> usize {
        self.kernel_len - 1
    }
}

/// Learned displacements `Δ ∈ [-1, 1]`, shape `[B, K - 1, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct OffsetField<'t, T> {
    pub values: Var<'t, T>,
    pub axis: Axis,
}

/// Sampling coordinates, shape `[B, K, H, W, 2]` holding `(row, col)`.
#[derive(Clone, Copy, Debug)]
pub struct CoordinateSet<'t, T> {
    pub coords: Var<'t, T>,
}

/// All integer centers of an `height x width` grid in row-major order.
pub fn base_grid(height: usize, width: usize) -> Vec<(usize, usize)> {
    (0..height).flat_map(|i| (0..width).map(move |j| (i, j))).collect()
}

/// Offsets from a 1x1 projection of `features`, squashed by `tanh`.
/// `proj_weight` is `[K - 1, C]`.
pub fn predict_offsets<'t, T: Real>(
    features: Var<'t, T>,
    proj_weight: Var<'t, T>,
    geom: KernelGeometry,
) -> Result<OffsetField<'t, T>> {
    let ws = proj_weight.shape();
    if ws.len() != 2 || ws[0] != geom.offset_slots() {
        return Err(dim_err!(
            "offset projection {ws:?} must map to {} slots",
            geom.offset_slots()
        ));
    }
    let raw = channel_mix(proj_weight, features)?;
    Ok(OffsetField {
        values: raw.tanh(),
        axis: geom.axis(),
    })
}

/// Cumulative displacement of every slot, `[K]` per center, from one
/// center's offsets laid out as `[+1..+c_max, -1..-c_max]`.
fn arm_displacements<T: Real>(delta: impl Fn(usize) -> T, half: usize, out: &mut [T]) {
    out[half] = T::zero();
    let mut plus = T::zero();
    let mut minus = T::zero();
    for c in 1..=half {
        plus += delta(c - 1);
        minus += delta(half + c - 1);
        out[half + c] = plus;
        out[half - c] = minus;
    }
}

/// Builds the morphed sampling coordinates of every kernel slot.
pub fn morph_coordinates<'t, T: Real>(
    offsets: OffsetField<'t, T>,
    geom: KernelGeometry,
) -> Result<CoordinateSet<'t, T>> {
    if offsets.axis != geom.axis() {
        return Err(dim_err!("offset field axis {:?} does not match kernel axis {:?}", offsets.axis, geom.axis()));
    }
    let ov = offsets.values.value();
    let &[b, slots, h, w] = ov.shape() else {
        return Err(dim_err!("offset field must be [B, K-1, H, W], got {:?}", ov.shape()));
    };
    if slots != geom.offset_slots() {
        return Err(dim_err!("offset field has {slots} slots, kernel needs {}", geom.offset_slots()));
    }
    let k = geom.kernel_len();
    let half = geom.half_span();
    let hw = h * w;
    let od = ov.data();
    let mut coords = vec![T::zero(); b * k * hw * 2];
    let mut disp = vec![T::zero(); k];
    // (stepped component, bent component) inside each (row, col) pair
    let (step_at, bend_at) = match geom.axis() {
        Axis::XExtend => (0, 1),
        Axis::YExtend => (1, 0),
    };
    for bi in 0..b {
        for (p, (i, j)) in base_grid(h, w).into_iter().enumerate() {
            arm_displacements(|s| od[(bi * slots + s) * hw + p], half, &mut disp);
            let center = [T::of(i as f64), T::of(j as f64)];
            for (slot, &d) in disp.iter().enumerate() {
                let at = ((bi * k + slot) * hw + p) * 2;
                let step = T::of(slot as f64 - half as f64);
                coords[at + step_at] = center[step_at] + step;
                coords[at + bend_at] = center[bend_at] + d;
            }
        }
    }
    let value = Tensor::from_parts(vec![b, k, h, w, 2], coords);
    let var = offsets.values.tape().record(value, &[offsets.values], move |g| {
        // reverse cumulative sum of the bent-component gradient along each arm
        let mut go = vec![T::zero(); b * slots * hw];
        for bi in 0..b {
            for p in 0..hw {
                let gd = |slot: usize| g[((bi * k + slot) * hw + p) * 2 + bend_at];
                let mut plus = T::zero();
                let mut minus = T::zero();
                for c in (1..=half).rev() {
                    plus += gd(half + c);
                    minus += gd(half - c);
                    go[(bi * slots + c - 1) * hw + p] = plus;
                    go[(bi * slots + half + c - 1) * hw + p] = minus;
                }
            }
        }
        vec![Some(go)]
    });
    Ok(CoordinateSet { coords: var })
}

/// One tap of the bilinear kernel after border clamping.
#[derive(Clone, Copy)]
struct Tap<T> {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fy: T,
    fx: T,
    /// Coordinate lies inside the image along (row, col), so it receives a gradient.
    live: (bool, bool),
}

fn tap<T: Real>(r: T, c: T, h: usize, w: usize) -> Tap<T> {
    let (hmax, wmax) = (T::of((h - 1) as f64), T::of((w - 1) as f64));
    let live = (r >= T::zero() && r <= hmax, c >= T::zero() && c <= wmax);
    let y = r.max(T::zero()).min(hmax);
    let x = c.max(T::zero()).min(wmax);
    let y0 = y.floor().to_usize().unwrap_or(0).min(h - 1);
    let x0 = x.floor().to_usize().unwrap_or(0).min(w - 1);
    Tap {
        y0,
        y1: (y0 + 1).min(h - 1),
        x0,
        x1: (x0 + 1).min(w - 1),
        fy: y - T::of(y0 as f64),
        fx: x - T::of(x0 as f64),
        live,
    }
}

impl<T: Real> Tap<T> {
    fn sample(&self, plane: &[T], w: usize) -> T {
        let f00 = plane[self.y0 * w + self.x0];
        if self.fy == T::zero() && self.fx == T::zero() {
            return f00;
        }
        let f01 = plane[self.y0 * w + self.x1];
        let f10 = plane[self.y1 * w + self.x0];
        let f11 = plane[self.y1 * w + self.x1];
        let (one, fy, fx) = (T::one(), self.fy, self.fx);
        (one - fy) * (one - fx) * f00 + (one - fy) * fx * f01 + fy * (one - fx) * f10 + fy * fx * f11
    }
}

/// Reads `feature: [B, C, H, W]` at every coordinate of `coords`, giving
/// `[B, C, K, H, W]`. Coordinates are clamped to the image (border
/// replication); clamped components receive no gradient.
pub fn bilinear_sample<'t, T: Real>(feature: Var<'t, T>, coords: CoordinateSet<'t, T>) -> Result<Var<'t, T>> {
    let fv = feature.value();
    let cv = coords.coords.value();
    let (&[b, c, h, w], &[b2, k, h2, w2, 2]) = (fv.shape(), cv.shape()) else {
        return Err(dim_err!("bilinear_sample needs [B,C,H,W] and [B,K,H,W,2], got {:?} and {:?}", fv.shape(), cv.shape()));
    };
    if (b, h, w) != (b2, h2, w2) {
        return Err(dim_err!("feature {:?} and coordinates {:?} disagree", fv.shape(), cv.shape()));
    }
    let hw = h * w;
    let ntaps = b * k * hw;
    let taps: Vec<Tap<T>> = (0..ntaps)
        .map(|t| tap(cv.data()[2 * t], cv.data()[2 * t + 1], h, w))
        .collect();
    let mut out = vec![T::zero(); b * c * k * hw];
    let fd = fv.data();
    for bi in 0..b {
        for ci in 0..c {
            let plane = &fd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for slot in 0..k {
                let dst = &mut out[((bi * c + ci) * k + slot) * hw..((bi * c + ci) * k + slot + 1) * hw];
                let row = &taps[(bi * k + slot) * hw..(bi * k + slot + 1) * hw];
                for (o, t) in dst.iter_mut().zip(row) {
                    *o = t.sample(plane, w);
                }
            }
        }
    }
    let value = Tensor::from_parts(vec![b, c, k, h, w], out);
    let (need_f, need_c) = (feature.requires_grad(), coords.coords.requires_grad());
    let keep_f = std::rc::Rc::clone(&fv);
    Ok(feature.tape().record(value, &[feature, coords.coords], move |g| {
        let fd = keep_f.data();
        let one = T::one();
        let mut gf = need_f.then(|| vec![T::zero(); b * c * hw]);
        let mut gc = need_c.then(|| vec![T::zero(); ntaps * 2]);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let plane = &fd[base..base + hw];
                for slot in 0..k {
                    let gs = &g[((bi * c + ci) * k + slot) * hw..((bi * c + ci) * k + slot + 1) * hw];
                    for p in 0..hw {
                        let ti = (bi * k + slot) * hw + p;
                        let t = &taps[ti];
                        let gv = gs[p];
                        let (fy, fx) = (t.fy, t.fx);
                        if let Some(gf) = gf.as_mut() {
                            gf[base + t.y0 * w + t.x0] += gv * (one - fy) * (one - fx);
                            gf[base + t.y0 * w + t.x1] += gv * (one - fy) * fx;
                            gf[base + t.y1 * w + t.x0] += gv * fy * (one - fx);
                            gf[base + t.y1 * w + t.x1] += gv * fy * fx;
                        }
                        if let Some(gc) = gc.as_mut() {
                            let f00 = plane[t.y0 * w + t.x0];
                            let f01 = plane[t.y0 * w + t.x1];
                            let f10 = plane[t.y1 * w + t.x0];
                            let f11 = plane[t.y1 * w + t.x1];
                            if t.live.0 {
                                gc[2 * ti] += gv * ((one - fx) * (f10 - f00) + fx * (f11 - f01));
                            }
                            if t.live.1 {
                                gc[2 * ti + 1] += gv * ((one - fy) * (f01 - f00) + fy * (f11 - f10));
                            }
                        }
                    }
                }
            }
        }
        vec![gf, gc]
    }))
}

/// Weighted sum over kernel slots with a joint channel projection:
/// `sampled: [B, C, K, H, W]`, `kernel_weights: [C', C, K]` -> `[B, C', H, W]`.
pub fn axis_aggregate<'t, T: Real>(sampled: Var<'t, T>, kernel_weights: Var<'t, T>) -> Result<Var<'t, T>> {
    let ss = sampled.shape();
    let ws = kernel_weights.shape();
    let (&[b, c, k, h, w], &[co, c2, k2]) = (ss.as_slice(), ws.as_slice()) else {
        return Err(dim_err!("axis_aggregate needs [B,C,K,H,W] and [C',C,K], got {ss:?} and {ws:?}"));
    };
    if k != k2 {
        return Err(dim_err!("kernel weights have {k2} slots, samples have {k}"));
    }
    if c != c2 {
        return Err(dim_err!("kernel weights expect {c2} channels, samples have {c}"));
    }
    let flat = reshape(sampled, &[b, c * k, h * w])?;
    let wmat = reshape(kernel_weights, &[co, c * k])?;
    reshape(channel_mix(wmat, flat)?, &[b, co, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tape;
    use rand::{Rng, SeedableRng};

    fn offsets<'t>(tape: &'t Tape<f64>, k: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Var<'t, f64> {
        tape.constant(Tensor::from_fn(&[1, k - 1, h, w], |i| f(i / (h * w))))
    }

    fn coord(cs: &Tensor<f64>, slot: usize, i: usize, j: usize) -> (f64, f64) {
        (cs.at(&[0, slot, i, j, 0]), cs.at(&[0, slot, i, j, 1]))
    }

    #[test]
    fn base_grid_enumerates_row_major() {
        assert_eq!(base_grid(2, 2), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(base_grid(1, 1), vec![(0, 0)]);
        let g = base_grid(3, 5);
        assert_eq!(g.len(), 15);
        assert_eq!(g[5], (1, 0));
    }

    #[test]
    fn geometry_rejects_even_or_short_kernels() {
        assert!(KernelGeometry::new(4, Axis::XExtend).is_err());
        assert!(KernelGeometry::new(1, Axis::XExtend).is_err());
        assert_eq!(KernelGeometry::new(7, Axis::YExtend).unwrap().half_span(), 3);
    }

    #[test]
    fn zero_offsets_give_straight_kernel() {
        let tape = Tape::new();
        let geom = KernelGeometry::new(3, Axis::XExtend).unwrap();
        let field = OffsetField { values: offsets(&tape, 3, 8, 8, |_| 0.0), axis: Axis::XExtend };
        let cs = morph_coordinates(field, geom).unwrap().coords.value();
        assert_eq!(coord(&cs, 0, 5, 5), (4.0, 5.0));
        assert_eq!(coord(&cs, 1, 5, 5), (5.0, 5.0));
        assert_eq!(coord(&cs, 2, 5, 5), (6.0, 5.0));
    }

    #[test]
    fn unit_offsets_accumulate_per_arm() {
        let tape = Tape::new();
        let geom = KernelGeometry::new(3, Axis::XExtend).unwrap();
        let field = OffsetField { values: offsets(&tape, 3, 8, 8, |_| 1.0), axis: Axis::XExtend };
        let cs = morph_coordinates(field, geom).unwrap().coords.value();
        assert_eq!(coord(&cs, 0, 5, 5), (4.0, 6.0));
        assert_eq!(coord(&cs, 1, 5, 5), (5.0, 5.0));
        assert_eq!(coord(&cs, 2, 5, 5), (6.0, 6.0));
    }

    #[test]
    fn five_tap_arm_cumulative_sum() {
        // + arm carries (0.5, -0.5); - arm is zero.
        let tape = Tape::new();
        let geom = KernelGeometry::new(5, Axis::XExtend).unwrap();
        let seq = [0.5, -0.5, 0.0, 0.0];
        let field = OffsetField { values: offsets(&tape, 5, 4, 4, |s| seq[s]), axis: Axis::XExtend };
        let cs = morph_coordinates(field, geom).unwrap().coords.value();
        let (_, c1) = coord(&cs, 3, 2, 2);
        let (_, c2) = coord(&cs, 4, 2, 2);
        assert_eq!(c1 - 2.0, 0.5);
        assert_eq!(c2 - 2.0, 0.0);
    }

    #[test]
    fn y_extend_swaps_roles() {
        let tape = Tape::new();
        let geom = KernelGeometry::new(3, Axis::YExtend).unwrap();
        let field = OffsetField { values: offsets(&tape, 3, 8, 8, |_| 0.25), axis: Axis::YExtend };
        let cs = morph_coordinates(field, geom).unwrap().coords.value();
        assert_eq!(coord(&cs, 0, 5, 5), (5.25, 4.0));
        assert_eq!(coord(&cs, 2, 5, 5), (5.25, 6.0));
    }

    #[test]
    fn axis_mismatch_is_rejected() {
        let tape = Tape::new();
        let geom = KernelGeometry::new(3, Axis::YExtend).unwrap();
        let field = OffsetField { values: offsets(&tape, 3, 2, 2, |_| 0.0), axis: Axis::XExtend };
        assert!(morph_coordinates(field, geom).is_err());
    }

    fn sample_at(map: &Tensor<f64>, r: f64, c: f64) -> f64 {
        let tape = Tape::new();
        let (h, w) = (map.shape()[2], map.shape()[3]);
        let cs = Tensor::from_fn(&[1, 1, h, w, 2], |i| if i % 2 == 0 { r } else { c });
        let coords = CoordinateSet { coords: tape.constant(cs) };
        bilinear_sample(tape.constant(map.clone()), coords).unwrap().value().data()[0]
    }

    #[test]
    fn bilinear_reference_values() {
        let map = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(sample_at(&map, 0.0, 0.0), 1.0);
        assert_eq!(sample_at(&map, 0.5, 0.5), 2.5);
        let expected = 0.75 * 0.25 * 1.0 + 0.75 * 0.75 * 2.0 + 0.25 * 0.25 * 3.0 + 0.25 * 0.75 * 4.0;
        assert!((sample_at(&map, 0.25, 0.75) - expected).abs() < 1e-15);
        assert_eq!(expected, 2.25);
    }

    #[test]
    fn out_of_range_coordinates_replicate_border() {
        let map = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(sample_at(&map, -3.0, 0.0), 1.0);
        assert_eq!(sample_at(&map, 7.0, 9.0), 4.0);
        assert_eq!(sample_at(&map, 0.0, 1.5), 2.0);
    }

    #[test]
    fn predicted_offsets_are_bounded_and_zero_for_zero_weight() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let geom = KernelGeometry::new(3, Axis::XExtend).unwrap();
        let x = tape.constant(Tensor::randn(&[2, 3, 4, 4], 10.0, &mut rng));
        let zero = tape.constant(Tensor::zeros(&[2, 3]));
        let field = predict_offsets(x, zero, geom).unwrap();
        assert!(field.values.value().data().iter().all(|&v| v == 0.0));
        let big = tape.constant(Tensor::randn(&[2, 3], 5.0, &mut rng));
        let field = predict_offsets(x, big, geom).unwrap();
        assert!(field.values.value().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let wrong = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(predict_offsets(x, wrong, geom).is_err());
    }

    #[test]
    fn aggregate_delta_and_zero_kernels() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        let sampled = Tensor::<f64>::randn(&[1, 2, 3, 2, 2], 1.0, &mut rng);
        let s = tape.constant(sampled.clone());
        // identity channel map, one-hot on the center slot
        let delta = Tensor::from_fn(&[2, 2, 3], |i| {
            let (o, c, k) = (i / 6, (i / 3) % 2, i % 3);
            if o == c && k == 1 { 1.0 } else { 0.0 }
        });
        let y = axis_aggregate(s, tape.constant(delta)).unwrap().value();
        for c in 0..2 {
            for p in 0..4 {
                assert_eq!(y.data()[c * 4 + p], sampled.data()[(c * 3 + 1) * 4 + p]);
            }
        }
        let z = axis_aggregate(s, tape.constant(Tensor::zeros(&[4, 2, 3]))).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
        assert!(axis_aggregate(s, tape.constant(Tensor::zeros(&[4, 2, 5]))).is_err());
    }

    #[test]
    fn aggregate_matches_per_slot_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let (b, c, k, h, w, co) = (2, rng.gen_range(1..4), 3, 3, 4, rng.gen_range(1..4));
            let sampled = Tensor::<f64>::randn(&[b, c, k, h, w], 1.0, &mut rng);
            let weights = Tensor::<f64>::randn(&[co, c, k], 1.0, &mut rng);
            let tape = Tape::new();
            let y = axis_aggregate(tape.constant(sampled.clone()), tape.constant(weights.clone())).unwrap().value();
            for bi in 0..b {
                for o in 0..co {
                    for i in 0..h {
                        for j in 0..w {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for s in 0..k {
                                    acc += weights.at(&[o, ci, s]) * sampled.at(&[bi, ci, s, i, j]);
                                }
                            }
                            assert!((y.at(&[bi, o, i, j]) - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn morph_pipeline_gradients() {
        use crate::ndgrad::{gradcheck, sum};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for (axis, k) in [(Axis::XExtend, 3), (Axis::YExtend, 5)] {
            let geom = KernelGeometry::new(k, axis).unwrap();
            let x = Tensor::<f64>::randn(&[1, 2, 5, 4], 1.0, &mut rng);
            let pw = Tensor::<f64>::randn(&[k - 1, 2], 0.7, &mut rng);
            let kw = Tensor::<f64>::randn(&[3, 2, k], 1.0, &mut rng);
            let r = gradcheck(
                "morph_pipeline",
                move |_, v| {
                    let field = predict_offsets(v[0], v[1], geom)?;
                    let cs = morph_coordinates(field, geom)?;
                    let s = bilinear_sample(v[0], cs)?;
                    Ok(sum(axis_aggregate(s, v[2])?.square()))
                },
                &[x, pw, kw],
                1e-4,
                1e-3,
            )
            .unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}
