//! Finite-difference gradient suite over every differentiable operation.
//!
//! Inputs come from a seeded generator. A draw is admitted only when the
//! central difference at the check step agrees with the one at half the step
//! on every probed coordinate; draws straddling a kink of `relu`, `max`,
//! `clamp` or an integer sampling position are replaced. Admission uses
//! forward evaluations only, never the registered gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::guidance::{Cbam, Rssg, RssgInputs};
use crate::harness::{loss, LossKind};
use crate::mm_unet::{MmUnet, NetworkConfig, WidthMult};
use crate::morph_conv::{axis_aggregate, bilinear_sample, morph_coordinates, predict_offsets, Axis, CoordinateSet, KernelGeometry};
use crate::ndgrad::{conv2d, elementwise, matmul, sum, Elementwise, GradCheck, GradCheckReport, Tape, Tensor, Var};
use crate::params::{Bound, InitRoot, ParamStore};
use crate::selective_state::{
    make_scan_order, mmc_forward, morph_ssm_fuse, selective_scan, Direction, MmcLayer, MmcOptions, SelectiveSsm,
};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-3;
/// Coordinates perturbed per input tensor.
pub const PROBES: usize = 48;

fn checker() -> GradCheck {
    GradCheck {
        tolerance: TOLERANCE,
        step: STEP,
        max_probes: Some(PROBES),
    }
}

fn label(op: &str, shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("{op} [{}]", dims.join("x"))
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// A differentiable function of a list of inputs.
type Scalar<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;
type Objective = Box<Scalar<'static>>;

/// `sum(f(x) * probe)`.
fn project<'a>(f: &'a Scalar<'a>, probe: Tensor<f64>) -> impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a {
    move |t, v| Ok(sum(f(t, v)?.mul(t.constant(probe.clone()))?))
}

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: Objective,
}

impl Case {
    fn new<F>(inputs: Vec<Tensor<f64>>, f: F) -> Self
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
    {
        Self { inputs, f: Box::new(f) }
    }
}

/// Redraws allowed before a case is checked as drawn.
pub const MAX_DRAWS: usize = 32;

/// One entry of the gradient suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub report: GradCheckReport,
    /// Number of input draws made, the last being the one checked.
    pub draws: usize,
}

fn evaluate(f: &Scalar<'_>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&tape, &vars)?;
    let v = y.value();
    Ok(v.data()[0])
}

/// Whether central differences at `STEP` and `STEP / 2` agree to a quarter
/// of the tolerance on the coordinates the checker will probe.
fn smooth(f: &Scalar<'_>, inputs: &[Tensor<f64>]) -> Result<bool> {
    let mut x = inputs.to_vec();
    for i in 0..x.len() {
        let n = x[i].numel();
        let stride = if PROBES < n { n.div_ceil(PROBES) } else { 1 };
        for j in (0..n).step_by(stride) {
            let x0 = x[i].data()[j];
            let mut diff = |h: f64| -> Result<f64> {
                x[i].data_mut()[j] = x0 + h;
                let fp = evaluate(f, &x)?;
                x[i].data_mut()[j] = x0 - h;
                let fm = evaluate(f, &x)?;
                x[i].data_mut()[j] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let (d1, d2) = (diff(STEP)?, diff(0.5 * STEP)?);
            if (d1 - d2).abs() > 0.25 * TOLERANCE * d1.abs().max(d2.abs()).max(1e-8) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Draws cases until one is smooth (or the budget runs out) and checks it
/// projected onto a random direction.
fn check<D>(name: String, rng: &mut ChaCha8Rng, draw: D) -> Result<SuiteEntry>
where
    D: Fn(&mut ChaCha8Rng) -> Result<Case>,
{
    for draws in 1..=MAX_DRAWS {
        let case = draw(rng)?;
        let tape = Tape::new();
        let vars: Vec<_> = case.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = (case.f)(&tape, &vars)?.shape();
        let probe = randn(rng, &shape);
        let objective = project(&*case.f, probe);
        let objective: &Scalar<'_> = &objective;
        if draws == MAX_DRAWS || smooth(objective, &case.inputs)? {
            let report = checker().run(&name, objective, &case.inputs)?;
            return Ok(SuiteEntry { report, draws });
        }
    }
    unreachable!("the last draw is always checked")
}

fn elementwise_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    use Elementwise::*;
    let unary = [Sigmoid, Tanh, Exp, Ln, Relu, Softplus, Neg, Square, Scale(-1.7), Shift(0.3), Clamp(-0.5, 0.5)];
    let shapes: [&[usize]; 3] = [&[5], &[2, 3, 4], &[1, 2, 3, 3]];
    for shape in shapes {
        for kind in unary {
            out.push(check(label(&format!("{kind:?}"), shape), rng, |rng| {
                let x = match kind {
                    Ln => Tensor::from_fn(shape, |_| rng.gen_range(0.2..2.0)),
                    _ => randn(rng, shape),
                };
                Ok(Case::new(vec![x], move |_, v| elementwise(kind, v[0], None)))
            })?);
        }
    }
    let pairs: [(&[usize], &[usize]); 3] = [(&[4], &[4]), (&[2, 3, 4], &[3, 1]), (&[2, 1, 3], &[1, 4, 1])];
    for (sa, sb) in pairs {
        for kind in [Add, Sub, Mul, Div] {
            let name = format!("{kind:?} [{sa:?} by {sb:?}]");
            out.push(check(name, rng, |rng| {
                let a = randn(rng, sa);
                let b = match kind {
                    Div => Tensor::from_fn(sb, |_| rng.gen_range(0.5..2.0)),
                    _ => randn(rng, sb),
                };
                Ok(Case::new(vec![a, b], move |_, v| elementwise(kind, v[0], Some(v[1]))))
            })?);
        }
    }
    Ok(())
}

fn matmul_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (m, k, n) in [(2, 3, 4), (1, 5, 1), (4, 2, 3)] {
        out.push(check(label("matmul", &[m, k, n]), rng, |rng| {
            Ok(Case::new(vec![randn(rng, &[m, k]), randn(rng, &[k, n])], |_, v| matmul(v[0], v[1])))
        })?);
    }
    Ok(())
}

fn conv_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let cases: [(&[usize], &[usize], usize, usize); 3] = [
        (&[1, 1, 5, 5], &[1, 1, 3, 3], 1, 1),
        (&[2, 3, 6, 5], &[2, 3, 3, 3], 2, 1),
        (&[1, 2, 7, 7], &[3, 2, 7, 7], 2, 3),
    ];
    for (xs, ws, stride, pad) in cases {
        out.push(check(label("conv2d", xs), rng, |rng| {
            Ok(Case::new(vec![randn(rng, xs), randn(rng, ws)], move |_, v| conv2d(v[0], v[1], stride, pad)))
        })?);
    }
    Ok(())
}

/// Coordinates spread over the grid and a unit beyond each border.
fn random_coords(rng: &mut ChaCha8Rng, b: usize, k: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[b, k, h, w, 2], |i| {
        let extent = if i % 2 == 0 { h } else { w };
        rng.gen_range(-1.0..extent as f64)
    })
}

fn bilinear_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (b, c, k, h, w) in [(1, 1, 3, 3, 3), (2, 2, 5, 4, 5), (1, 3, 3, 6, 4)] {
        out.push(check(label("bilinear_sample", &[b, c, k, h, w]), rng, |rng| {
            let inputs = vec![randn(rng, &[b, c, h, w]), random_coords(rng, b, k, h, w)];
            Ok(Case::new(inputs, |_, v| bilinear_sample(v[0], CoordinateSet { coords: v[1] })))
        })?);
    }
    Ok(())
}

fn morph_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let cases = [
        (Axis::XExtend, 3, [1, 2, 5, 4], 3),
        (Axis::YExtend, 5, [1, 2, 4, 5], 2),
        (Axis::XExtend, 5, [2, 1, 6, 6], 2),
    ];
    for (axis, k, xs, cout) in cases {
        let geom = KernelGeometry::new(k, axis)?;
        let name = label(&format!("morph pipeline {} K{k}", axis.tag()), &xs);
        out.push(check(name, rng, |rng| {
            let inputs = vec![randn(rng, &xs), Tensor::randn(&[k - 1, xs[1]], 0.6, rng), randn(rng, &[cout, xs[1], k])];
            Ok(Case::new(inputs, move |_, v| {
                let coords = morph_coordinates(predict_offsets(v[0], v[1], geom)?, geom)?;
                axis_aggregate(bilinear_sample(v[0], coords)?, v[2])
            }))
        })?);
    }
    Ok(())
}

/// Adds uniform noise in `[-amplitude, amplitude]` to every parameter so
/// that no path starts at a degenerate initial value.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, amplitude: f64) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|v| v + rng.gen_range(-amplitude..amplitude)).collect();
        store.set(id, Tensor::new(&shape, data)?)?;
    }
    Ok(())
}

fn with_store(mut inputs: Vec<Tensor<f64>>, store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    inputs.extend(store.tensors().iter().cloned());
    inputs
}

fn scan_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (b, d, n, l) in [(1, 2, 2, 5), (2, 3, 4, 8), (1, 4, 3, 16)] {
        out.push(check(label("selective_scan", &[b, d, l]), rng, |rng| {
            let mut root = InitRoot::<f64>::new(rng.gen());
            let ssm = SelectiveSsm::new(&mut root.init(), d, n);
            jitter(&mut root.store, rng, 0.6)?;
            let inputs = with_store(vec![randn(rng, &[b, d, l])], &root.store);
            Ok(Case::new(inputs, move |_, v| selective_scan(v[0], &ssm.bind(&Bound::from_vars(v[1..].to_vec())))))
        })?);
    }
    Ok(())
}

fn fuse_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let cases = [
        (Axis::XExtend, [1, 2, 3, 4], false),
        (Axis::YExtend, [2, 2, 4, 3], false),
        (Axis::XExtend, [1, 3, 3, 3], true),
    ];
    for (axis, fs, bidir) in cases {
        let name = label(&format!("morph_ssm_fuse {}{}", axis.tag(), if bidir { " bidirectional" } else { "" }), &fs);
        out.push(check(name, rng, |rng| {
            let mut root = InitRoot::<f64>::new(rng.gen());
            let ssm = SelectiveSsm::new(&mut root.init(), fs[1], 2);
            jitter(&mut root.store, rng, 0.6)?;
            let mut inputs = with_store(vec![randn(rng, &fs)], &root.store);
            inputs.push(Tensor::full(&[1], rng.gen_range(0.5..1.0)));
            let order = make_scan_order(axis, Direction::Forward, fs[2], fs[3]);
            Ok(Case::new(inputs, move |_, v| {
                let last = v.len() - 1;
                let p = ssm.bind(&Bound::from_vars(v[1..last].to_vec()));
                morph_ssm_fuse(v[0], &order, &p, v[last], bidir)
            }))
        })?);
    }
    Ok(())
}

fn mmc_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (xs, cout, k, bidir) in [([1, 2, 5, 4], 3, 3, false), ([2, 3, 4, 4], 2, 5, true), ([1, 1, 6, 3], 2, 3, false)] {
        out.push(check(label("mmc_forward", &xs), rng, |rng| {
            let mut root = InitRoot::<f64>::new(rng.gen());
            let layer = MmcLayer::new(&mut root.init(), xs[1], cout, k, 2, bidir)?;
            jitter(&mut root.store, rng, 0.6)?;
            let inputs = with_store(vec![randn(rng, &xs)], &root.store);
            Ok(Case::new(inputs, move |_, v| mmc_forward(v[0], &layer, &Bound::from_vars(v[1..].to_vec()))))
        })?);
    }
    Ok(())
}

fn cbam_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for xs in [[1, 4, 5, 5], [2, 8, 4, 6], [1, 6, 8, 8]] {
        out.push(check(label("cbam", &xs), rng, |rng| {
            let mut root = InitRoot::<f64>::new(rng.gen());
            let block = Cbam::new(&mut root.init(), xs[1]);
            jitter(&mut root.store, rng, 0.6)?;
            let inputs = with_store(vec![randn(rng, &xs)], &root.store);
            Ok(Case::new(inputs, move |_, v| block.forward(&Bound::from_vars(v[1..].to_vec()), v[0])))
        })?);
    }
    Ok(())
}

fn rssg_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let mmc = MmcOptions {
        kernel_len: 3,
        state_dim: 2,
        bidirectional: false,
    };
    let cases = [([1, 2, 6, 6], [1, 3, 3, 3], Some(mmc)), ([2, 3, 4, 4], [2, 2, 4, 4], None), ([1, 2, 8, 8], [1, 4, 2, 2], Some(mmc))];
    for (es, ds, opt) in cases {
        let name = label(if opt.is_some() { "rssg_forward mmc" } else { "rssg_forward conv" }, &ds);
        out.push(check(name, rng, |rng| {
            let mut root = InitRoot::<f64>::new(rng.gen());
            let block = Rssg::new(&mut root.init(), es[1], ds[1], opt, 2)?;
            jitter(&mut root.store, rng, 0.6)?;
            let features = vec![randn(rng, &es), randn(rng, &ds), randn(rng, &[ds[0], 1, ds[2], ds[3]])];
            let inputs = with_store(features, &root.store);
            Ok(Case::new(inputs, move |_, v| {
                let inputs = RssgInputs {
                    f_edge: v[0],
                    f_deep: v[1],
                    r_prev: v[2],
                };
                block.forward(&Bound::from_vars(v[3..].to_vec()), inputs)
            }))
        })?);
    }
    Ok(())
}

fn loss_suite(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let cases: [(&[usize], bool, LossKind); 4] = [
        (&[1, 1, 4, 4], false, LossKind::BceDice),
        (&[2, 1, 3, 5], true, LossKind::BceDice),
        (&[1, 1, 6, 6], true, LossKind::Bce),
        (&[3, 1, 2, 2], false, LossKind::Bce),
    ];
    for (shape, with_fov, kind) in cases {
        let name = label(&format!("loss {kind:?}{}", if with_fov { " fov" } else { "" }), shape);
        out.push(check(name, rng, |rng| {
            let pred = Tensor::from_fn(shape, |_| rng.gen_range(0.1..0.9));
            let mask = Tensor::from_fn(shape, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
            let fov = with_fov.then(|| Tensor::from_fn(shape, |_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }));
            Ok(Case::new(vec![pred], move |_, v| loss(v[0], &mask, fov.as_ref(), kind)))
        })?);
    }
    Ok(())
}

/// One entry per operation and shape, at least three shapes per operation.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    elementwise_suite(&mut rng, &mut out)?;
    matmul_suite(&mut rng, &mut out)?;
    conv_suite(&mut rng, &mut out)?;
    bilinear_suite(&mut rng, &mut out)?;
    morph_suite(&mut rng, &mut out)?;
    scan_suite(&mut rng, &mut out)?;
    fuse_suite(&mut rng, &mut out)?;
    mmc_suite(&mut rng, &mut out)?;
    cbam_suite(&mut rng, &mut out)?;
    rssg_suite(&mut rng, &mut out)?;
    loss_suite(&mut rng, &mut out)?;
    Ok(out)
}

/// Operation families covered by [`gradient_suite`], as report-name prefixes.
pub const FAMILIES: [&str; 11] = [
    "elementwise",
    "matmul",
    "conv2d",
    "bilinear_sample",
    "morph pipeline",
    "selective_scan",
    "morph_ssm_fuse",
    "mmc_forward",
    "cbam",
    "rssg_forward",
    "loss",
];

/// Family of a report produced by [`gradient_suite`].
pub fn family(report: &GradCheckReport) -> &'static str {
    FAMILIES[1..]
        .iter()
        .find(|f| report.op_name.starts_with(*f))
        .copied()
        .unwrap_or(FAMILIES[0])
}

/// Directional-derivative agreement of the training loss through a whole
/// network.
#[derive(Clone, Debug)]
pub struct DirectionalReport {
    /// `<grad, u>` from the tape, one per random unit direction `u`.
    pub analytic: Vec<f64>,
    /// Central differences along the same directions.
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Checks the loss gradient of a small randomized network along
/// `directions` random unit directions in parameter space. A whole network
/// has too many `relu` and max-pool kinks for coordinate-wise checks at the
/// operation step, so `step` is taken along each direction instead.
pub fn network_check(seed: u64, directions: usize, tolerance: f64, step: f64) -> Result<DirectionalReport> {
    let config = NetworkConfig {
        width_mult: WidthMult::new(1, 16)?,
        input_hw: (32, 32),
        ssm_state_dim: 2,
        seed,
        ..NetworkConfig::default()
    };
    let (net, mut store) = MmUnet::new::<f64>(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jitter(&mut store, &mut rng, 0.05)?;
    let image = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let mask = Tensor::from_fn(&[1, 1, 32, 32], |_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 });
    let value = |params: &ParamStore<f64>, grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let bound = if grad { params.bind(&tape) } else { params.bind_frozen(&tape) };
        let art = net.forward(&bound, tape.constant(image.clone()))?;
        let l = loss(art.probability, &mask, None, LossKind::BceDice)?;
        let v = l.value().data()[0];
        if !grad {
            return Ok((v, Vec::new()));
        }
        let grads = tape.backward(l)?;
        Ok((v, bound.vars().iter().map(|&p| grads.get_or_zeros(p)).collect()))
    };
    let (_, grads) = value(&store, true)?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..directions {
        let mut u: Vec<Vec<f64>> = store.tensors().iter().map(|t| randn(&mut rng, t.shape()).into_data()).collect();
        let norm = u.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().flatten().for_each(|x| *x /= norm);
        analytic.push(grads.iter().flatten().zip(u.iter().flatten()).map(|(g, d)| g * d).sum());
        let shifted = |sign: f64| -> Result<f64> {
            let mut moved = store.clone();
            for (t, d) in moved.tensors_mut().iter_mut().zip(&u) {
                t.data_mut().iter_mut().zip(d).for_each(|(x, d)| *x += sign * step * d);
            }
            Ok(value(&moved, false)?.0)
        };
        numeric.push((shifted(1.0)? - shifted(-1.0)?) / (2.0 * step));
    }
    let max_relative_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n): (&f64, &f64)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max);
    Ok(DirectionalReport {
        analytic,
        numeric,
        max_relative_error,
        passed: max_relative_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_has_three_shapes() {
        let entries = gradient_suite(7).unwrap();
        let reports: Vec<_> = entries.iter().map(|e| &e.report).collect();
        for f in FAMILIES {
            let n = reports.iter().filter(|r| family(r) == f).count();
            assert!(n >= 3, "{f}: {n}");
        }
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }

    #[test]
    fn screening_does_not_hide_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let entry = check("broken square".into(), &mut rng, |rng| {
            Ok(Case::new(vec![randn(rng, &[6])], |tape, v| {
                let xv = v[0].value();
                let keep = xv.data().to_vec();
                let y = Tensor::new(xv.shape(), keep.iter().map(|a| a * a).collect())?;
                Ok(tape.record(y, &[v[0]], move |g| vec![Some(g.iter().zip(&keep).map(|(g, x)| g * x).collect())]))
            }))
        })
        .unwrap();
        assert_eq!(entry.draws, 1);
        assert!(!entry.report.passed);
    }

    #[test]
    fn network_gradients_agree() {
        let r = network_check(3, 3, 1e-4, 1e-5).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.analytic.iter().all(|a| a.abs() > 1e-4), "{r:?}");
    }
}
