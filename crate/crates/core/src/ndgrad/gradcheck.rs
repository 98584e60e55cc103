//! Central finite-difference verification of registered gradients.

use super::{Tape, Tensor, Var};
use crate::error::{contract_err, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub perturbation_step: f64,
    pub passed: bool,
    /// Number of scalar coordinates that were perturbed.
    pub probes: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    /// `(analytic, numeric)` derivatives at the worst coordinate.
    pub worst_pair: (f64, f64),
}

/// Finite-difference settings; `max_probes` limits how many coordinates of
/// each input are perturbed (evenly strided), `None` checks all of them.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub tolerance: f64,
    pub step: f64,
    pub max_probes: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-3,
            max_probes: None,
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.value();
    value
        .item()
        .ok_or_else(|| contract_err!("gradcheck closure must return a scalar, got {:?}", value.shape()))
}

/// Compares analytic gradients of a scalar closure against
/// `(f(x+h) - f(x-h)) / 2h`, with relative error denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn gradcheck<F>(op_name: &str, f: F, inputs: &[Tensor<f64>], tolerance: f64, step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    GradCheck {
        tolerance,
        step,
        max_probes: None,
    }
    .run(op_name, f, inputs)
}

impl GradCheck {
    pub fn with_probes(mut self, n: usize) -> Self {
        self.max_probes = Some(n);
        self
    }

    pub fn run<F>(&self, op_name: &str, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().numel() != 1 {
            return Err(contract_err!(
                "gradcheck closure must return a scalar, got {:?}",
                out.shape()
            ));
        }
        let grads = tape.backward(out)?;
        let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
        drop(grads);

        let mut worst = (0, 0);
        let mut worst_pair = (0.0, 0.0);
        let mut max_err = 0.0f64;
        let mut probes = 0;
        let mut perturbed = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let stride = match self.max_probes {
                Some(p) if p > 0 && p < n => n.div_ceil(p),
                _ => 1,
            };
            for j in (0..n).step_by(stride) {
                let x0 = input.data()[j];
                perturbed[i].data_mut()[j] = x0 + self.step;
                let fp = evaluate(&f, &perturbed)?;
                perturbed[i].data_mut()[j] = x0 - self.step;
                let fm = evaluate(&f, &perturbed)?;
                perturbed[i].data_mut()[j] = x0;
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic[i][j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                probes += 1;
                if !(err <= max_err) {
                    max_err = err;
                    worst = (i, j);
                    worst_pair = (a, numeric);
                }
            }
        }
        Ok(GradCheckReport {
            op_name: op_name.to_string(),
            max_relative_error: max_err,
            perturbation_step: self.step,
            passed: max_err < self.tolerance,
            probes,
            worst,
            worst_pair,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{mean, sum};
    use rand::SeedableRng;

    #[test]
    fn sigmoid_sum_passes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.5, &mut rng);
        let r = gradcheck("sigmoid", |_, v| Ok(sum(v[0].sigmoid())), &[x], 1e-6, 1e-3).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_relative_error < 1e-6);
    }

    #[test]
    fn linear_closure_is_exact() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let r = gradcheck("scale", |_, v| Ok(sum(v[0].scale(2.0))), &[x], 1e-4, 1e-3).unwrap();
        assert!(r.max_relative_error < 1e-10, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_fn(&[4], |i| 0.3 * i as f64 + 0.1);
        let r = gradcheck(
            "broken_square",
            |tape, v| {
                let xv = v[0].value();
                let y = Tensor::new(xv.shape(), xv.data().iter().map(|a| a * a).collect())?;
                // Registers d(x^2)/dx = x instead of 2x.
                let keep = xv.data().to_vec();
                let out = tape.record(y, &[v[0]], move |g| {
                    vec![Some(g.iter().zip(&keep).map(|(g, x)| g * x).collect())]
                });
                Ok(sum(out))
            },
            &[x],
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let x = Tensor::<f64>::zeros(&[3]);
        let r = gradcheck("id", |_, v| Ok(v[0].relu()), &[x], 1e-4, 1e-3);
        assert!(matches!(r, Err(crate::Error::Contract(_))));
        let ok = gradcheck("mean", |_, v| Ok(mean(v[0])), &[Tensor::<f64>::zeros(&[3])], 1e-4, 1e-3);
        assert!(ok.unwrap().passed);
    }
}
