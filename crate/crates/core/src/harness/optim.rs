use crate::error::{contract_err, Result};
use crate::ndgrad::{Real, Tensor};

/// First and second moment estimates of AdamW.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub wd: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

/// Decoupled weight decay `p <- p (1 - lr wd)` followed by the
/// bias-corrected Adam update.
pub fn adamw_step<T: Real>(params: &mut [Tensor<T>], grads: &[&[T]], state: &mut AdamState, hp: AdamHyper) -> Result<()> {
    if params.len() != grads.len() {
        return Err(contract_err!("{} parameters but {} gradients", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(contract_err!("parameter of shape {:?} got a gradient of {} values", p.shape(), g.len()));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
        return Err(contract_err!("optimizer state does not match the parameters"));
    }
    state.step += 1;
    let (b1, b2) = hp.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - hp.lr * hp.wd;
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i].to_f64_lossy();
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
            *x = T::of(x.to_f64_lossy() * decay - hp.lr * upd);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(lr: f64, wd: f64) -> AdamHyper {
        AdamHyper {
            lr,
            wd,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_fixed_point_and_decay() {
        let mut p = vec![Tensor::new(&[2], vec![1.0f64, -2.0]).unwrap()];
        let mut st = AdamState::new();
        adamw_step(&mut p, &[&[0.0, 0.0]], &mut st, hp(0.1, 0.0)).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        adamw_step(&mut p, &[&[0.0, 0.0]], &mut st, hp(0.1, 0.5)).unwrap();
        assert_eq!(p[0].data(), &[0.95, -1.9]);
    }

    #[test]
    fn three_steps_by_hand() {
        let mut p = vec![Tensor::new(&[1], vec![0.5f64]).unwrap()];
        let mut st = AdamState::new();
        let grads = [0.2, -0.1, 0.3];
        let (lr, wd, b1, b2, eps) = (0.01, 0.1, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adamw_step(&mut p, &[&[g]], &mut st, hp(lr, wd)).unwrap();
            let t = (t + 1) as i32;
            x *= 1.0 - lr * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            assert!((p[0].data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatch_is_contract_error() {
        let mut p = vec![Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap()];
        let mut st = AdamState::new();
        assert!(adamw_step(&mut p, &[&[0.0]], &mut st, hp(0.1, 0.0)).is_err());
        assert!(adamw_step(&mut p, &[], &mut st, hp(0.1, 0.0)).is_err());
    }
}
