use super::schedule::LossKind;
use crate::error::{contract_err, dim_err, Result};
use crate::ndgrad::{sum, Real, Tensor, Var};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` inside the logarithms.
pub const CLAMP: f64 = 1e-7;
/// Additive smoothing of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Segmentation loss of `pred: [B, 1, H, W]` against a binary `mask` of the
/// same shape. Pixels where `fov` is zero are ignored. `BceDice` averages
/// the mean cross-entropy and `1 - Dice` with equal weights; Dice is pooled
/// over the whole batch.
pub fn loss<'t, T: Real>(pred: Var<'t, T>, mask: &Tensor<T>, fov: Option<&Tensor<T>>, kind: LossKind) -> Result<Var<'t, T>> {
    let pv = pred.value();
    if pv.shape() != mask.shape() || fov.is_some_and(|f| f.shape() != mask.shape()) {
        return Err(dim_err!("prediction {:?} and mask {:?} differ", pv.shape(), mask.shape()));
    }
    if let Some(bad) = pv.data().iter().find(|&&p| !(p >= T::zero() && p <= T::one())) {
        return Err(contract_err!("prediction {bad} lies outside [0, 1]"));
    }
    let tape = pred.tape();
    let weight = match fov {
        Some(f) => f.clone(),
        None => Tensor::full(mask.shape(), T::one()),
    };
    let count = weight.sum().to_f64_lossy().max(1.0);
    let m = tape.constant(mask.clone());
    let w = tape.constant(weight.clone());
    let not_m = tape.constant(Tensor::from_fn(mask.shape(), |i| T::one() - mask.data()[i]));

    let pc = pred.clamp(CLAMP, 1.0 - CLAMP);
    let ll = m.mul(pc.ln())?.add(not_m.mul(pc.neg().shift(1.0).ln())?)?;
    let bce = sum(ll.mul(w)?).scale(-1.0 / count);
    if kind == LossKind::Bce {
        return Ok(bce);
    }
    let pw = pred.mul(w)?;
    let inter = sum(pw.mul(m)?);
    let mass = sum(pw).shift(weight.data().iter().zip(mask.data()).map(|(a, b)| (*a * *b).to_f64_lossy()).sum::<f64>() + DICE_SMOOTH);
    let dice = inter.scale(2.0).shift(DICE_SMOOTH).div(mass)?;
    bce.scale(0.5).add(dice.neg().shift(1.0).scale(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tape;

    #[test]
    fn perfect_prediction() {
        let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| if i % 3 == 0 { 1.0f64 } else { 0.0 });
        let tape = Tape::new();
        let l = loss(tape.constant(mask.clone()), &mask, None, LossKind::BceDice).unwrap();
        assert!(l.value().data()[0] < 1e-5);
    }

    #[test]
    fn half_probability_is_ln2() {
        let mask = Tensor::from_fn(&[1, 1, 2, 2], |i| (i % 2) as f64);
        let tape = Tape::new();
        let l = loss(tape.constant(Tensor::full(&[1, 1, 2, 2], 0.5)), &mask, None, LossKind::Bce).unwrap();
        assert!((l.value().data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_prediction_is_rejected() {
        let mask = Tensor::<f64>::zeros(&[1, 1, 1, 2]);
        let tape = Tape::new();
        let p = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.5, 1.5]).unwrap());
        assert!(matches!(loss(p, &mask, None, LossKind::Bce), Err(crate::Error::Contract(_))));
    }
}
