use std::fmt;
use std::ops::AddAssign;

/// Confusion counts and the rates derived from them.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub acc: f64,
    pub se: f64,
    pub sp: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

impl Metrics {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self {
            tp,
            fp,
            tn,
            fn_,
            acc: ratio(tp + tn, tp + tn + fp + fn_),
            se: ratio(tp, tp + fn_),
            sp: ratio(tn, tn + fp),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
        }
    }

    /// Counts `pred >= threshold` against `mask` where `fov` is set.
    pub fn from_maps(pred: &[f32], mask: &[f32], fov: Option<&[f32]>, threshold: f64) -> Self {
        let mut c = [0u64; 4];
        for (i, (&p, &m)) in pred.iter().zip(mask).enumerate() {
            if fov.is_some_and(|f| f[i] < 0.5) {
                continue;
            }
            let (pos, truth) = (p as f64 >= threshold, m >= 0.5);
            c[match (pos, truth) {
                (true, true) => 0,
                (true, false) => 1,
                (false, false) => 2,
                (false, true) => 3,
            }] += 1;
        }
        Self::from_counts(c[0], c[1], c[2], c[3])
    }
}

impl AddAssign for Metrics {
    fn add_assign(&mut self, o: Self) {
        *self = Self::from_counts(self.tp + o.tp, self.fp + o.fp, self.tn + o.tn, self.fn_ + o.fn_);
    }
}

impl fmt::Display for Metrics {
    /// Percentages to two decimals in the order ACC SE SP F1.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.2} {:.2} {:.2} {:.2}",
            100.0 * self.acc,
            100.0 * self.se,
            100.0 * self.sp,
            100.0 * self.f1
        )
    }
}
