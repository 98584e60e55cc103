//! Background suppression and reverse selective state guidance.

use crate::error::{dim_err, Result};
use crate::ndgrad::{add_bias, channel_mix, concat, conv2d, max_dim, mean_dim, reshape, resize_bilinear, Real, Var};
use crate::params::{Bound, Init, ParamId};
use crate::selective_state::{make_scan_order, selective_scan, Direction, MmcOptions, Pointwise, SelectiveSsm};
use crate::morph_conv::Axis;

/// Channel-then-spatial attention.
#[derive(Clone, Debug)]
pub struct Cbam {
    channels: usize,
    hidden: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    spatial: ParamId,
    spatial_bias: ParamId,
}

impl Cbam {
    pub const SPATIAL_KERNEL: usize = 7;

    /// Hidden width `max(C / 16, 4)`.
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize) -> Self {
        let hidden = (channels / 16).max(4);
        let k = Self::SPATIAL_KERNEL;
        Self {
            channels,
            hidden,
            w1: init.he("mlp1.weight", &[hidden, channels], channels),
            b1: init.zeros("mlp1.bias", &[hidden]),
            w2: init.he("mlp2.weight", &[channels, hidden], hidden),
            b2: init.zeros("mlp2.bias", &[channels]),
            spatial: init.he("spatial.weight", &[1, 2, k, k], 2 * k * k),
            spatial_bias: init.zeros("spatial.bias", &[1]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Sigmoid channel gate `[B, C, 1, 1]`.
    pub fn channel_gate<'t, T: Real>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let &[b, c, h, w] = s.as_slice() else {
            return Err(dim_err!("cbam needs [B, C, H, W], got {s:?}"));
        };
        if c != self.channels {
            return Err(dim_err!("cbam built for {} channels, got {c}", self.channels));
        }
        let flat = reshape(x, &[b, c, h * w])?;
        let mlp = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            let hdn = add_bias(channel_mix(bound.get(self.w1), v)?, bound.get(self.b1))?.relu();
            add_bias(channel_mix(bound.get(self.w2), hdn)?, bound.get(self.b2))
        };
        let logits = mlp(mean_dim(flat, 2)?)?.add(mlp(max_dim(flat, 2)?)?)?;
        reshape(logits.sigmoid(), &[b, c, 1, 1])
    }

    /// Sigmoid spatial gate `[B, 1, H, W]`.
    pub fn spatial_gate<'t, T: Real>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let pooled = concat(&[mean_dim(x, 1)?, max_dim(x, 1)?], 1)?;
        let logits = conv2d(pooled, bound.get(self.spatial), 1, Self::SPATIAL_KERNEL / 2)?;
        Ok(add_bias(logits, bound.get(self.spatial_bias))?.sigmoid())
    }

    pub fn forward<'t, T: Real>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        cbam(x, self, bound)
    }
}

/// `x ⊙ channel gate`, then `⊙ spatial gate` of the result.
pub fn cbam<'t, T: Real>(x: Var<'t, T>, params: &Cbam, bound: &Bound<'t, T>) -> Result<Var<'t, T>> {
    let xc = x.mul(params.channel_gate(bound, x)?)?;
    xc.mul(params.spatial_gate(bound, xc)?)
}

/// `(1 - sigmoid(R)) ⊙ F`, with the one-channel logits broadcast over the
/// channels of `F`.
pub fn reverse_mask<'t, T: Real>(r_prev: Var<'t, T>, f_deep: Var<'t, T>) -> Result<Var<'t, T>> {
    let (rs, fs) = (r_prev.shape(), f_deep.shape());
    if rs.len() != 4 || fs.len() != 4 || rs[0] != fs[0] || rs[1] != 1 || rs[2..] != fs[2..] {
        return Err(dim_err!("reverse mask of logits {rs:?} over features {fs:?}"));
    }
    r_prev.neg().sigmoid().mul(f_deep)
}

/// Inputs of one guidance block.
#[derive(Clone, Copy, Debug)]
pub struct RssgInputs<'t, T> {
    /// Shallow edge feature, any resolution.
    pub f_edge: Var<'t, T>,
    /// Deep feature at the target resolution.
    pub f_deep: Var<'t, T>,
    /// Previous one-channel logits, any resolution.
    pub r_prev: Var<'t, T>,
}

/// Reverse selective state guidance.
#[derive(Clone, Debug)]
pub struct Rssg {
    channels: usize,
    fuse: Pointwise,
    ssm: SelectiveSsm,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Rssg {
    /// `edge_channels + channels -> channels`; `mmc = None` uses a 1x1
    /// convolution for the fusion step.
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        edge_channels: usize,
        channels: usize,
        mmc: Option<MmcOptions>,
        state_dim: usize,
    ) -> Result<Self> {
        let fuse = Pointwise::new(&mut init.scope("fuse"), edge_channels + channels, channels, mmc)?;
        let ssm = SelectiveSsm::new(&mut init.scope("ssm"), channels, state_dim);
        Ok(Self {
            channels,
            fuse,
            ssm,
            w1: init.he("mlp1.weight", &[channels, channels], channels),
            b1: init.zeros("mlp1.bias", &[channels]),
            w2: init.he("mlp2.weight", &[channels, channels], channels),
            b2: init.zeros("mlp2.bias", &[channels]),
        })
    }

    pub fn forward<'t, T: Real>(&self, bound: &Bound<'t, T>, inputs: RssgInputs<'t, T>) -> Result<Var<'t, T>> {
        rssg_forward(inputs, self, bound)
    }
}

/// `f_c = fuse(edge || r)`, `f_m = Ma(f_c)`, `f_l = mlp(f_m)`, returning
/// `f_l ⊙ f_m ⊙ f_c + F'`.
pub fn rssg_forward<'t, T: Real>(inputs: RssgInputs<'t, T>, params: &Rssg, bound: &Bound<'t, T>) -> Result<Var<'t, T>> {
    let fs = inputs.f_deep.shape();
    let &[b, c, h, w] = fs.as_slice() else {
        return Err(dim_err!("guidance needs [B, C, H, W] features, got {fs:?}"));
    };
    if c != params.channels {
        return Err(dim_err!("guidance block built for {} channels, got {c}", params.channels));
    }
    let edge = resize_bilinear(inputs.f_edge, h, w)?;
    let r_prev = resize_bilinear(inputs.r_prev, h, w)?;
    let r = reverse_mask(r_prev, inputs.f_deep)?;
    let f_c = params.fuse.forward(bound, concat(&[edge, r], 1)?)?;
    let order = make_scan_order(Axis::XExtend, Direction::Forward, h, w);
    let f_m = order.scatter(selective_scan(order.gather(f_c)?, &params.ssm.bind(bound))?, h, w)?;
    let flat = reshape(f_m, &[b, c, h * w])?;
    let hidden = add_bias(channel_mix(bound.get(params.w1), flat)?, bound.get(params.b1))?.relu();
    let f_l = add_bias(channel_mix(bound.get(params.w2), hidden)?, bound.get(params.b2))?.sigmoid();
    let f_l = reshape(f_l, &[b, c, h, w])?;
    f_l.mul(f_m)?.mul(f_c)?.add(inputs.f_deep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{Tape, Tensor};
    use crate::params::InitRoot;
    use rand::SeedableRng;

    #[test]
    fn reverse_mask_saturation() {
        let tape = Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::<f64>::randn(&[1, 4, 3, 3], 1.0, &mut rng);
        let fv = tape.constant(f.clone());
        let half = reverse_mask(tape.constant(Tensor::zeros(&[1, 1, 3, 3])), fv).unwrap().value();
        for (a, b) in half.data().iter().zip(f.data()) {
            assert_eq!(*a, 0.5 * b);
        }
        let off = reverse_mask(tape.constant(Tensor::full(&[1, 1, 3, 3], 1e4)), fv).unwrap().value();
        assert!(off.data().iter().all(|v| v.abs() < 1e-8));
        let on = reverse_mask(tape.constant(Tensor::full(&[1, 1, 3, 3], -1e4)), fv).unwrap().value();
        for (a, b) in on.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(reverse_mask(tape.constant(Tensor::zeros(&[1, 1, 2, 3])), fv).is_err());
    }

    #[test]
    fn cbam_open_gate_and_zero_input() {
        let mut root = InitRoot::<f64>::new(1);
        let block = Cbam::new(&mut root.init(), 8);
        assert_eq!(block.hidden(), 4);
        let mut store = root.store;
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let shape = store.get(id).shape().to_vec();
            let t = if name.ends_with("bias") && !name.starts_with("mlp1") {
                Tensor::full(&shape, 1e4)
            } else {
                Tensor::zeros(&shape)
            };
            store.set(id, t).unwrap();
        }
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 8, 4, 4], 1.0, &mut rng);
        let y = cbam(tape.constant(x.clone()), &block, &bound).unwrap().value();
        assert_eq!(y.data(), x.data());
        let z = cbam(tape.constant(Tensor::zeros(&[1, 8, 4, 4])), &block, &bound).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }
}
