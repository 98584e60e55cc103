//! The U-shaped network: residual encoder, channel unification, CBAM edge
//! branch, guided decoder with side predictions and a fused sigmoid head.

mod checkpoint;
mod config;

pub use checkpoint::{infer_config, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{NetworkConfig, WidthMult, STAGE_DEPTHS};

use crate::error::{dim_err, Error, Result};
use crate::guidance::{Cbam, Rssg, RssgInputs};
use crate::ndgrad::{add_bias, channel_mix, concat, conv2d, max_pool2d, resize_bilinear, subsample, Real, Var};
use crate::params::{Bound, Init, InitRoot, ParamId, ParamStore};
use crate::selective_state::Pointwise;

/// Spatial convolution with bias.
#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            weight: s.he("weight", &[cout, cin, k, k], cin * k * k),
            bias: s.zeros("bias", &[cout]),
            stride,
            padding: k / 2,
        }
    }

    fn zero_init<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            weight: s.zeros("weight", &[cout, cin, k, k]),
            bias: s.zeros("bias", &[cout]),
            stride: 1,
            padding: k / 2,
        }
    }

    fn forward<'t, T: Real>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        add_bias(conv2d(x, bound.get(self.weight), self.stride, self.padding)?, bound.get(self.bias))
    }
}

/// One-channel 1x1 prediction head.
#[derive(Clone, Debug)]
struct Head {
    weight: ParamId,
    bias: ParamId,
}

impl Head {
    fn new<T: Real>(init: &mut Init<'_, T>, name: &str, cin: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            weight: s.he("weight", &[1, cin], cin),
            bias: s.zeros("bias", &[1]),
        }
    }

    fn forward<'t, T: Real>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        add_bias(channel_mix(bound.get(self.weight), x)?, bound.get(self.bias))
    }
}

/// Residual block of two 3x3 convolutions; the second starts at zero so the
/// block starts as its shortcut.
#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv,
    conv2: Conv,
    stride: usize,
    shortcut: Option<Pointwise>,
}

impl BasicBlock {
    fn new<T: Real>(init: &mut Init<'_, T>, cin: usize, cout: usize, stride: usize, config: &NetworkConfig) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some(Pointwise::new(&mut init.scope("shortcut"), cin, cout, config.mmc_options())?)
        } else {
            None
        };
        Ok(Self {
            conv1: Conv::new(init, "conv1", cin, cout, 3, stride),
            conv2: Conv::zero_init(init, "conv2", cout, cout, 3),
            stride,
            shortcut,
        })
    }

    fn forward<'t, T: Real>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv1.forward(bound, x)?.relu();
        let y = self.conv2.forward(bound, y)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(bound, subsample(x, self.stride)?)?,
            None => x,
        };
        Ok(y.add(skip)?.relu())
    }
}

#[derive(Clone, Debug)]
enum Guide {
    Rssg(Rssg),
    Plain(Conv),
}

#[derive(Clone, Debug)]
struct DecoderStage {
    guide: Guide,
    refine1: Conv,
    refine2: Conv,
    head: Head,
}

/// Intermediate tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardArtifacts<'t, T> {
    /// `F_1 .. F_5`.
    pub encoder_feats: Vec<Var<'t, T>>,
    /// `F_3', F_4', F_5'`.
    pub unified: Vec<Var<'t, T>>,
    /// `F_2` reduced to the unified width.
    pub reduced_f2: Var<'t, T>,
    pub edge: Var<'t, T>,
    /// Deepest first: `R_5, R_4, R_3, R_2, R_1`.
    pub side_logits: Vec<Var<'t, T>>,
    pub fused_logits: Var<'t, T>,
    /// `[B, 1, H, W]` in `[0, 1]`.
    pub probability: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct MmUnet {
    config: NetworkConfig,
    stem: Conv,
    stages: Vec<Vec<BasicBlock>>,
    unify: Vec<Pointwise>,
    reduce2: Pointwise,
    cbam: Cbam,
    head5: Head,
    decoder: Vec<DecoderStage>,
    fusion: Pointwise,
}

impl MmUnet {
    /// Builds the layer graph and its freshly initialized parameters.
    pub fn new<T: Real>(config: &NetworkConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let ch = config.stage_channels()?;
        let u = config.unified_channels()?;
        let mmc = config.mmc_options();
        let mut root = InitRoot::<T>::new(config.seed);
        let mut init = root.init();

        let stem = Conv::new(&mut init, "stem", 3, ch[0], 7, 2);
        let mut stages = Vec::new();
        let mut cin = ch[0];
        for (s, &depth) in STAGE_DEPTHS.iter().enumerate() {
            let cout = ch[s + 1];
            let mut blocks = Vec::new();
            for j in 0..depth {
                let stride = if j == 0 && s > 0 { 2 } else { 1 };
                let mut scope = init.scope(&format!("enc{}.{j}", s + 2));
                blocks.push(BasicBlock::new(&mut scope, cin, cout, stride, config)?);
                cin = cout;
            }
            stages.push(blocks);
        }
        let mut unify = Vec::new();
        for i in 3..=5 {
            unify.push(Pointwise::new(&mut init.scope(&format!("unify{i}")), ch[i - 1], u, mmc)?);
        }
        let reduce2 = Pointwise::new(&mut init.scope("reduce2"), ch[1], u, mmc)?;
        let cbam = Cbam::new(&mut init.scope("cbam"), ch[0]);
        let head5 = Head::new(&mut init, "head5", u);
        let mut decoder = Vec::new();
        for i in (1..=4).rev() {
            let mut s = init.scope(&format!("dec{i}"));
            let skip = if i == 1 { ch[0] } else { u };
            let guide = if config.use_rssg {
                if skip != u {
                    return Err(Error::Config(format!("stage {i} skip width {skip} differs from {u}")));
                }
                Guide::Rssg(Rssg::new(&mut s.scope("rssg"), ch[0], u, mmc, config.ssm_state_dim)?)
            } else {
                Guide::Plain(Conv::new(&mut s, "merge", ch[0] + skip, u, 3, 1))
            };
            decoder.push(DecoderStage {
                guide,
                refine1: Conv::new(&mut s, "refine1", 2 * u, u, 3, 1),
                refine2: Conv::new(&mut s, "refine2", u, u, 3, 1),
                head: Head::new(&mut s, "head", u),
            });
        }
        let fusion = Pointwise::new(&mut init.scope("fusion"), 5, 1, mmc)?;
        let net = Self {
            config: config.clone(),
            stem,
            stages,
            unify,
            reduce2,
            cbam,
            head5,
            decoder,
            fusion,
        };
        Ok((net, root.store))
    }

    /// Rebuilds the network described by a loaded parameter set and checks
    /// that every name and shape agrees with it.
    pub fn from_params(params: &ParamStore<f32>, input_hw: (usize, usize)) -> Result<Self> {
        let config = infer_config(params, input_hw)?;
        let (net, fresh) = Self::new::<f32>(&config)?;
        if fresh.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, the network needs {}",
                params.len(),
                fresh.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in fresh.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Format(format!("checkpoint tensor {n2} {:?} where {n1} {:?} was expected", t2.shape(), t1.shape())));
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        let &[_, c, h, w] = x else {
            return Err(dim_err!("network input must be [B, 3, H, W], got {x:?}"));
        };
        if c != 3 {
            return Err(dim_err!("network input must have 3 channels, got {c}"));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input {h}x{w} must be a positive multiple of 32")));
        }
        Ok(())
    }

    /// `F_1 .. F_5` at `H/2 .. H/32`.
    pub fn encode<'t, T: Real>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.check_input(&x.shape())?;
        let f1 = self.stem.forward(bound, x)?.relu();
        let mut feats = vec![f1];
        let mut h = max_pool2d(f1, 3, 2, 1)?;
        for blocks in &self.stages {
            for b in blocks {
                h = b.forward(bound, h)?;
            }
            feats.push(h);
        }
        Ok(feats)
    }

    /// `F_3', F_4', F_5'`.
    pub fn unify_channels<'t, T: Real>(&self, bound: &Bound<'t, T>, feats: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        if feats.len() != 5 {
            return Err(dim_err!("unification needs five encoder features, got {}", feats.len()));
        }
        self.unify.iter().zip(&feats[2..]).map(|(p, &f)| p.forward(bound, f)).collect()
    }

    /// Skip feature for decoder stage `i` (4, 3, 2, 1).
    fn skip_for<'t, T: Real>(i: usize, feats: &[Var<'t, T>], unified: &[Var<'t, T>], reduced_f2: Var<'t, T>) -> Var<'t, T> {
        match i {
            1 => feats[0],
            2 => reduced_f2,
            _ => unified[i - 3],
        }
    }

    pub fn forward<'t, T: Real>(&self, bound: &Bound<'t, T>, x: Var<'t, T>) -> Result<ForwardArtifacts<'t, T>> {
        let feats = self.encode(bound, x)?;
        let unified = self.unify_channels(bound, &feats)?;
        let reduced_f2 = self.reduce2.forward(bound, feats[1])?;
        let edge = self.cbam.forward(bound, feats[0])?;
        let (side_logits, fused_logits) = self.decode(bound, &feats, &unified, reduced_f2, edge)?;
        let probability = fused_logits.sigmoid();
        Ok(ForwardArtifacts {
            encoder_feats: feats,
            unified,
            reduced_f2,
            edge,
            side_logits,
            fused_logits,
            probability,
        })
    }

    /// Side logits (deepest first) and the fused full-resolution logits.
    pub fn decode<'t, T: Real>(
        &self,
        bound: &Bound<'t, T>,
        feats: &[Var<'t, T>],
        unified: &[Var<'t, T>],
        reduced_f2: Var<'t, T>,
        edge: Var<'t, T>,
    ) -> Result<(Vec<Var<'t, T>>, Var<'t, T>)> {
        let mut prev = unified[2];
        let mut logits = vec![self.head5.forward(bound, prev)?];
        for (stage, i) in self.decoder.iter().zip((1..=4).rev()) {
            let skip = Self::skip_for(i, feats, unified, reduced_f2);
            let s = skip.shape();
            let (h, w) = (s[2], s[3]);
            let up = resize_bilinear(prev, h, w)?;
            let guided = match &stage.guide {
                Guide::Rssg(r) => r.forward(
                    bound,
                    RssgInputs {
                        f_edge: edge,
                        f_deep: skip,
                        r_prev: *logits.last().unwrap(),
                    },
                )?,
                Guide::Plain(conv) => conv.forward(bound, concat(&[resize_bilinear(edge, h, w)?, skip], 1)?)?,
            };
            let d = stage.refine1.forward(bound, concat(&[up, guided], 1)?)?.relu();
            prev = stage.refine2.forward(bound, d)?.relu();
            logits.push(stage.head.forward(bound, prev)?);
        }
        let xs = feats[0].shape();
        let (h, w) = (xs[2] * 2, xs[3] * 2);
        let full: Vec<Var<'t, T>> = logits.iter().map(|&l| resize_bilinear(l, h, w)).collect::<Result<_>>()?;
        let fused = self.fusion.forward(bound, concat(&full, 1)?)?;
        Ok((logits, fused))
    }
}

/// Exact number of learnable scalars of a configuration.
pub fn count_params(config: &NetworkConfig) -> Result<usize> {
    let (_, store) = MmUnet::new::<f32>(config)?;
    Ok(store.numel())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{Tape, Tensor};

    #[test]
    fn width_mult_parsing_and_scaling() {
        let w: WidthMult = "1/8".parse().unwrap();
        assert_eq!(w.scale(64).unwrap(), 8);
        assert_eq!("2/16".parse::<WidthMult>().unwrap(), w);
        assert_eq!("1".parse::<WidthMult>().unwrap(), WidthMult::ONE);
        assert!("0".parse::<WidthMult>().is_err());
        assert!("x/2".parse::<WidthMult>().is_err());
        assert!(WidthMult::new(1, 3).unwrap().scale(64).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = NetworkConfig::default();
        assert!(c.validate().is_ok());
        c.input_hw = (48, 64);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.input_hw = (64, 64);
        c.width_mult = WidthMult::new(1, 32).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn eighth_width_shapes() {
        let config = NetworkConfig::default();
        let (net, store) = MmUnet::new::<f32>(&config).unwrap();
        let tape = Tape::new();
        let bound = store.bind_frozen(&tape);
        let x = tape.constant(Tensor::full(&[2, 3, 64, 64], 0.5f32));
        let art = net.forward(&bound, x).unwrap();
        let chans = [8, 8, 16, 32, 64];
        for (i, f) in art.encoder_feats.iter().enumerate() {
            let side = 64 >> (i + 1);
            assert_eq!(f.shape(), vec![2, chans[i], side, side]);
        }
        for u in &art.unified {
            assert_eq!(u.shape()[1], 8);
        }
        assert_eq!(art.probability.shape(), vec![2, 1, 64, 64]);
        assert!(art.probability.value().data().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
