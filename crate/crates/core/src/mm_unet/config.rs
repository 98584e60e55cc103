use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::selective_state::MmcOptions;

/// Positive rational channel multiplier, e.g. `1/8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WidthMult {
    num: usize,
    den: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

impl WidthMult {
    pub fn new(num: usize, den: usize) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("width multiplier {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(Self { num: num / g, den: den / g })
    }

    pub const ONE: WidthMult = WidthMult { num: 1, den: 1 };

    /// `base * num / den`, which must be a whole number.
    pub fn scale(&self, base: usize) -> Result<usize> {
        if (base * self.num) % self.den != 0 {
            return Err(Error::Config(format!("{base} channels scaled by {self} is not whole")));
        }
        Ok(base * self.num / self.den)
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for WidthMult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for WidthMult {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse width multiplier {s:?}"));
        match s.trim().split_once('/') {
            Some((n, d)) => WidthMult::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => WidthMult::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

/// Encoder depths per residual stage.
pub const STAGE_DEPTHS: [usize; 4] = [3, 4, 6, 3];

const BASE_CHANNELS: [usize; 5] = [64, 64, 128, 256, 512];
const UNIFIED: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub width_mult: WidthMult,
    pub input_hw: (usize, usize),
    pub use_mmc: bool,
    pub use_rssg: bool,
    pub ssm_state_dim: usize,
    pub mmc_kernel: usize,
    pub bidirectional: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width_mult: WidthMult { num: 1, den: 8 },
            input_hw: (64, 64),
            use_mmc: true,
            use_rssg: true,
            ssm_state_dim: 8,
            mmc_kernel: 3,
            bidirectional: false,
            seed: 42,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input {h}x{w} must be a positive multiple of 32")));
        }
        for c in self.stage_channels()? {
            if c < 4 {
                return Err(Error::Config(format!(
                    "width multiplier {} leaves a stage with {c} channels (minimum 4)",
                    self.width_mult
                )));
            }
        }
        if self.ssm_state_dim == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if self.mmc_kernel < 3 || self.mmc_kernel % 2 == 0 {
            return Err(Error::Config(format!("MMC kernel {} must be odd and at least 3", self.mmc_kernel)));
        }
        Ok(())
    }

    /// Channels of `F_1 .. F_5`.
    pub fn stage_channels(&self) -> Result<[usize; 5]> {
        let mut out = [0; 5];
        for (o, &b) in out.iter_mut().zip(&BASE_CHANNELS) {
            *o = self.width_mult.scale(b)?;
        }
        Ok(out)
    }

    /// Width shared by the unified features and every decoder stage.
    pub fn unified_channels(&self) -> Result<usize> {
        self.width_mult.scale(UNIFIED)
    }

    pub fn mmc_options(&self) -> Option<MmcOptions> {
        self.use_mmc.then_some(MmcOptions {
            kernel_len: self.mmc_kernel,
            state_dim: self.ssm_state_dim,
            bidirectional: self.bidirectional,
        })
    }
}
