//! `key = value` run configuration files with `#` comments.

use std::path::Path;

use super::data::Layout;
use super::schedule::{LossKind, TrainConfig};
use crate::error::{Error, Result};
use crate::mm_unet::NetworkConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub layout: Layout,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            network: NetworkConfig::default(),
            layout: Layout::Native,
        }
    }
}

fn value<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {v:?}")))
}

fn flag(key: &str, v: &str, line: usize) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: {key} expects a boolean, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, v) = body
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value, got {body:?}")))?;
            let (t, n) = (&mut c.train, &mut c.network);
            match key {
                "epochs" => t.epochs = value(key, v, line)?,
                "batch_size" => t.batch_size = value(key, v, line)?,
                "lr_init" => t.lr_init = value(key, v, line)?,
                "lr_min" => t.lr_min = value(key, v, line)?,
                "warmup_epochs" => t.warmup_epochs = value(key, v, line)?,
                "wd_start" => t.wd_start = value(key, v, line)?,
                "wd_end" => t.wd_end = value(key, v, line)?,
                "beta1" => t.betas.0 = value(key, v, line)?,
                "beta2" => t.betas.1 = value(key, v, line)?,
                "eps" => t.eps = value(key, v, line)?,
                "loss" => t.loss_kind = LossKind::parse(v)?,
                "deep_supervision" => t.deep_supervision = flag(key, v, line)?,
                "threshold" => t.threshold = value(key, v, line)?,
                "seed" => {
                    t.seed = value(key, v, line)?;
                    n.seed = t.seed;
                }
                "width_mult" => n.width_mult = v.parse()?,
                "input_size" => {
                    let s = value(key, v, line)?;
                    n.input_hw = (s, s);
                }
                "use_mmc" => n.use_mmc = flag(key, v, line)?,
                "use_rssg" => n.use_rssg = flag(key, v, line)?,
                "ssm_state_dim" => n.ssm_state_dim = value(key, v, line)?,
                "mmc_kernel" => n.mmc_kernel = value(key, v, line)?,
                "bidirectional" => n.bidirectional = flag(key, v, line)?,
                "layout" => c.layout = Layout::parse(v)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
            }
        }
        c.train.validate()?;
        c.network.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let c = RunConfig::parse("# desk run\nepochs = 10\nwidth_mult = 1/8  # eighth\nuse_mmc = false\nloss = bce\nlayout = 64\n").unwrap();
        assert_eq!(c.train.epochs, 10);
        assert!(!c.network.use_mmc);
        assert_eq!(c.train.loss_kind, LossKind::Bce);
        assert_eq!(c.layout, Layout::Square(64));
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(matches!(RunConfig::parse("epoch = 3"), Err(Error::Config(m)) if m.contains("epoch")));
        assert!(RunConfig::parse("epochs").is_err());
        assert!(RunConfig::parse("epochs = many").is_err());
    }
}
