//! Component ablations and their comparative table.

use std::fmt::Write;
use std::time::Instant;

use super::data::Sample;
use super::metrics::Metrics;
use super::schedule::TrainConfig;
use super::train::{evaluate, train, Model};
use crate::error::{Error, Result};
use crate::mm_unet::{count_params, NetworkConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Plain 1x1 convolutions in place of every MMC layer.
    Mmc,
    /// Concatenate-and-convolve decoder guidance in place of RSSG.
    Rssg,
    Both,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mmc" => Ok(Self::Mmc),
            "rssg" => Ok(Self::Rssg),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown ablation {other:?}; expected mmc, rssg or both"))),
        }
    }

    pub fn apply(self, config: &NetworkConfig) -> NetworkConfig {
        let mut c = config.clone();
        if matches!(self, Self::Mmc | Self::Both) {
            c.use_mmc = false;
        }
        if matches!(self, Self::Rssg | Self::Both) {
            c.use_rssg = false;
        }
        c
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Mmc => "w/o MMC",
            Self::Rssg => "w/o RSSG",
            Self::Both => "w/o both",
        }
    }
}

/// Label of an optional ablation; `None` is the full model.
pub fn variant_label(ablation: Option<Ablation>) -> &'static str {
    ablation.map_or("full", Ablation::label)
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: &'static str,
    pub params: usize,
    pub final_loss: f64,
    pub metrics: Metrics,
    pub seconds: f64,
}

/// Trains one network per variant on `dataset` and evaluates it there.
pub fn run_ablations(
    dataset: &[Sample],
    train_config: &TrainConfig,
    network: &NetworkConfig,
    variants: &[Option<Ablation>],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let config = v.map_or_else(|| network.clone(), |a| a.apply(network));
            let start = Instant::now();
            let report = train(Model::new(&config)?, dataset, train_config, None, |_| {})?;
            let metrics = evaluate(&report.model, dataset, train_config.threshold)?;
            Ok(AblationRow {
                variant: variant_label(v),
                params: count_params(&config)?,
                final_loss: report.log.last().map_or(f64::NAN, |e| e.loss),
                metrics,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// Fixed-width table with F1 differences against the first row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>8} {:>9} {:>7} {:>7} {:>7} {:>7} {:>8} {:>7}", "variant", "params", "loss", "ACC", "SE", "SP", "F1", "dF1", "time_s");
    let base = rows.first().map_or(0.0, |r| r.metrics.f1);
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>9.5} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>+8.2} {:>7.1}",
            r.variant,
            r.params,
            r.final_loss,
            100.0 * m.acc,
            100.0 * m.se,
            100.0 * m.sp,
            100.0 * m.f1,
            100.0 * (m.f1 - base),
            r.seconds
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toggles() {
        let c = NetworkConfig::default();
        let m = Ablation::parse("MMC").unwrap().apply(&c);
        assert!(!m.use_mmc && m.use_rssg);
        let r = Ablation::Rssg.apply(&c);
        assert!(r.use_mmc && !r.use_rssg);
        let b = Ablation::Both.apply(&c);
        assert!(!b.use_mmc && !b.use_rssg);
        assert!(Ablation::parse("bn").is_err());
    }

    #[test]
    fn table_reports_differences() {
        let row = |variant, tp| AblationRow {
            variant,
            params: 10,
            final_loss: 0.1,
            metrics: Metrics::from_counts(tp, 10, 880, 10),
            seconds: 1.0,
        };
        let t = ablation_table(&[row("full", 90), row("w/o MMC", 40)]);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].contains("+0.00"));
        assert!(lines[2].starts_with("w/o MMC") && lines[2].contains('-'));
    }
}
