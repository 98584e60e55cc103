//! `mmunet`: gradient checks, synthetic data, training, evaluation,
//! prediction and ablation runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mmunet_core::harness::{
    ablation_table, evaluate, load_dataset, predict, run_ablations, save_dataset, synth_vessels, train, Ablation, EpochLog,
    Layout, Model, RunConfig,
};
use mmunet_core::mm_unet::load_checkpoint;
use mmunet_core::verify::{gradient_suite, network_check, STEP, TOLERANCE};

#[derive(Parser)]
#[command(name = "mmunet", version, about = "MM-UNet vessel segmentation kernels")]
struct Cli {
    /// Disable a component: mmc, rssg or both (train and ablation only).
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablate: Option<Ablation>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write a synthetic vessel dataset.
    Synth {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print ACC SE SP F1 of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// drive, stare, native or a square side length.
        #[arg(long, default_value = "native")]
        layout: String,
    },
    /// Write the probability map and overlay of one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model and ablated variants, then print a comparison.
    Ablation {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).map_err(|e| e.to_string())
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn gradcheck(seed: u64) -> Result<bool> {
    let start = Instant::now();
    let entries = gradient_suite(seed)?;
    let mut ok = true;
    for e in &entries {
        let r = &e.report;
        ok &= r.passed;
        println!(
            "{} {:<44} max_rel {:.3e} probes {:>4} draws {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.op_name,
            r.max_relative_error,
            r.probes,
            e.draws
        );
    }
    let passed = entries.iter().filter(|e| e.report.passed).count();
    println!(
        "{passed}/{} checks passed (tolerance {TOLERANCE:e}, step {STEP:e}) in {:.1}s",
        entries.len(),
        start.elapsed().as_secs_f64()
    );
    let net = network_check(seed, 3, TOLERANCE, 1e-5)?;
    ok &= net.passed;
    println!(
        "{} network directional derivatives max_rel {:.3e}",
        if net.passed { "PASS" } else { "FAIL" },
        net.max_relative_error
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    if cli.ablate.is_some() && !matches!(cli.command, Command::Train { .. } | Command::Ablation { .. }) {
        bail!("--ablate applies to train and ablation only");
    }
    match cli.command {
        Command::Gradcheck { seed } => return gradcheck(seed),
        Command::Synth { seed, count, size, out } => {
            let samples = synth_vessels(seed, count, size)?;
            save_dataset(&samples, &out)?;
            println!("wrote {} samples of {size}x{size} to {}", samples.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let mut rc = run_config(config.as_deref())?;
            if let Some(a) = cli.ablate {
                rc.network = a.apply(&rc.network);
            }
            let dataset = load_dataset(&data, rc.layout)?;
            let Some(first) = dataset.first() else {
                bail!("no images under {}", data.join("images").display());
            };
            rc.network.input_hw = (first.height(), first.width());
            println!("{}", EpochLog::CSV_HEADER);
            let report = train(Model::new(&rc.network)?, &dataset, &rc.train, Some(&out), |e| println!("{}", e.csv_row()))?;
            println!("best f1_train {:.4} at epoch {}; checkpoints in {}", report.best_f1, report.best_epoch, out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            threshold,
            layout,
        } => {
            let dataset = load_dataset(&data, Layout::parse(&layout)?)?;
            let Some(first) = dataset.first() else {
                bail!("no images under {}", data.join("images").display());
            };
            let model = Model::from_params(load_checkpoint(&checkpoint)?, (first.height(), first.width()))?;
            let m = evaluate(&model, &dataset, threshold)?;
            println!("ACC SE SP F1");
            println!("{m}");
        }
        Command::Predict { checkpoint, image, out } => {
            let written = predict(&checkpoint, &image, &out)?;
            println!("{}", written.probability_pgm.display());
            println!("{}", written.overlay_ppm.display());
        }
        Command::Ablation { config, data } => {
            let rc = run_config(config.as_deref())?;
            let dataset = load_dataset(&data, rc.layout)?;
            let Some(first) = dataset.first() else {
                bail!("no images under {}", data.join("images").display());
            };
            let mut network = rc.network.clone();
            network.input_hw = (first.height(), first.width());
            let variants = match cli.ablate {
                Some(a) => vec![None, Some(a)],
                None => vec![None, Some(Ablation::Mmc), Some(Ablation::Rssg), Some(Ablation::Both)],
            };
            let rows = run_ablations(&dataset, &rc.train, &network, &variants)?;
            print!("{}", ablation_table(&rows));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
