//! `bkf`: dataset generation, filtering, BKNet training and the benchmark grid.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure (every
//! grid cell failed, training diverged, or a gradient check failed), 1 any
//! other error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bkf_core::bknet::{
    default_grad_check, evaluate_bknet, load_checkpoint, run_bknet, save_checkpoint, train, write_loss_curve,
    TrainingData,
};
use bkf_core::datagen::{format_db, write_dataset};
use bkf_core::experiment::{
    bit_model, experiment_data, ideal_view, initial_covariance, report_to_table, run_experiment,
};
use bkf_core::{mse_db, Error, ExperimentConfig, GainNetwork, NetworkConfig, SequencePair, Variant};

#[derive(Parser, Debug)]
#[command(name = "bkf", version, about = "State estimation from 1-bit quantized observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset seed and the only training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for grid cells and gradient batches.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/validation/test datasets for every ADC count.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Run one filter over the test set and write its trajectory.
    Filter {
        #[command(flatten)]
        common: Common,
        /// ekf_ideal, ekf_on_bits, bkf or rbkf.
        #[arg(long, default_value = "bkf")]
        variant: String,
        /// ADCs per feature; defaults to the first configured count.
        #[arg(long)]
        adc: Option<usize>,
    },
    /// Train BKNet and save a checkpoint with its loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        adc: Option<usize>,
    },
    /// Evaluate a trained checkpoint on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        adc: Option<usize>,
    },
    /// Run the full experiment grid and write the report.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Also print these result tables (I to VI).
        #[arg(long = "table")]
        tables: Vec<String>,
    },
    /// Check reverse-mode gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Failure that maps to exit code 3.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct NumericFailure(String);

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.data_seed = seed;
        cfg.seeds = vec![seed];
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
        cfg.train.threads = t;
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> anyhow::Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn pick_adc(cfg: &ExperimentConfig, adc: Option<usize>) -> anyhow::Result<usize> {
    match adc.or(cfg.adc_counts.first().copied()) {
        Some(0) => Err(Error::Config("--adc must be >= 1".into()).into()),
        Some(a) => Ok(a),
        None => Err(Error::Config("no ADC count configured".into()).into()),
    }
}

/// One row per step: sequence, step, true state, estimate.
fn write_trajectories(path: &Path, seqs: &[SequencePair], estimates: &[DMatrix<f64>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let m = seqs.first().map_or(0, |s| s.states.ncols());
    let mut header = vec!["sequence".to_string(), "t".to_string()];
    header.extend((1..=m).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("xhat{i}")));
    w.write_record(&header)?;
    for (k, (s, e)) in seqs.iter().zip(estimates).enumerate() {
        for t in 0..s.len() {
            let mut row = vec![k.to_string(), (t + 1).to_string()];
            row.extend(s.states.row(t).iter().map(|v| v.to_string()));
            row.extend(e.row(t).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn generate(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let dir = out_dir(common)?;
    for &adc in &cfg.adc_counts {
        let data = experiment_data(&cfg, adc, true)?;
        let splits = [("train", data.train.as_ref()), ("val", data.val.as_ref()), ("test", Some(&data.test))];
        for (name, ds) in splits {
            let Some(ds) = ds else { continue };
            let target = dir.join(format!("{}_a{adc}_{name}", cfg.model.name()));
            write_dataset(&target, ds)?;
            println!("{}: {} sequences of length {}", target.display(), ds.len(), ds.meta.length);
        }
    }
    Ok(())
}

fn filter(common: &Common, variant: &str, adc: Option<usize>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let variant: Variant = variant.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let adc = pick_adc(&cfg, adc)?;
    let dir = out_dir(common)?;
    let data = experiment_data(&cfg, adc, false)?;
    let s0 = initial_covariance(&cfg);
    let (model, seqs) = if variant == Variant::EkfIdeal {
        ideal_view(&cfg, &data)?
    } else {
        (bit_model(&cfg, &data.bank)?, data.test.sequences.clone())
    };
    let mut estimates = Vec::with_capacity(seqs.len());
    let mut clamps = 0;
    for s in &seqs {
        let run = bkf_core::run_filter(&model, &data.bank, variant, s, &s0)?;
        clamps += run.diagnostics.clamps;
        estimates.push(run.estimates);
    }
    let truth: Vec<_> = seqs.iter().map(|s| s.states.clone()).collect();
    let mse = mse_db(&estimates, &truth)?;
    let path = dir.join(format!("trajectory_{variant}_a{adc}.csv"));
    write_trajectories(&path, &seqs, &estimates)?;
    println!("{variant} at {adc} ADCs: MSE {} ({clamps} clamps), trajectory in {}", format_db(mse), path.display());
    Ok(())
}

fn train_cmd(common: &Common, adc: Option<usize>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let adc = pick_adc(&cfg, adc)?;
    let dir = out_dir(common)?;
    let data = experiment_data(&cfg, adc, true)?;
    let model = bit_model(&cfg, &data.bank)?;
    let s0 = initial_covariance(&cfg);
    let (train_ds, val_ds) = (data.train.as_ref().expect("requested"), data.val.as_ref().expect("requested"));
    let td = TrainingData {
        model: &model,
        bank: &data.bank,
        sigma0: &s0,
        train: &train_ds.sequences,
        validation: &val_ds.sequences,
    };
    for &seed in &cfg.seeds {
        let net = GainNetwork::new(
            NetworkConfig::new(cfg.state_dim(), cfg.features()),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        let tcfg = bkf_core::TrainConfig { seed, ..cfg.train };
        let outcome = train(net, &td, &tcfg)?;
        let stem = format!("bknet_a{adc}_s{seed}");
        save_checkpoint(&dir.join(format!("{stem}.bknet")), &outcome.net)?;
        write_loss_curve(&dir.join(format!("{stem}_loss.csv")), &outcome.curve)?;
        let test = evaluate_bknet(&outcome.net, &model, &data.bank, &data.test.sequences, &s0)?;
        println!(
            "seed {seed}: selected epoch {}, test MSE {}, checkpoint {}",
            outcome.selected_epoch,
            format_db(test),
            dir.join(format!("{stem}.bknet")).display()
        );
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, adc: Option<usize>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let adc = pick_adc(&cfg, adc)?;
    let dir = out_dir(common)?;
    let net = load_checkpoint(checkpoint)?;
    if net.config.state_dim != cfg.state_dim() || net.config.obs_dim != cfg.features() {
        return Err(Error::Config("checkpoint does not match the configured model".into()).into());
    }
    let data = experiment_data(&cfg, adc, false)?;
    let model = bit_model(&cfg, &data.bank)?;
    let s0 = initial_covariance(&cfg);
    let mut estimates = Vec::new();
    for s in &data.test.sequences {
        estimates.push(run_bknet(&net, &model, &data.bank, s, &s0)?.estimates);
    }
    let truth: Vec<_> = data.test.sequences.iter().map(|s| s.states.clone()).collect();
    let mse = mse_db(&estimates, &truth)?;
    let path = dir.join(format!("trajectory_bknet_a{adc}.csv"));
    write_trajectories(&path, &data.test.sequences, &estimates)?;
    println!("bknet at {adc} ADCs: MSE {}, trajectory in {}", format_db(mse), path.display());
    Ok(())
}

fn bench(common: &Common, tables: &[String]) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    cfg.paths.out_dir = Some(out_dir(common)?);
    let report = run_experiment(&cfg)?;
    for id in tables {
        println!("table {id}\n{}", report_to_table(&report, id)?);
    }
    let dir = cfg.paths.out_dir.as_ref().expect("set above");
    println!("{} cells, report in {}", report.cells.len(), dir.join("report.csv").display());
    if report.all_failed() {
        bail!(NumericFailure("every grid cell failed".into()));
    }
    Ok(())
}

fn gradcheck(seed: u64, eps: f64, tolerance: f64) -> anyhow::Result<()> {
    let report = default_grad_check(seed, eps)?;
    println!(
        "max relative error {:.3e} over {} parameters (tolerance {tolerance:e})",
        report.max_rel_error, report.parameters
    );
    if !(report.max_rel_error < tolerance) {
        bail!(NumericFailure("gradient check failed".into()));
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NumericFailure>().is_some() {
        return 3;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::Numeric { .. } | Error::Divergence { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { common } => generate(common),
        Command::Filter { common, variant, adc } => filter(common, variant, *adc),
        Command::Train { common, adc } => train_cmd(common, *adc),
        Command::Eval { common, checkpoint, adc } => eval(common, checkpoint, *adc),
        Command::Bench { common, tables } => bench(common, tables),
        Command::Gradcheck { seed, eps, tolerance } => gradcheck(*seed, *eps, *tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
