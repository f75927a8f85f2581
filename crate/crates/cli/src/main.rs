//! `sage`: generate the synthetic benchmark, train models, aggregate results
//! and run hyperparameter ablations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{info, warn};

use sage_core::checkpoint;
use sage_core::config::{ExperimentConfig, OutputLayout};
use sage_core::model::TinyCnn;
use sage_core::report;
use sage_core::synth::{self, Dataset, SynthConfig};
use sage_core::train::{self, AblationAxis, RunRecord, TrainMode};
use sage_core::Error;

const SNAPSHOT: &str = "config.toml";

#[derive(Parser)]
#[command(name = "sage", version, about = "Saliency-guided training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset under `<output>/dataset`.
    Gen {
        #[arg(long, required_unless_present = "dump_defaults")]
        config: Option<PathBuf>,
        /// Print the fully spelled-out default configuration and exit.
        #[arg(long)]
        dump_defaults: bool,
    },
    /// Train one run, or every configured mode x seed when both flags are omitted.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize finished runs: per-mode mean and std AUROC plus the sage - sage_flipped gap.
    Report {
        /// The `runs` directory written by `train`.
        runs: PathBuf,
    },
    /// Sweep one loss hyperparameter over its grid with the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["tau", "sigma"])]
        axis: String,
    },
}

/// Process exit codes by failure category.
mod exit {
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const NUMERIC: u8 = 5;
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidParameter { .. } => exit::CONFIG,
                Error::Io { .. } | Error::Image { .. } | Error::Csv(_) | Error::Json(_) | Error::Checkpoint(_) => {
                    exit::IO
                }
                Error::Diverged { .. } | Error::NonFinite(_) | Error::ZeroNorm { .. } | Error::NonPositiveLog { .. } => {
                    exit::NUMERIC
                }
                _ => exit::FAILURE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Gen { dump_defaults: true, .. } => {
            print!("{}", ExperimentConfig::default().to_toml_string());
            Ok(())
        }
        Command::Gen { config, .. } => cmd_gen(&config.expect("required by clap")),
        Command::Train { config, mode, seed } => cmd_train(&config, mode, seed),
        Command::Report { runs } => cmd_report(&runs),
        Command::Ablate { config, axis } => cmd_ablate(&config, axis.parse()?),
    }
}

fn write_snapshot(cfg: &ExperimentConfig, path: &Path) -> anyhow::Result<()> {
    fs::write(path, cfg.to_toml_string()).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen(config: &Path) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = OutputLayout::new(cfg.output_root()).dataset_dir();
    let ds = synth::generate_dataset(&cfg.dataset)?;
    synth::write_dataset(&ds, &dir)?;
    write_snapshot(&cfg, &dir.join(SNAPSHOT))?;
    println!(
        "wrote {} train + {} test samples to {}",
        ds.train.len(),
        ds.test.len(),
        dir.display()
    );
    Ok(())
}

/// Dataset on disk plus the generator settings recorded next to it.
fn load_dataset(cfg: &ExperimentConfig, config_path: &Path) -> anyhow::Result<(Dataset, SynthConfig)> {
    let dir = OutputLayout::new(cfg.output_root()).dataset_dir();
    if !dir.join("labels.csv").is_file() {
        bail!(Error::io(
            &dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no dataset found; run `sage gen --config {}` first", config_path.display()),
            ),
        ));
    }
    let generated = ExperimentConfig::load(&dir.join(SNAPSHOT))
        .map(|c| c.dataset)
        .unwrap_or_else(|_| cfg.dataset.clone());
    if generated != cfg.dataset {
        warn!("dataset on disk was generated with different [dataset] settings; recording the on-disk ones");
    }
    Ok((synth::read_dataset(&dir)?, generated))
}

fn save_run(layout: &OutputLayout, record: &RunRecord, model: &TinyCnn) -> anyhow::Result<()> {
    let dir = layout.run_dir(record.mode, record.seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    report::write_record(record, &dir.join("record.json"))?;
    checkpoint::save(model.params(), &dir.join("model.ckpt"))?;
    Ok(())
}

fn cmd_train(config: &Path, mode: Option<TrainMode>, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let (data, generated) = load_dataset(&cfg, config)?;
    let layout = OutputLayout::new(cfg.output_root());
    let setup = cfg.train_setup();

    let modes = mode.map_or_else(|| cfg.run.modes.clone(), |m| vec![m]);
    let seeds = seed.map_or_else(|| cfg.run.seeds.clone(), |s| vec![s]);
    let jobs: Vec<(TrainMode, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();

    if let [(m, s)] = jobs.as_slice() {
        let (mut record, model) = train::train_run(*m, &data, &setup, *s)?;
        record.config.dataset = Some(generated);
        save_run(&layout, &record, &model)?;
        println!("{m} seed {s}: final AUROC {:.4}", record.final_auroc);
        return Ok(());
    }
    info!("training {} runs", jobs.len());
    let results = train::train_many(&jobs, &data, &setup)?;
    for (mut record, model) in results {
        record.config.dataset = Some(generated.clone());
        save_run(&layout, &record, &model)?;
        println!("{} seed {}: final AUROC {:.4}", record.mode, record.seed, record.final_auroc);
    }
    Ok(())
}

fn cmd_report(runs: &Path) -> anyhow::Result<()> {
    if !runs.is_dir() {
        bail!(Error::io(
            runs,
            std::io::Error::new(std::io::ErrorKind::NotFound, "runs directory not found")
        ));
    }
    let records = report::collect_records(runs)?;
    let summary = report::summarize(&records).with_context(|| format!("no record.json files under {}", runs.display()))?;
    for w in &summary.warnings {
        warn!("{w}");
    }
    print!("{}", report::format_summary(&summary));
    let csv = runs.join("summary.csv");
    report::write_summary_csv(&summary, &csv)?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_ablate(config: &Path, axis: AblationAxis) -> anyhow::Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let (data, generated) = load_dataset(&cfg, config)?;
    let layout = OutputLayout::new(cfg.output_root());
    let table = train::run_ablation(axis, &axis.grid(), &data, &cfg.train_setup(), &cfg.run.seeds)?;
    let dir = layout.ablation_dir();
    report::write_ablation(&table, &dir)?;
    write_snapshot(&cfg, &dir.join(format!("{}_{SNAPSHOT}", axis.as_str())))?;
    for (run, record) in table.runs.iter().zip(&table.records) {
        let d = dir.join(axis.as_str()).join(run.axis_value.to_string()).join(run.seed.to_string());
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        let mut record = record.clone();
        record.config.dataset = Some(generated.clone());
        report::write_record(&record, &d.join("record.json"))?;
    }
    println!("{:>10}  {:>8}  {:>8}", axis.as_str(), "mean", "std");
    for r in &table.rows {
        println!("{:>10}  {:>8.4}  {:>8.4}", r.axis_value, r.mean, r.std);
    }
    println!("wrote {}", dir.display());
    Ok(())
}
