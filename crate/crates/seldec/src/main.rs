//! Command-line front end for the selective-classification pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use seldec::config::RunConfig;
use seldec::error::{Error, Result};
use seldec::pipeline;

#[derive(Parser)]
#[command(
    name = "seldec",
    version,
    about = "Confidence-aware selective classification: ensemble training, \
             temperature calibration, and coverage-controlled abstention \
             on synthetic multi-channel trial data."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; missing fields use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in base configuration when no --config is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Paper)]
    preset: Preset,

    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Ensemble size (overrides the config).
    #[arg(long, global = true)]
    members: Option<usize>,

    /// Selective score: entropy, margin, or mi (overrides the config).
    #[arg(long, global = true)]
    score: Option<String>,

    /// Comma-separated coverage grid, e.g. 0.1,0.2,...,1.0.
    #[arg(long = "coverage-grid", global = true)]
    coverage_grid: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-scale geometry (64 channels, 1000 samples at 500 Hz).
    Paper,
    /// Fast geometry (8 channels, 128 samples at 64 Hz).
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (manifest.json + trials.f32).
    Synth,
    /// Assign blocks to train/cal/test (split.json).
    Split,
    /// Fit channel statistics and train the ensemble members.
    Train,
    /// Fit one temperature per member on the calibration split.
    Calibrate,
    /// Fit thresholds, evaluate on test, write report.json and curve.csv.
    Evaluate,
    /// Evaluate nested member subsets, optionally across several seeds.
    Sweep {
        /// Comma-separated subset sizes; defaults to 1,2,4,... up to the
        /// configured ensemble size.
        #[arg(long = "members-list", value_delimiter = ',')]
        members_list: Vec<usize>,
        /// Comma-separated master seeds; each runs a full in-memory
        /// pipeline. Without seeds the on-disk artifacts are swept.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => match cli.preset {
            Preset::Paper => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        },
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(members) = cli.members {
        cfg.ensemble.members = members;
    }
    if let Some(score) = &cli.score {
        cfg.selective.score_kind = score.parse()?;
    }
    if let Some(grid) = &cli.coverage_grid {
        cfg.selective.grid = grid
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidConfig(vec![format!("bad coverage grid entry `{tok}`: {e}")])
                })
            })
            .collect::<Result<Vec<f64>>>()?;
    }
    Ok(cfg)
}

fn default_members_list(max_members: usize) -> Vec<usize> {
    let mut list = Vec::new();
    let mut m = 1;
    while m < max_members {
        list.push(m);
        m *= 2;
    }
    list.push(max_members);
    list
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Synth => pipeline::cmd_synth(&cfg),
        Command::Split => pipeline::cmd_split(&cfg),
        Command::Train => pipeline::cmd_train(&cfg),
        Command::Calibrate => pipeline::cmd_calibrate(&cfg),
        Command::Evaluate => pipeline::cmd_evaluate(&cfg),
        Command::Sweep { members_list, seeds } => {
            let m_list = if members_list.is_empty() {
                default_members_list(cfg.ensemble.members)
            } else {
                members_list.clone()
            };
            pipeline::cmd_sweep(&cfg, &m_list, seeds)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
