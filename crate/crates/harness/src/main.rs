use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mbq_harness::config::{ExperimentConfig, ExperimentKind};
use mbq_harness::experiments::{run_experiment, run_gen_data, run_training, RunSummary};
use mbq_harness::report::verify_dir;
use mbq_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "mbq", version, about = "Mini-batch quadratic bias experiments")]
struct Cli {
    /// Experiment configuration file (sectioned key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for all result files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Replace the configured seed list by this single seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/test/OOD datasets as CSV.
    GenData,
    /// Train the configured network and write its checkpoints.
    Train,
    /// Slope and curvature of mini-batch directions across batches.
    BiasScan,
    /// Overlap of eigenbases from different batches.
    Overlap,
    /// Single-batch against debiased CG.
    CgCompare,
    /// K-FAC Laplace predictive metrics over the prior-precision grid.
    LaplaceSweep,
    /// Run any experiment kind, including bias-over-training and size-sweep.
    Run {
        #[arg(long)]
        kind: ExperimentKind,
    },
    /// Check that every result file under a directory carries the same digest.
    Verify {
        /// Defaults to --out-dir.
        dir: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, kind: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::new(kind.unwrap_or(ExperimentKind::BiasScan))),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
            match kind {
                Some(k) => ExperimentConfig::parse_with_kind(&text, Some(k)),
                // Data and training need no protocol; accept any kind.
                None => ExperimentConfig::parse(&text)
                    .or_else(|_| ExperimentConfig::parse_with_kind(&text, Some(ExperimentKind::BiasScan))),
            }
        }
    }
}

fn report(summary: &RunSummary, out: &Path) {
    println!("config digest {}", summary.digest);
    println!("wrote {} files under {}", summary.files.len(), out.display());
}

fn run(cli: Cli) -> Result<()> {
    let kind = match &cli.command {
        Command::GenData | Command::Train | Command::Verify { .. } => None,
        Command::BiasScan => Some(ExperimentKind::BiasScan),
        Command::Overlap => Some(ExperimentKind::Overlap),
        Command::CgCompare => Some(ExperimentKind::CgCompare),
        Command::LaplaceSweep => Some(ExperimentKind::LaplaceSweep),
        Command::Run { kind } => Some(*kind),
    };
    if let Command::Verify { dir } = &cli.command {
        let dir = dir.as_deref().unwrap_or(&cli.out_dir);
        let v = verify_dir(dir)?;
        for (file, digest) in &v.mismatched {
            println!(
                "MISMATCH {} ({})",
                file.display(),
                digest.as_deref().unwrap_or("no digest")
            );
        }
        return if v.ok() {
            println!("verified {} files, digest {}", v.checked, v.digest.unwrap_or_default());
            Ok(())
        } else {
            Err(HarnessError::validation(format!(
                "{} of {} files under {} do not carry the reference digest",
                v.mismatched.len(),
                v.checked,
                dir.display()
            )))
        };
    }
    let mut cfg = load_config(cli.config.as_deref(), kind)?;
    if let Some(s) = cli.seed_override {
        cfg.seeds = vec![s];
    }
    let summary = match cli.command {
        Command::GenData => run_gen_data(&cfg, &cli.out_dir)?,
        Command::Train => run_training(&cfg, &cli.out_dir)?,
        _ => run_experiment(&cfg, &cli.out_dir)?,
    };
    report(&summary, &cli.out_dir);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
