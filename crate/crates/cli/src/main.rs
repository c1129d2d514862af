use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use ctxnet_cli::eval::{evaluate, Source};
use ctxnet_cli::train::{train, TrainOptions};
use ctxnet_cli::{ablate, infer, selfcheck, synth, Model, RunConfig};
use ctxnet_core::OpKind;

#[derive(Parser)]
#[command(name = "ctxnet", version, about = "Low-light image enhancement network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Passthrough {
    Input,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint that includes optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many iterations.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Enhance one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Process in overlapping tiles of this size.
        #[arg(long)]
        tile: Option<usize>,
    },
    /// PSNR/SSIM over a paired directory.
    Eval {
        #[arg(long, required_unless_present = "passthrough")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score the inputs or targets themselves instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        passthrough: Option<Passthrough>,
        #[arg(long)]
        tile: Option<usize>,
        /// Also write per-image rows to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every op and block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward rule of one op (negative control).
        #[arg(long)]
        inject_fault: Option<OpKind>,
    },
    /// Train and score the baseline, gc, lc and full variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a config preset (`default` or `desk`).
    Preset { name: String },
    /// Write synthetic dark/bright pairs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, resume, stop_at } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let summary = train(&cfg, &TrainOptions { resume, stop_at })?;
            println!(
                "trained to iteration {}; checkpoint {}",
                summary.iterations,
                summary.final_checkpoint.display()
            );
        }
        Command::Infer { checkpoint, input, output, tile } => {
            infer::infer_file(&checkpoint, &input, &output, tile)?;
        }
        Command::Eval { checkpoint, data, passthrough, tile, csv } => {
            let model = checkpoint.as_deref().map(Model::load).transpose()?;
            let source = match (&model, passthrough) {
                (Some(model), _) => Source::Model { model, tile },
                (None, Some(Passthrough::Input)) => Source::Input,
                (None, Some(Passthrough::Target)) => Source::Target,
                (None, None) => bail!("either --checkpoint or --passthrough is required"),
            };
            let report = evaluate(&source, &data)?;
            print!("{report}");
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Gradcheck { seed, inject_fault } => {
            let reports = selfcheck::run(seed, inject_fault)?;
            for r in &reports {
                println!("{r}");
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                bail!("gradient check failed: {}", failed.join(", "));
            }
            println!("all {} checks passed", reports.len());
        }
        Command::Ablate { config } => {
            let cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let table = ablate::ablate(&cfg)?;
            print!("{table}");
        }
        Command::Preset { name } => print!("{}", RunConfig::preset(&name)?.to_text()),
        Command::Synth { out, count, width, height, seed } => {
            synth::generate(&out, count, width, height, seed)?;
            println!("wrote {count} pairs to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
