use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use convmae::analysis::{count_flops, MaskingMode};
use convmae::config::ArchPreset;
use convmae::export::export_features;
use convmae::train::{pretrain, RunConfig};
use convmae::verify::{self, Suite};

#[derive(Parser)]
#[command(name = "convmae", version, about = "ConvMAE pretraining, verification and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain from a key=value run config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Extra key=value overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a self-check suite: masking, leakage, grads, costs or all.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Print parameter and multiply-accumulate counts for one image.
    Count {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 0.25)]
        keep: f64,
        /// Depthwise kernel size; defaults to the architecture's own.
        #[arg(long)]
        kernel: Option<usize>,
        /// block or random-full
        #[arg(long, default_value = "block")]
        mode: String,
        /// Emit key=value lines instead of the table.
        #[arg(long)]
        kv: bool,
    },
    /// Write feature pyramids for every image in a directory.
    ExportFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Pretrain { config, overrides } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            for kv in &overrides {
                let (k, v) = kv.split_once('=').with_context(|| format!("expected KEY=VALUE, got {kv}"))?;
                cfg.set(k, v)?;
            }
            let s = pretrain(cfg)?;
            println!("steps={}", s.steps);
            println!("initial_eval_loss={}", s.initial_eval_loss);
            println!("final_eval_loss={}", s.final_eval_loss);
            println!("metrics={}", s.metrics.display());
            println!("checkpoint={}", s.checkpoint.display());
            println!("reconstruction={}", s.reconstruction.display());
            Ok(true)
        }
        Command::Verify { suite } => {
            let report = verify::run(suite.parse::<Suite>()?)?;
            println!("{report}");
            Ok(report.passed())
        }
        Command::Count { arch, keep, kernel, mode, kv } => {
            let preset: ArchPreset = arch.parse()?;
            let cfg = preset.arch();
            let kernel = kernel.unwrap_or(cfg.kernel_size);
            let report = count_flops(&cfg, &preset.decoder(), keep, mode.parse::<MaskingMode>()?, kernel)?;
            if kv {
                print!("{}", report.to_kv());
            } else {
                println!("{report}");
            }
            Ok(true)
        }
        Command::ExportFeatures { ckpt, input, out } => {
            let s = export_features(&ckpt, &input, &out)?;
            println!("images={}", s.images);
            println!("files={}", s.entries.len());
            println!("manifest={}", s.manifest.display());
            Ok(true)
        }
    }
}
