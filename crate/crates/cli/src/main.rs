use std::path::{Path, PathBuf};
use std::process::ExitCode;

use casemil::verify::GradFault;
use casemil_cli::commands::{self, EvalRequest};
use casemil_cli::{CliError, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "casemil", version, about = "Two-level MIL case classification on mammography-style data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifests, P5 images, provenance).
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Crop, orient and resize the images of a raw manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the target extents from this config's model section.
        #[arg(long, conflicts_with_all = ["height", "width"])]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes best.ckpt, its sidecars and train.log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Do not echo per-epoch log lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and write the metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest to evaluate; defaults to the config's test split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report destination.
        #[arg(long, default_value = "metrics.txt")]
        out: PathBuf,
        /// Emit montages and attention sidecars for the first N cases.
        #[arg(long, default_value_t = 0)]
        visualize: usize,
        #[arg(long, default_value = "viz")]
        viz_dir: PathBuf,
    },
    /// Finite-difference check of every op and end-to-end path.
    Gradcheck {
        /// Random inputs per op.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, hide = true)]
        inject_grad_error: Option<String>,
        #[arg(long, hide = true, default_value_t = 1.001)]
        fault_factor: f64,
    },
}

fn config(path: &Path) -> Result<RunConfig, CliError> {
    Ok(RunConfig::load(path)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config: c, out, force } => {
            commands::cmd_generate(&config(&c)?, &out, force)?;
            println!("wrote {}", out.join("manifest.csv").display());
        }
        Command::Preprocess {
            manifest,
            out,
            config: c,
            height,
            width,
            force,
        } => {
            let (h, w) = match c {
                Some(p) => {
                    let f = config(&p)?.model.features;
                    (f.image_height, f.image_width)
                }
                None => (height, width),
            };
            let n = commands::cmd_preprocess(&manifest, &out, h, w, force)?;
            println!("preprocessed {n} cases into {}", out.join("manifest.csv").display());
        }
        Command::Train { config: c, out, quiet } => {
            let run = commands::cmd_train(&config(&c)?, &out, |l| {
                if !quiet {
                    println!("{l}");
                }
            })?;
            println!(
                "best_epoch={} checkpoint={}",
                run.outcome.best_epoch,
                out.join("best.ckpt").display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            config: c,
            out,
            visualize,
            viz_dir,
        } => {
            let cfg = c.as_deref().map(config).transpose()?;
            let report = commands::cmd_eval(&EvalRequest {
                ckpt: &ckpt,
                data: data.as_deref(),
                config: cfg.as_ref(),
                visualize,
                viz_dir,
            })?;
            let text = report.to_text();
            std::fs::write(&out, &text).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
            print!("{text}");
        }
        Command::Gradcheck {
            trials,
            inject_grad_error,
            fault_factor,
        } => {
            let fault = match inject_grad_error {
                Some(name) => {
                    let op = commands::fault_op(&name)
                        .ok_or_else(|| CliError::Config(format!("unknown op `{name}` for fault injection")))?;
                    Some(GradFault { op, factor: fault_factor })
                }
                None => None,
            };
            let report = commands::cmd_gradcheck(trials, fault)?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Verify(report) => print!("{report}"),
                other => eprintln!("error: {other}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
