use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use regionfuse::corpus::{generate_synthetic_corpus, SynthConfig};
use regionfuse::pipeline::{self, FailureKind, PipelineError};
use regionfuse::GridSpec;

mod config;

use config::RunArgs;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "regionfuse", version, about = "Region-ensemble texture classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic two-class face corpus with landmarks and manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        n_per_class: usize,
        #[arg(long, default_value_t = 160)]
        image_size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Chance that a patch carries the other class's texture.
        #[arg(long, default_value_t = 0.2)]
        flip_prob: f64,
    },
    /// k-fold training and evaluation; writes reports and bundles to --out.
    TrainEval {
        #[command(flatten)]
        run: RunArgs,
        /// Also refit every fold with scrambled test labels and compare.
        #[arg(long)]
        leak_check: bool,
    },
    /// Classify one image with a trained bundle.
    Predict {
        /// Bundle directory, e.g. <out>/model.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
    },
    /// Per-stage wall-clock times of a k-fold run.
    Timing {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Fused and best-region accuracy for 2x2, 3x3 and 4x4 grids.
    GridSweep {
        #[command(flatten)]
        run: RunArgs,
    },
}

enum Failure {
    Usage(String),
    Check(String),
    Pipeline(PipelineError),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure::Pipeline(e)
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = io::stdout().write_all(text.as_bytes());
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            out,
            n_per_class,
            image_size,
            seed,
            flip_prob,
        } => {
            let cfg = SynthConfig {
                n_per_class,
                image_size,
                seed,
                flip_prob,
            };
            let records = generate_synthetic_corpus(&cfg, &out).map_err(PipelineError::from)?;
            emit(&format!("wrote {} samples to {}\n", records.len(), out.join("manifest.tsv").display()));
        }
        Command::TrainEval { run, leak_check } => {
            let cfg = run.resolve().map_err(Failure::Usage)?;
            let data = pipeline::load_dataset(&cfg)?;
            let eval = pipeline::evaluate(&data, &cfg)?;
            emit(&eval.report.to_text());
            if let Some(out) = &cfg.out {
                pipeline::write_outputs(out, &data, &cfg, &eval)?;
                emit(&format!("\nreports and bundles written to {}\n", out.display()));
            }
            if leak_check {
                let check = pipeline::leak_check(&data, &cfg)?;
                for (fold, ok) in check.identical.iter().enumerate() {
                    emit(&format!("leak-check fold{fold}: {}\n", if *ok { "identical" } else { "DIFFERS" }));
                }
                if !check.passed() {
                    return Err(Failure::Check(
                        "leak check failed: test labels changed a fitted component".into(),
                    ));
                }
            }
        }
        Command::Predict {
            model,
            image,
            landmarks,
        } => {
            let p = pipeline::predict(&model, &image, &landmarks)?;
            emit(&format!("{}\n", p.line()));
            if !p.failed_regions.is_empty() {
                let names: Vec<&str> = p.failed_regions.iter().map(|r| r.name()).collect();
                eprintln!("neutral scores used for: {}", names.join(", "));
            }
        }
        Command::Timing { run } => {
            let cfg = run.resolve().map_err(Failure::Usage)?;
            let data = pipeline::load_dataset(&cfg)?;
            let eval = pipeline::evaluate(&data, &cfg)?;
            emit(&eval.report.timing_table());
        }
        Command::GridSweep { run } => {
            let cfg = run.resolve().map_err(Failure::Usage)?;
            let grids: Vec<GridSpec> = (2..=4).map(|n| GridSpec::new(n).expect("valid grid")).collect();
            let sweep = pipeline::grid_sweep(&cfg, &grids)?;
            let table = sweep.to_tsv();
            emit(&table);
            if let Some(out) = &cfg.out {
                std::fs::create_dir_all(out)
                    .and_then(|_| std::fs::write(out.join("grid_sweep.tsv"), &table))
                    .map_err(|e| Failure::Usage(format!("cannot write to {}: {e}", out.display())))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                FailureKind::Usage => EXIT_USAGE,
                FailureKind::Data => EXIT_DATA,
                FailureKind::Numeric => EXIT_NUMERIC,
            })
        }
    }
}
