use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dim_core::efficiency::{gflops_report, Arch};
use dim_core::model::{ModelConfig, SizeTag};
use dim_core::train::run::{cmd_train, TrainOptions};
use dim_core::train::sample::{cmd_sample, SampleRequest};
use dim_core::train::thread_count;
use dim_core::verify::{run_checks, CheckOptions, SOFT_BUDGET};
use dim_core::DimError;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Diffusion models with bidirectional selective state-space blocks.
#[derive(Parser, Debug)]
#[command(name = "dim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a run configuration file.
    Train {
        /// Configuration file (`[section]` headers, `key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every N steps (0 = silent).
        #[arg(long, default_value_t = 100)]
        progress: usize,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Class index, or `uncond`.
        #[arg(long, default_value = "uncond")]
        class: String,
        #[arg(long, default_value_t = 1.5)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 250)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Operation-count report across input resolutions.
    Flops {
        /// dit, diffussm, dim or all.
        #[arg(long, default_value = "all")]
        arch: String,
        /// S, B, L or XL.
        #[arg(long, default_value = "XL")]
        size: SizeTag,
        #[arg(long, default_value_t = 2)]
        patch: usize,
        /// Comma-separated pixel resolutions.
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        resolutions: Vec<usize>,
        /// Write the CSV here instead of after the table on stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the numerical self-check suite.
    Check {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn parse_archs(arch: &str) -> Result<Vec<Arch>> {
    if arch.eq_ignore_ascii_case("all") {
        return Ok(Arch::ALL.to_vec());
    }
    Ok(vec![arch.parse::<Arch>().map_err(anyhow::Error::msg)?])
}

fn parse_class(class: &str) -> Result<Option<usize>> {
    if class.eq_ignore_ascii_case("uncond") {
        return Ok(None);
    }
    class
        .parse()
        .map(Some)
        .map_err(|_| DimError::InvalidArgument(format!("class must be an index or 'uncond', got '{class}'")).into())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train {
            config,
            resume,
            progress,
        } => {
            let opts = TrainOptions {
                resume,
                threads: thread_count()?,
                progress_every: progress,
            };
            let summary = cmd_train(&config, &opts)?;
            let last = summary.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained steps {}..{}, last loss {last:.5}\ncheckpoint {}\nmetrics {}",
                summary.first_step,
                summary.last_step,
                summary.checkpoint.display(),
                summary.metrics.display()
            );
        }
        Command::Sample {
            checkpoint,
            count,
            class,
            cfg_scale,
            steps,
            seed,
            out,
        } => {
            let req = SampleRequest {
                checkpoint,
                count,
                class: parse_class(&class)?,
                cfg_scale,
                steps,
                seed,
                out_dir: out,
                threads: thread_count()?,
            };
            let outcome = cmd_sample(&req)?;
            for f in &outcome.files {
                println!("{}", f.display());
            }
        }
        Command::Flops {
            arch,
            size,
            patch,
            resolutions,
            csv,
        } => {
            if size == SizeTag::Custom {
                bail!(DimError::InvalidArgument("size must be one of S, B, L, XL".into()));
            }
            let archs = parse_archs(&arch)?;
            let cfg = ModelConfig::preset(size, patch)?;
            let report = gflops_report(&archs, &cfg, &resolutions)?;
            print!("{}", report.to_markdown());
            match csv {
                Some(path) => std::fs::write(&path, report.to_csv())
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("\n{}", report.to_csv()),
            }
        }
        Command::Check { seed } => {
            let report = run_checks(&CheckOptions {
                seed,
                ..Default::default()
            });
            print!("{}", report.to_table());
            if report.over_budget() {
                eprintln!(
                    "warning: suite took {:.0} s, over the {} s budget",
                    report.elapsed.as_secs_f64(),
                    SOFT_BUDGET.as_secs()
                );
            }
            if !report.all_passed() {
                eprintln!("failed: {}", report.failures().join(", "));
                return Ok(EXIT_FAILURE);
            }
        }
    }
    Ok(0)
}

/// Bad inputs map to the usage code; anything that failed mid-run to 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<DimError>() {
        Some(DimError::Io(_) | DimError::NonFinite(_)) => EXIT_FAILURE,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
