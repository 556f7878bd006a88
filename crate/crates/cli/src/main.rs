use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddescent_cli::commands::{self, repro_config};
use ddescent_cli::{exit_code, EvalTarget, Overrides, RunConfig};
use ddescent_core::report::SvgOptions;
use ddescent_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ddescent", version, about = "Complexity sweeps for trees, forests and boosting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads; defaults to DDESCENT_WORKERS, then the core count.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    split_fraction: Option<f64>,
    /// observed or noise_free.
    #[arg(long)]
    evaluate_against: Option<String>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    n_features: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Print the expanded regime grids and exit without fitting.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Friedman #1 dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        n_features: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Build a genotype feature matrix from per-sample VCFs.
    Ingest {
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured regimes.
    Sweep(RunArgs),
    /// Run the synthetic replication suite and write a verdict.
    Repro(RunArgs),
    /// Re-render an SVG from curve CSVs.
    Plot {
        /// Curve CSVs to overlay.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long)]
        log_x: bool,
        #[arg(long)]
        no_threshold: bool,
    },
}

fn load(path: Option<&Path>, fallback: RunConfig) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(fallback),
    }
}

fn common_overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        output_dir: c.output_dir.clone(),
        workers: c.workers,
        ..Default::default()
    }
}

fn run_overrides(a: &RunArgs) -> Result<Overrides> {
    Ok(Overrides {
        replicates: a.replicates,
        split_fraction: a.split_fraction,
        evaluate_against: a
            .evaluate_against
            .as_deref()
            .map(str::parse::<EvalTarget>)
            .transpose()?,
        n_samples: a.n_samples,
        n_features: a.n_features,
        noise_sigma: a.noise_sigma,
        ..common_overrides(&a.common)
    })
}

fn run_config(a: &RunArgs, fallback: RunConfig) -> Result<RunConfig> {
    let mut cfg = load(a.common.config.as_deref(), fallback)?;
    run_overrides(a)?.apply(&mut cfg);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            n_samples,
            n_features,
            noise_sigma,
        } => {
            let mut cfg = load(common.config.as_deref(), RunConfig::default())?;
            Overrides {
                n_samples,
                n_features,
                noise_sigma,
                ..common_overrides(&common)
            }
            .apply(&mut cfg);
            commands::cmd_synth(&cfg).map(|_| ())
        }
        Command::Ingest { common } => {
            let path = common
                .config
                .as_deref()
                .ok_or_else(|| Error::Usage("ingest needs --config".into()))?;
            let mut cfg = RunConfig::load(path)?;
            common_overrides(&common).apply(&mut cfg);
            commands::cmd_ingest(&cfg).map(|_| ())
        }
        Command::Sweep(a) => {
            let cfg = run_config(&a, RunConfig::default())?;
            if a.dry_run {
                print!("{}", commands::dry_run(&cfg)?);
                return Ok(());
            }
            commands::cmd_sweep(&cfg).map(|_| ())
        }
        Command::Repro(a) => {
            let mut cfg = run_config(&a, repro_config())?;
            if cfg.regimes.is_empty() {
                cfg.regimes = commands::paper_regimes();
            }
            if a.dry_run {
                print!("{}", commands::dry_run(&cfg)?);
                return Ok(());
            }
            commands::cmd_repro(&cfg).map(|_| ())
        }
        Command::Plot {
            inputs,
            output,
            title,
            log_x,
            no_threshold,
        } => commands::cmd_plot(
            &inputs,
            &output,
            &SvgOptions {
                log_x,
                threshold_marker: !no_threshold,
                title,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 5 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ddescent: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
