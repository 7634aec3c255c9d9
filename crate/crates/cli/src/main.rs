use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hypermarg::bench::{failure_rate, trace_bench, write_bench, BenchConfig};
use hypermarg::experiment::{run_experiment, write_outputs, ExperimentConfig};
use hypermarg::output::{load_json, to_json};
use hypermarg::sample_size::{problem_constants, sample_size, SampleSizeInputs};
use hypermarg::slice::{majorant_slice, write_slice, SliceConfig};
use hypermarg::{configure_threads, Result};
use hypermarg_core::bounds::SpectralConstants;
use hypermarg_core::model::TestProblem;

#[derive(Parser)]
#[command(name = "hypermarg", version, about = "Hyperparameter estimation for linear inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run M³C or SAA from an experiment config.
    Run {
        config: PathBuf,
        /// Overrides `output.directory`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write F and the exact majorant along one hyperparameter axis.
    MajorantSlice { config: PathBuf },
    /// Compare SLQ log-determinants with dense values.
    TraceBench { config: PathBuf },
    /// Print bound-derived sample sizes as JSON.
    SampleSize(SampleSizeArgs),
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["constants", "problem", "problem_config"])))]
struct SampleSizeArgs {
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    delta: f64,
    /// Decay rate of the M³C schedule.
    #[arg(long)]
    rho: Option<f64>,
    /// Outer iteration for the schedule.
    #[arg(long, default_value_t = 0)]
    t: usize,
    /// JSON file of spectral constants.
    #[arg(long)]
    constants: Option<PathBuf>,
    /// Built-in problem kind with default settings.
    #[arg(long)]
    problem: Option<String>,
    /// JSON file describing a built-in problem.
    #[arg(long)]
    problem_config: Option<PathBuf>,
    /// Random θ draws beyond the box corners when estimating constants.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, out } => {
            let cfg: ExperimentConfig = load_json(&config)?;
            let (report, failure) = run_experiment(&cfg)?;
            let dir = out.unwrap_or_else(|| cfg.output.directory.clone());
            write_outputs(&report, &cfg.output, &dir)?;
            let s = &report.summary;
            eprintln!(
                "{}: {:?} after {} outer / {} inner iterations, F = {:?}, rel_error = {:?}",
                s.run.method, s.run.termination, s.run.outer_iters, s.run.total_iter, s.run.f_final, s.rel_error
            );
            failure.map_or(Ok(()), Err)
        }
        Command::MajorantSlice { config } => {
            let cfg: SliceConfig = load_json(&config)?;
            let rows = majorant_slice(&cfg)?;
            let path = write_slice(&cfg, &rows)?;
            let gap = rows.iter().map(|r| r.g - r.f).fold(f64::INFINITY, f64::min);
            eprintln!("wrote {} rows to {}; min(G - F) = {gap:e}", rows.len(), path.display());
            Ok(())
        }
        Command::TraceBench { config } => {
            let cfg: BenchConfig = load_json(&config)?;
            let rows = trace_bench(&cfg)?;
            let path = write_bench(&cfg, &rows)?;
            eprintln!("wrote {} rows to {}; failure rate {} (δ = {})", rows.len(), path.display(), failure_rate(&rows), cfg.delta);
            Ok(())
        }
        Command::SampleSize(a) => {
            let (consts, source) = if let Some(path) = &a.constants {
                (load_json::<SpectralConstants>(path)?, format!("file:{}", path.display()))
            } else if let Some(kind) = &a.problem {
                (problem_constants(&TestProblem::default_for(kind)?, a.samples, a.seed)?, format!("problem:{kind}"))
            } else {
                let path = a.problem_config.as_ref().expect("clap enforces one source");
                (problem_constants(&load_json(path)?, a.samples, a.seed)?, format!("problem_config:{}", path.display()))
            };
            let inputs = SampleSizeInputs { eps: a.eps, delta: a.delta, rho: a.rho, t: a.t };
            println!("{}", to_json(&sample_size(inputs, consts, source)?)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hypermarg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
