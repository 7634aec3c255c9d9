//! `run`: one seeded optimizer run on a built-in problem.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use hypermarg_core::linalg::PcgOptions;
use hypermarg_core::metrics::{RunMetrics, RunSummary, Termination};
use hypermarg_core::mm::{m3c_optimize, M3cConfig};
use hypermarg_core::model::{make_test_problem, HyperParams, ProblemSpec, TestProblem};
use hypermarg_core::saa::{saa_optimize, SaaConfig};

use crate::error::{CliError, Result};
use crate::output::{ensure_dir, num, opt_num, theta_headers, write_csv, write_f64_le, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MethodConfig {
    M3c(M3cConfig),
    Saa(SaaConfig),
}

impl MethodConfig {
    fn validate(&self) -> Result<()> {
        match self {
            MethodConfig::M3c(c) => c.validate()?,
            MethodConfig::Saa(c) => c.validate()?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    MetricsCsv,
    SummaryJson,
    ThetaTraceCsv,
    XhatBin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec![OutputFormat::MetricsCsv, OutputFormat::SummaryJson, OutputFormat::ThetaTraceCsv, OutputFormat::XhatBin],
        }
    }
}

fn reconstruction_default() -> PcgOptions {
    PcgOptions { tol: 1e-8, max_iter: 2000 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: TestProblem,
    pub method: MethodConfig,
    /// Starting point; there is no registration phase to produce one.
    pub theta0: Vec<f64>,
    /// PCG settings for the posterior-mean reconstruction at θ̂.
    #[serde(default = "reconstruction_default")]
    pub reconstruction: PcgOptions,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Checks that need no compute beyond assembling the problem.
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        if !(self.reconstruction.tol > 0.0) || self.reconstruction.max_iter == 0 {
            return Err(CliError::Config("reconstruction needs tol > 0 and max_iter >= 1".into()));
        }
        if self.output.formats.is_empty() {
            return Err(CliError::Config("output.formats is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReconstructionCost {
    pub pcg_iters: usize,
    pub matvecs_a: u64,
    pub matvecs_q: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub problem: String,
    #[serde(flatten)]
    pub run: RunSummary,
    /// `‖x̂ − x_true‖ / ‖x_true‖` at θ̂.
    pub rel_error: Option<f64>,
    pub rel_error_theta0: Option<f64>,
    /// Work for both reconstructions; not part of the optimizer totals.
    pub reconstruction: ReconstructionCost,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub metrics: RunMetrics,
    pub summary: Summary,
    pub xhat: DVector<f64>,
}

fn reconstruct(problem: &ProblemSpec, theta: &HyperParams, opts: &PcgOptions, cost: &mut ReconstructionCost) -> Result<DVector<f64>> {
    let before = problem.ledger().snapshot();
    let (x, sol) = problem.reconstruct(theta, None, opts)?;
    let delta = problem.ledger().snapshot() - before;
    cost.pcg_iters += sol.iterations;
    cost.matvecs_a += delta.a;
    cost.matvecs_q += delta.q;
    if !sol.converged {
        return Err(CliError::Numerical(format!(
            "reconstruction PCG stopped at relative residual {:.3e} after {} iterations",
            sol.relative_residual, sol.iterations
        )));
    }
    Ok(x)
}

/// Run the configured optimizer and reconstruct at θ̂. An aborted run is a
/// numerical failure; its partial report is returned alongside.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentReport, Option<CliError>)> {
    cfg.validate()?;
    let problem = make_test_problem(&cfg.problem)?;
    let theta0 = problem.params(&cfg.theta0)?;
    let (theta_hat, metrics) = match &cfg.method {
        MethodConfig::M3c(c) => m3c_optimize(&problem, &theta0, c)?,
        MethodConfig::Saa(c) => saa_optimize(&problem, &theta0, c)?,
    };
    let failure = match &metrics.summary.termination {
        Termination::Aborted(why) => Some(CliError::Numerical(why.clone())),
        _ => None,
    };
    let mut cost = ReconstructionCost::default();
    let xhat = reconstruct(&problem, &theta_hat, &cfg.reconstruction, &mut cost)?;
    let x0 = reconstruct(&problem, &theta0, &cfg.reconstruction, &mut cost)?;
    let summary = Summary {
        problem: problem.name().to_string(),
        run: metrics.summary.clone(),
        rel_error: problem.relative_error(&xhat),
        rel_error_theta0: problem.relative_error(&x0),
        reconstruction: cost,
    };
    Ok((ExperimentReport { metrics, summary, xhat }, failure))
}

pub fn metrics_table(m: &RunMetrics) -> (Vec<String>, Vec<Vec<String>>) {
    let p = m.summary.theta0.len();
    let mut header: Vec<String> = [
        "outer_iter", "inner_iters", "fn_evals", "matvecs_a", "matvecs_q", "pcg_iters", "wall_time_s", "f_audit", "n_probes", "accepted",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(theta_headers(p));
    let rows = m
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![
                r.outer_iter.to_string(),
                r.inner_iters.to_string(),
                r.fn_evals.to_string(),
                r.matvecs_a.to_string(),
                r.matvecs_q.to_string(),
                r.pcg_iters.to_string(),
                num(r.wall_time_s),
                opt_num(r.f_audit),
                r.n_probes.to_string(),
                r.accepted.to_string(),
            ];
            row.extend(r.theta.iter().map(|&v| num(v)));
            row
        })
        .collect();
    (header, rows)
}

fn trace_table(m: &RunMetrics) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["outer_iter".to_string(), "accepted".to_string()];
    header.extend(theta_headers(m.summary.theta0.len()));
    let rows = m
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.outer_iter.to_string(), r.accepted.to_string()];
            row.extend(r.theta.iter().map(|&v| num(v)));
            row
        })
        .collect();
    (header, rows)
}

pub fn write_outputs(report: &ExperimentReport, out: &OutputConfig, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    for format in &out.formats {
        match format {
            OutputFormat::MetricsCsv => {
                let (h, rows) = metrics_table(&report.metrics);
                write_csv(&dir.join("metrics.csv"), &h, &rows)?;
            }
            OutputFormat::ThetaTraceCsv => {
                let (h, rows) = trace_table(&report.metrics);
                write_csv(&dir.join("theta_trace.csv"), &h, &rows)?;
            }
            OutputFormat::SummaryJson => write_json(&dir.join("summary.json"), &report.summary)?,
            OutputFormat::XhatBin => write_f64_le(&dir.join("xhat.bin"), report.xhat.as_slice())?,
        }
    }
    Ok(())
}
