//! Per-iteration cost and progress records shared by both optimizers.

use std::time::Instant;

use serde::Serialize;

use crate::model::{LedgerSnapshot, ProblemSpec};

/// One outer iteration (M³C) or one projected-gradient iteration (SAA).
/// Row 0 records the work spent evaluating the starting point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub outer_iter: usize,
    pub inner_iters: usize,
    pub fn_evals: usize,
    pub matvecs_a: u64,
    pub matvecs_q: u64,
    pub pcg_iters: usize,
    pub wall_time_s: f64,
    pub f_audit: Option<f64>,
    pub n_probes: usize,
    pub accepted: bool,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Relative step below tolerance.
    Converged,
    MaxIterations,
    /// Line search could not make progress.
    Stalled,
    /// A hard failure stopped the run; rows up to the failure are kept.
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub method: String,
    /// Inner (projected-gradient) iterations summed over the run.
    pub total_iter: usize,
    pub outer_iters: usize,
    pub total_fn_evals: usize,
    pub total_matvecs_a: u64,
    pub total_matvecs_q: u64,
    pub total_pcg_iters: usize,
    pub runtime_s: f64,
    pub f_final: Option<f64>,
    pub theta0: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
}

impl RunMetrics {
    pub fn new(method: &str, rows: Vec<MetricsRow>, theta0: Vec<f64>, theta_hat: Vec<f64>, termination: Termination, runtime_s: f64) -> Self {
        let f_final = rows.iter().rev().find(|r| r.accepted).and_then(|r| r.f_audit);
        let summary = RunSummary {
            method: method.to_string(),
            total_iter: rows.iter().map(|r| r.inner_iters).sum(),
            outer_iters: rows.iter().filter(|r| r.outer_iter > 0).count(),
            total_fn_evals: rows.iter().map(|r| r.fn_evals).sum(),
            total_matvecs_a: rows.iter().map(|r| r.matvecs_a).sum(),
            total_matvecs_q: rows.iter().map(|r| r.matvecs_q).sum(),
            total_pcg_iters: rows.iter().map(|r| r.pcg_iters).sum(),
            runtime_s,
            f_final,
            theta0,
            theta_hat,
            termination,
        };
        Self { rows, summary }
    }
}

/// Captures ledger and clock at the start of a row.
pub(crate) struct RowClock {
    ledger: LedgerSnapshot,
    start: Instant,
}

impl RowClock {
    pub fn start(problem: &ProblemSpec) -> Self {
        Self { ledger: problem.ledger().snapshot(), start: Instant::now() }
    }

    /// Ledger delta and elapsed seconds since `start`; the clock restarts.
    pub fn lap(&mut self, problem: &ProblemSpec) -> (LedgerSnapshot, f64) {
        let now = problem.ledger().snapshot();
        let delta = now - self.ledger;
        let secs = self.start.elapsed().as_secs_f64();
        self.ledger = now;
        self.start = Instant::now();
        (delta, secs)
    }
}
