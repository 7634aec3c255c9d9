//! Sample average approximation: fix one probe set and minimize the SLQ
//! objective `F̂_SL` directly.

use std::cell::Cell;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{split_seed, PcgOptions, Preconditioner, ProbeSet};
use crate::metrics::{MetricsRow, RowClock, RunMetrics, Termination};
use crate::mm::{
    projected_gradient_min_observed, psi_preconditioner, GradientMode, InnerObjective, InnerOptions, InnerStep,
    PreconditionerConfig, Scaling,
};
use crate::model::{HyperParams, ProblemSpec};
use crate::objective::{eval_f_slq, grad_f_mc, grad_fd, McOptions, FD_STEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaaConfig {
    pub n_probes: usize,
    pub lanczos_steps: usize,
    pub gradient: GradientMode,
    /// Symmetrized trace estimator in the analytic gradient.
    pub symmetrize: bool,
    pub max_iter: usize,
    pub step_tol: f64,
    pub seed: u64,
    pub preconditioner: Option<PreconditionerConfig>,
    /// Rebuild the preconditioner once θ drifts this far (relative) from
    /// where it was built.
    pub rebuild_drift: f64,
    pub pcg: PcgOptions,
    pub fd_step: f64,
    pub scaling: Scaling,
}

impl Default for SaaConfig {
    fn default() -> Self {
        Self {
            n_probes: 24,
            lanczos_steps: 30,
            gradient: GradientMode::Analytic,
            symmetrize: true,
            max_iter: 100,
            step_tol: 1e-6,
            seed: 0,
            preconditioner: None,
            rebuild_drift: 0.1,
            pcg: PcgOptions::default(),
            fd_step: FD_STEP,
            scaling: Scaling::Box,
        }
    }
}

impl SaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_probes == 0 || self.lanczos_steps == 0 || self.max_iter == 0 {
            return Err(Error::invalid("n_probes, lanczos_steps and max_iter must be >= 1"));
        }
        if !(self.step_tol > 0.0) || !(self.fd_step > 0.0) || !(self.rebuild_drift > 0.0) {
            return Err(Error::invalid("step_tol, fd_step and rebuild_drift must be positive"));
        }
        if matches!(self.preconditioner, Some(p) if p.rank == 0) {
            return Err(Error::invalid("preconditioner rank must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Default)]
struct Stats {
    fn_evals: Cell<usize>,
    pcg_iters: Cell<usize>,
}

impl Stats {
    fn take(&self) -> (usize, usize) {
        (self.fn_evals.replace(0), self.pcg_iters.replace(0))
    }
}

struct SaaObjective<'a> {
    problem: &'a ProblemSpec,
    cfg: &'a SaaConfig,
    probes: ProbeSet,
    pre: Option<Arc<dyn Preconditioner>>,
    anchor: DVector<f64>,
    builds: u64,
    cache: Option<(DVector<f64>, f64, DVector<f64>)>,
    stats: &'a Stats,
}

impl<'a> SaaObjective<'a> {
    fn params(&self, theta: &DVector<f64>) -> Result<HyperParams> {
        HyperParams::from_vector(theta.clone(), self.problem.n_psi())
    }

    fn rebuild(&mut self, theta: &DVector<f64>) -> Result<()> {
        if let Some(p) = self.cfg.preconditioner {
            let psi = self.problem.build_psi(&self.params(theta)?)?;
            self.pre = Some(psi_preconditioner(&psi, p.rank, split_seed(self.cfg.seed ^ 0xA5A5, self.builds))?);
            self.builds += 1;
        }
        self.anchor = theta.clone();
        self.cache = None;
        Ok(())
    }

    fn bump(&self, evals: usize, pcg: usize) {
        self.stats.fn_evals.set(self.stats.fn_evals.get() + evals);
        self.stats.pcg_iters.set(self.stats.pcg_iters.get() + pcg);
    }
}

impl InnerObjective for SaaObjective<'_> {
    fn value(&mut self, theta: &DVector<f64>) -> Result<f64> {
        if let Some((t, v, _)) = &self.cache {
            if t == theta {
                return Ok(*v);
            }
        }
        let ev = eval_f_slq(self.problem, &self.params(theta)?, &self.probes, self.cfg.lanczos_steps, self.pre.as_deref(), &self.cfg.pcg)?;
        self.bump(1, ev.pcg_iterations);
        self.cache = Some((theta.clone(), ev.value, ev.r));
        Ok(ev.value)
    }

    fn gradient(&mut self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let hp = self.params(theta)?;
        match self.cfg.gradient {
            GradientMode::Analytic => {
                let r = self.cache.as_ref().filter(|(t, _, _)| t == theta).map(|(_, _, r)| r);
                let opts = McOptions { symmetrize: self.cfg.symmetrize, pcg: self.cfg.pcg, fd_step: self.cfg.fd_step };
                let g = grad_f_mc(self.problem, &hp, &self.probes, self.cfg.lanczos_steps, self.pre.as_deref(), &opts, r)?;
                self.bump(0, g.pcg_iterations);
                Ok(g.grad)
            }
            GradientMode::FiniteDifference => {
                let bounds = self.problem.bounds();
                let (fd_step, k, pcg) = (self.cfg.fd_step, self.cfg.lanczos_steps, self.cfg.pcg);
                let (problem, probes, pre, stats) = (self.problem, &self.probes, self.pre.as_deref(), self.stats);
                grad_fd(
                    &mut |v| {
                        let ev = eval_f_slq(problem, &HyperParams::from_vector(v.clone(), problem.n_psi())?, probes, k, pre, &pcg)?;
                        stats.fn_evals.set(stats.fn_evals.get() + 1);
                        stats.pcg_iters.set(stats.pcg_iters.get() + ev.pcg_iterations);
                        Ok(ev.value)
                    },
                    theta,
                    bounds,
                    fd_step,
                )
            }
        }
    }

    fn accepted(&mut self, theta: &DVector<f64>) -> Result<bool> {
        if self.cfg.preconditioner.is_none() {
            return Ok(false);
        }
        let drift = (theta - &self.anchor).norm() / self.anchor.norm().max(f64::MIN_POSITIVE);
        if drift > self.cfg.rebuild_drift {
            self.rebuild(theta)?;
            return Ok(true);
        }
        Ok(false)
    }
}

/// Fixed-sample SAA with projected gradient. One metrics row per accepted
/// step, plus row 0 for the setup and the evaluation at `theta0`.
pub fn saa_optimize(problem: &ProblemSpec, theta0: &HyperParams, cfg: &SaaConfig) -> Result<(HyperParams, RunMetrics)> {
    cfg.validate()?;
    problem.bounds().check_dim(theta0.len())?;
    if !problem.bounds().contains(theta0.as_slice()) {
        return Err(Error::invalid("initial θ lies outside the box"));
    }
    let started = Instant::now();
    let mut clock = RowClock::start(problem);
    let stats = Stats::default();
    let mut obj = SaaObjective {
        problem,
        cfg,
        probes: ProbeSet::rademacher(problem.data_dim(), cfg.n_probes, cfg.seed)?,
        pre: None,
        anchor: theta0.vector().clone(),
        builds: 0,
        cache: None,
        stats: &stats,
    };
    obj.rebuild(theta0.vector())?;
    let f0 = obj.value(theta0.vector())?;
    let (fn_evals, pcg_iters) = stats.take();
    let (ledger, secs) = clock.lap(problem);
    let mut rows = vec![MetricsRow {
        outer_iter: 0,
        inner_iters: 0,
        fn_evals,
        matvecs_a: ledger.a,
        matvecs_q: ledger.q,
        pcg_iters,
        wall_time_s: secs,
        f_audit: Some(f0),
        n_probes: cfg.n_probes,
        accepted: true,
        theta: theta0.as_slice().to_vec(),
    }];

    let mut theta = theta0.vector().clone();
    let mut remaining = cfg.max_iter;
    let mut step_hint = None;
    let termination = loop {
        let opts = InnerOptions {
            max_iter: remaining,
            step_tol: cfg.step_tol,
            scaling: cfg.scaling,
            initial_step: step_hint,
            ..InnerOptions::default()
        };
        let mut observer = |s: &InnerStep| {
            let (fn_evals, pcg_iters) = stats.take();
            let (ledger, secs) = clock.lap(problem);
            rows.push(MetricsRow {
                outer_iter: rows.len(),
                inner_iters: 1,
                fn_evals,
                matvecs_a: ledger.a,
                matvecs_q: ledger.q,
                pcg_iters,
                wall_time_s: secs,
                f_audit: Some(s.value),
                n_probes: cfg.n_probes,
                accepted: true,
                theta: s.theta.as_slice().to_vec(),
            });
        };
        match projected_gradient_min_observed(&mut obj, problem.bounds(), &theta, &opts, &mut observer) {
            Ok(res) => {
                theta = res.theta;
                remaining -= res.iterations;
                step_hint = Some(res.next_step);
                if res.restart && remaining > 0 {
                    continue;
                }
                break if res.converged {
                    Termination::Converged
                } else if res.stalled {
                    Termination::Stalled
                } else {
                    Termination::MaxIterations
                };
            }
            Err(e) => break Termination::Aborted(e.to_string()),
        }
    };

    // Work after the last accepted step (final gradient, failed trials).
    let (fn_evals, pcg_iters) = stats.take();
    let (ledger, secs) = clock.lap(problem);
    let last = rows.last_mut().expect("row 0 exists");
    last.fn_evals += fn_evals;
    last.pcg_iters += pcg_iters;
    last.matvecs_a += ledger.a;
    last.matvecs_q += ledger.q;
    last.wall_time_s += secs;
    if let Some(f) = obj.cache.as_ref().filter(|(t, _, _)| *t == theta).map(|(_, v, _)| *v) {
        last.f_audit = Some(f);
    }
    last.theta = theta.as_slice().to_vec();

    let theta_hat = HyperParams::from_vector(theta, problem.n_psi())?;
    let metrics = RunMetrics::new(
        "saa",
        rows,
        theta0.as_slice().to_vec(),
        theta_hat.as_slice().to_vec(),
        termination,
        started.elapsed().as_secs_f64(),
    );
    Ok((theta_hat, metrics))
}
