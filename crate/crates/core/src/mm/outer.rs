use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::inner::{projected_gradient_min, InnerObjective, InnerOptions, Scaling};
use super::surrogate::{
    eval_surrogate_mc, grad_surrogate_fd, grad_surrogate_mc, precompute_solves, psi_preconditioner, ExactSurrogate,
    MMState,
};
use crate::error::{Error, Result};
use crate::linalg::{split_seed, PcgOptions, ProbeSet, DENSE_LIMIT};
use crate::metrics::{MetricsRow, RowClock, RunMetrics, Termination};
use crate::model::{HyperParams, ProblemSpec};
use crate::objective::{eval_f_exact, eval_f_slq, FD_STEP};

/// How probe counts evolve over outer iterations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleSchedule {
    #[default]
    Constant,
    /// `N_t = ceil(N₀ ρ^{−t})`.
    Geometric { rho: f64 },
}

impl SampleSchedule {
    pub fn samples(&self, n0: usize, t: usize) -> usize {
        match *self {
            SampleSchedule::Constant => n0,
            SampleSchedule::Geometric { rho } => (n0 as f64 * rho.powi(-(t as i32))).ceil() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePolicy {
    /// New seed-derived probes every outer iteration.
    #[default]
    FreshPerOuter,
    /// One probe set for the whole run; only the solves are redone.
    Reuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Analytic operator-derivative formula (option a).
    #[default]
    #[serde(alias = "a")]
    Analytic,
    /// Forward differences of the whole objective (option b).
    #[serde(alias = "b")]
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    #[default]
    MonteCarlo,
    /// Dense majorant; deterministic MM.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditMode {
    /// Exact when the problem fits the dense limit, SLQ otherwise.
    #[default]
    Auto,
    Exact,
    Slq,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub mode: AuditMode,
    /// Reject steps that raise the audited objective.
    pub safeguard: bool,
    /// Allowed increase relative to `|F|`.
    pub slack_rel: f64,
    pub probes: usize,
    pub lanczos_steps: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { mode: AuditMode::Auto, safeguard: true, slack_rel: 1e-6, probes: 64, lanczos_steps: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreconditionerConfig {
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct M3cConfig {
    pub n_probes: usize,
    pub schedule: SampleSchedule,
    /// Ceiling for `N_t` after audit rejections; a rejection at the ceiling
    /// ends the run as stalled.
    pub max_probes: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    pub inner_step_tol: f64,
    /// Stop when `‖θ_{t+1} − θ_t‖ / ‖θ_{t+1}‖` drops below this.
    pub outer_rel_tol: f64,
    pub probe_policy: ProbePolicy,
    pub gradient: GradientMode,
    pub surrogate: SurrogateKind,
    pub seed: u64,
    pub preconditioner: Option<PreconditionerConfig>,
    pub pcg: PcgOptions,
    pub audit: AuditConfig,
    pub fd_step: f64,
    pub scaling: Scaling,
}

impl Default for M3cConfig {
    fn default() -> Self {
        Self {
            n_probes: 24,
            schedule: SampleSchedule::Constant,
            max_probes: 1024,
            max_outer: 50,
            max_inner: 2,
            inner_step_tol: 1e-6,
            outer_rel_tol: 1e-4,
            probe_policy: ProbePolicy::FreshPerOuter,
            gradient: GradientMode::Analytic,
            surrogate: SurrogateKind::MonteCarlo,
            seed: 0,
            preconditioner: None,
            pcg: PcgOptions::default(),
            audit: AuditConfig::default(),
            fd_step: FD_STEP,
            scaling: Scaling::Box,
        }
    }
}

impl M3cConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_probes == 0 || self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::invalid("n_probes, max_outer and max_inner must be >= 1"));
        }
        if self.max_probes < self.n_probes {
            return Err(Error::invalid("max_probes must be >= n_probes"));
        }
        if !(self.inner_step_tol > 0.0) || !(self.outer_rel_tol > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::invalid("tolerances and fd_step must be positive"));
        }
        if let SampleSchedule::Geometric { rho } = self.schedule {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::invalid(format!("geometric schedule needs rho in (0, 1), got {rho}")));
            }
        }
        if let Some(p) = self.preconditioner {
            if p.rank == 0 {
                return Err(Error::invalid("preconditioner rank must be >= 1"));
            }
        }
        if !(self.audit.slack_rel >= 0.0) {
            return Err(Error::invalid("audit slack must be nonnegative"));
        }
        if self.audit.mode == AuditMode::Slq && (self.audit.probes == 0 || self.audit.lanczos_steps == 0) {
            return Err(Error::invalid("SLQ audit needs probes and lanczos_steps >= 1"));
        }
        Ok(())
    }
}

/// Objective evaluations used to vet outer steps.
pub(crate) enum Auditor {
    Exact,
    Slq { probes: ProbeSet, k: usize, pcg: PcgOptions },
    Off,
}

impl Auditor {
    pub fn new(problem: &ProblemSpec, cfg: &AuditConfig, seed: u64, pcg: PcgOptions) -> Result<Self> {
        let dense = problem.data_dim() <= DENSE_LIMIT && problem.state_dim() <= DENSE_LIMIT;
        let mode = match cfg.mode {
            AuditMode::Auto if dense => AuditMode::Exact,
            AuditMode::Auto => AuditMode::Slq,
            m => m,
        };
        Ok(match mode {
            AuditMode::Exact => Auditor::Exact,
            AuditMode::Slq => Auditor::Slq {
                probes: ProbeSet::rademacher(problem.data_dim(), cfg.probes, seed)?,
                k: cfg.lanczos_steps,
                pcg,
            },
            _ => Auditor::Off,
        })
    }

    /// Audited objective and PCG iterations spent.
    pub fn eval(&self, problem: &ProblemSpec, theta: &HyperParams) -> Result<(Option<f64>, usize)> {
        match self {
            Auditor::Exact => Ok((Some(eval_f_exact(problem, theta)?.value), 0)),
            Auditor::Slq { probes, k, pcg } => {
                let ev = eval_f_slq(problem, theta, probes, *k, None, pcg)?;
                Ok((Some(ev.value), ev.pcg_iterations))
            }
            Auditor::Off => Ok((None, 0)),
        }
    }
}

struct McObjective<'a> {
    problem: &'a ProblemSpec,
    state: &'a MMState,
    pcg: PcgOptions,
    fd_step: f64,
    mode: GradientMode,
    cache: Option<(DVector<f64>, DVector<f64>)>,
    fn_evals: usize,
    pcg_iterations: usize,
}

impl McObjective<'_> {
    fn params(&self, theta: &DVector<f64>) -> Result<HyperParams> {
        HyperParams::from_vector(theta.clone(), self.problem.n_psi())
    }
}

impl InnerObjective for McObjective<'_> {
    fn value(&mut self, theta: &DVector<f64>) -> Result<f64> {
        let ev = eval_surrogate_mc(self.state, self.problem, &self.params(theta)?, &self.pcg)?;
        self.fn_evals += 1;
        self.pcg_iterations += ev.pcg_iterations;
        self.cache = Some((theta.clone(), ev.r));
        Ok(ev.value)
    }

    fn gradient(&mut self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let hp = self.params(theta)?;
        let g = match self.mode {
            GradientMode::Analytic => {
                let r = self.cache.as_ref().filter(|(t, _)| t == theta).map(|(_, r)| r);
                grad_surrogate_mc(self.state, self.problem, &hp, r, &self.pcg, self.fd_step)?
            }
            GradientMode::FiniteDifference => {
                let g = grad_surrogate_fd(self.state, self.problem, &hp, &self.pcg, self.fd_step)?;
                self.fn_evals += hp.len() + 1;
                g
            }
        };
        self.pcg_iterations += g.pcg_iterations;
        Ok(g.grad)
    }
}

struct ExactObjective<'a> {
    surrogate: ExactSurrogate<'a>,
    n_psi: usize,
    fn_evals: usize,
}

impl InnerObjective for ExactObjective<'_> {
    fn value(&mut self, theta: &DVector<f64>) -> Result<f64> {
        self.fn_evals += 1;
        self.surrogate.value(&HyperParams::from_vector(theta.clone(), self.n_psi)?)
    }

    fn gradient(&mut self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.surrogate.gradient(&HyperParams::from_vector(theta.clone(), self.n_psi)?)
    }
}

/// Work done by one outer iteration, before ledger bookkeeping.
struct OuterStep {
    theta: DVector<f64>,
    inner_iters: usize,
    fn_evals: usize,
    pcg_iters: usize,
    n_probes: usize,
    next_step: f64,
}

/// M³C: repeatedly minimize the Monte-Carlo (or exact) majorant at the
/// current anchor. Failures after the first row end the run with
/// [`Termination::Aborted`] and the rows collected so far.
pub fn m3c_optimize(problem: &ProblemSpec, theta0: &HyperParams, cfg: &M3cConfig) -> Result<(HyperParams, RunMetrics)> {
    cfg.validate()?;
    problem.bounds().check_dim(theta0.len())?;
    if !problem.bounds().contains(theta0.as_slice()) {
        return Err(Error::invalid("initial θ lies outside the box"));
    }
    if cfg.surrogate == SurrogateKind::Exact && (problem.data_dim() > DENSE_LIMIT || problem.state_dim() > DENSE_LIMIT) {
        return Err(Error::DenseLimit { dim: problem.data_dim().max(problem.state_dim()), limit: DENSE_LIMIT });
    }
    let started = Instant::now();
    let mut clock = RowClock::start(problem);
    let auditor = Auditor::new(problem, &cfg.audit, split_seed(cfg.seed, u64::MAX), cfg.pcg)?;

    let mut theta = theta0.clone();
    let (mut f_cur, pcg0) = auditor.eval(problem, &theta)?;
    let mut rows = Vec::new();
    let (ledger, secs) = clock.lap(problem);
    rows.push(MetricsRow {
        outer_iter: 0,
        inner_iters: 0,
        fn_evals: 0,
        matvecs_a: ledger.a,
        matvecs_q: ledger.q,
        pcg_iters: pcg0,
        wall_time_s: secs,
        f_audit: f_cur,
        n_probes: 0,
        accepted: true,
        theta: theta.as_slice().to_vec(),
    });

    let mut multiplier = 1;
    let mut reused: Option<ProbeSet> = None;
    let mut step_hint = None;
    let mut termination = Termination::MaxIterations;
    for t in 1..=cfg.max_outer {
        let n_t = (cfg.schedule.samples(cfg.n_probes, t - 1) * multiplier).min(cfg.max_probes);
        let outcome = outer_step(problem, &theta, cfg, t, n_t, &mut reused, step_hint).and_then(|step| {
            let cand = HyperParams::from_vector(step.theta.clone(), problem.n_psi())?;
            let (f_new, pcg_audit) = auditor.eval(problem, &cand)?;
            Ok((step, cand, f_new, pcg_audit))
        });
        let (step, cand, f_new, pcg_audit) = match outcome {
            Ok(v) => v,
            Err(e) => {
                let (ledger, secs) = clock.lap(problem);
                rows.push(MetricsRow {
                    outer_iter: t,
                    inner_iters: 0,
                    fn_evals: 0,
                    matvecs_a: ledger.a,
                    matvecs_q: ledger.q,
                    pcg_iters: 0,
                    wall_time_s: secs,
                    f_audit: None,
                    n_probes: n_t,
                    accepted: false,
                    theta: theta.as_slice().to_vec(),
                });
                termination = Termination::Aborted(e.to_string());
                break;
            }
        };
        step_hint = Some(step.next_step);

        let accepted = match (f_cur, f_new) {
            (Some(old), Some(new)) if cfg.audit.safeguard => new <= old + cfg.audit.slack_rel * old.abs(),
            _ => true,
        };
        let rel = (&step.theta - theta.vector()).norm() / step.theta.norm().max(f64::MIN_POSITIVE);
        let at_cap = n_t >= cfg.max_probes;
        if accepted {
            theta = cand;
            f_cur = f_new;
        } else {
            multiplier *= 2;
        }
        let (ledger, secs) = clock.lap(problem);
        rows.push(MetricsRow {
            outer_iter: t,
            inner_iters: step.inner_iters,
            fn_evals: step.fn_evals,
            matvecs_a: ledger.a,
            matvecs_q: ledger.q,
            pcg_iters: step.pcg_iters + pcg_audit,
            wall_time_s: secs,
            f_audit: f_new,
            n_probes: step.n_probes,
            accepted,
            theta: theta.as_slice().to_vec(),
        });
        if accepted && rel < cfg.outer_rel_tol {
            termination = Termination::Converged;
            break;
        }
        if !accepted && at_cap {
            termination = Termination::Stalled;
            break;
        }
    }
    let metrics = RunMetrics::new(
        "m3c",
        rows,
        theta0.as_slice().to_vec(),
        theta.as_slice().to_vec(),
        termination,
        started.elapsed().as_secs_f64(),
    );
    Ok((theta, metrics))
}

fn outer_step(
    problem: &ProblemSpec,
    theta: &HyperParams,
    cfg: &M3cConfig,
    t: usize,
    n_t: usize,
    reused: &mut Option<ProbeSet>,
    step_hint: Option<f64>,
) -> Result<OuterStep> {
    let opts = InnerOptions {
        max_iter: cfg.max_inner,
        step_tol: cfg.inner_step_tol,
        scaling: cfg.scaling,
        initial_step: step_hint,
        ..InnerOptions::default()
    };
    match cfg.surrogate {
        SurrogateKind::Exact => {
            let mut obj = ExactObjective { surrogate: ExactSurrogate::new(problem, theta)?, n_psi: problem.n_psi(), fn_evals: 0 };
            let res = projected_gradient_min(&mut obj, problem.bounds(), theta.vector(), &opts)?;
            Ok(OuterStep {
                theta: res.theta,
                inner_iters: res.iterations,
                fn_evals: obj.fn_evals,
                pcg_iters: 0,
                n_probes: 0,
                next_step: res.next_step,
            })
        }
        SurrogateKind::MonteCarlo => {
            let m = problem.data_dim();
            let probes = match cfg.probe_policy {
                ProbePolicy::FreshPerOuter => ProbeSet::rademacher(m, n_t, split_seed(cfg.seed, t as u64))?,
                ProbePolicy::Reuse => match reused {
                    Some(p) if p.len() == n_t => p.clone(),
                    _ => {
                        let p = ProbeSet::rademacher(m, n_t, split_seed(cfg.seed, 0))?;
                        *reused = Some(p.clone());
                        p
                    }
                },
            };
            let pre = match cfg.preconditioner {
                Some(p) => {
                    let psi = problem.build_psi(theta)?;
                    Some(psi_preconditioner(&psi, p.rank, split_seed(cfg.seed ^ 0xA5A5, t as u64))?)
                }
                None => None,
            };
            let state = precompute_solves(problem, theta, probes, pre, &cfg.pcg)?;
            let mut obj = McObjective {
                problem,
                state: &state,
                pcg: cfg.pcg,
                fd_step: cfg.fd_step,
                mode: cfg.gradient,
                cache: None,
                fn_evals: 0,
                pcg_iterations: state.pcg_iterations(),
            };
            let res = projected_gradient_min(&mut obj, problem.bounds(), theta.vector(), &opts)?;
            Ok(OuterStep {
                theta: res.theta,
                inner_iters: res.iterations,
                fn_evals: obj.fn_evals,
                pcg_iters: obj.pcg_iterations,
                n_probes: n_t,
                next_step: res.next_step,
            })
        }
    }
}
