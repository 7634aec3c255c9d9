use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamBox;

/// Objective seen by [`projected_gradient_min`].
pub trait InnerObjective {
    fn value(&mut self, theta: &DVector<f64>) -> Result<f64>;
    fn gradient(&mut self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Called after every accepted step. Returning `true` ends the run early
    /// so the caller can rebuild state that depends on θ.
    fn accepted(&mut self, _theta: &DVector<f64>) -> Result<bool> {
        Ok(false)
    }
}

/// Closure pair as an [`InnerObjective`].
pub struct FnObjective<F, G> {
    pub f: F,
    pub g: G,
}

impl<F, G> InnerObjective for FnObjective<F, G>
where
    F: FnMut(&DVector<f64>) -> Result<f64>,
    G: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    fn value(&mut self, theta: &DVector<f64>) -> Result<f64> {
        (self.f)(theta)
    }
    fn gradient(&mut self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        (self.g)(theta)
    }
}

/// Diagonal metric for the gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    Identity,
    /// `θ_j²` for strictly positive components, squared box width otherwise.
    #[default]
    Box,
}

impl Scaling {
    fn metric(self, theta: &DVector<f64>, bounds: &ParamBox) -> DVector<f64> {
        match self {
            Scaling::Identity => DVector::from_element(theta.len(), 1.0),
            Scaling::Box => DVector::from_fn(theta.len(), |j, _| {
                if bounds.lower()[j] > 0.0 {
                    theta[j] * theta[j]
                } else {
                    bounds.width(j).powi(2)
                }
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    pub max_iter: usize,
    /// Stop when `‖θ_{k+1} − θ_k‖ / max(1, ‖θ_k‖)` falls below this.
    pub step_tol: f64,
    pub armijo_c: f64,
    pub max_backtracks: usize,
    pub scaling: Scaling,
    /// First trial step; derived from the gradient when `None`.
    pub initial_step: Option<f64>,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self { max_iter: 100, step_tol: 1e-8, armijo_c: 1e-4, max_backtracks: 50, scaling: Scaling::Box, initial_step: None }
    }
}

#[derive(Debug, Clone)]
pub struct InnerResult {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub value: f64,
    pub initial_value: f64,
    pub converged: bool,
    /// Line search exhausted its backtracks.
    pub stalled: bool,
    /// The objective asked for a restart via [`InnerObjective::accepted`].
    pub restart: bool,
    pub backtracks: usize,
    pub fn_evals: usize,
    pub grad_evals: usize,
    /// Step length to seed a follow-up run.
    pub next_step: f64,
}

/// One accepted step, passed to the observer.
pub struct InnerStep<'a> {
    pub iter: usize,
    pub theta: &'a DVector<f64>,
    pub value: f64,
    pub backtracks: usize,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numerical(format!("{what} is not finite")))
    }
}

/// Box-constrained projected gradient with Armijo backtracking and
/// Barzilai-Borwein trial steps.
pub fn projected_gradient_min(
    obj: &mut dyn InnerObjective,
    bounds: &ParamBox,
    theta0: &DVector<f64>,
    opts: &InnerOptions,
) -> Result<InnerResult> {
    projected_gradient_min_observed(obj, bounds, theta0, opts, &mut |_| {})
}

pub fn projected_gradient_min_observed(
    obj: &mut dyn InnerObjective,
    bounds: &ParamBox,
    theta0: &DVector<f64>,
    opts: &InnerOptions,
    observer: &mut dyn FnMut(&InnerStep),
) -> Result<InnerResult> {
    bounds.check_dim(theta0.len())?;
    if !bounds.contains(theta0.as_slice()) {
        return Err(Error::invalid("starting point lies outside the box"));
    }
    if !(opts.step_tol > 0.0) || !(opts.armijo_c > 0.0 && opts.armijo_c < 1.0) {
        return Err(Error::invalid("step_tol must be positive and armijo_c in (0, 1)"));
    }

    let mut theta = theta0.clone();
    let initial_value = finite(obj.value(&theta)?, "objective")?;
    let mut value = initial_value;
    let mut grad = obj.gradient(&theta)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("gradient is not finite"));
    }
    let (mut fn_evals, mut grad_evals) = (1, 1);
    let mut metric = opts.scaling.metric(&theta, bounds);
    let mut alpha = match opts.initial_step {
        Some(a) if a > 0.0 && a.is_finite() => a,
        _ => default_step(&grad, &metric, bounds, opts.scaling),
    };

    let mut result = InnerResult {
        theta: theta.clone(),
        iterations: 0,
        value,
        initial_value,
        converged: false,
        stalled: false,
        restart: false,
        backtracks: 0,
        fn_evals: 0,
        grad_evals: 0,
        next_step: alpha,
    };

    while result.iterations < opts.max_iter {
        let direction = metric.component_mul(&grad);
        let mut backtracks = 0;
        let (candidate, cand_value) = loop {
            let candidate = bounds.project(&(&theta - &direction * alpha));
            let delta = &candidate - &theta;
            if delta.norm() == 0.0 {
                break (candidate, value);
            }
            let f = finite(obj.value(&candidate)?, "objective")?;
            fn_evals += 1;
            if f <= value + opts.armijo_c * grad.dot(&delta) {
                break (candidate, f);
            }
            backtracks += 1;
            alpha *= 0.5;
            if backtracks > opts.max_backtracks {
                result.stalled = true;
                break (theta.clone(), value);
            }
        };
        result.backtracks += backtracks;
        if result.stalled {
            break;
        }
        let step = &candidate - &theta;
        if step.norm() == 0.0 {
            result.converged = true;
            break;
        }
        let rel = step.norm() / theta.norm().max(1.0);
        result.iterations += 1;
        theta = candidate;
        value = cand_value;
        observer(&InnerStep { iter: result.iterations, theta: &theta, value, backtracks });

        if obj.accepted(&theta)? {
            result.restart = true;
            break;
        }
        if rel < opts.step_tol {
            result.converged = true;
            break;
        }
        let new_grad = obj.gradient(&theta)?;
        grad_evals += 1;
        if new_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical("gradient is not finite"));
        }
        metric = opts.scaling.metric(&theta, bounds);
        let y = &new_grad - &grad;
        let sy = step.dot(&y);
        let ss: f64 = step.iter().zip(metric.iter()).map(|(s, d)| s * s / d).sum();
        alpha = if sy > 0.0 && ss.is_finite() { ss / sy } else { 2.0 * alpha };
        alpha = alpha.clamp(1e-30, 1e30);
        grad = new_grad;
    }

    result.next_step = alpha;
    result.fn_evals = fn_evals;
    result.grad_evals = grad_evals;
    if value <= initial_value {
        result.theta = theta;
        result.value = value;
    } else {
        result.theta = theta0.clone();
        result.value = initial_value;
    }
    Ok(result)
}

/// First trial step: a unit move in the scaled infinity norm, or a quarter
/// of the narrowest box side for the identity metric.
fn default_step(grad: &DVector<f64>, metric: &DVector<f64>, bounds: &ParamBox, scaling: Scaling) -> f64 {
    let gmax = grad.iter().zip(metric.iter()).map(|(g, d)| (g * d.sqrt()).abs()).fold(0.0, f64::max);
    if gmax == 0.0 {
        return 1.0;
    }
    match scaling {
        Scaling::Box => 1.0 / gmax,
        Scaling::Identity => {
            let w = (0..bounds.dim()).map(|j| bounds.width(j)).fold(f64::INFINITY, f64::min);
            (0.25 * w / gmax).min(1.0)
        }
    }
}
