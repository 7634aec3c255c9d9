use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::params::{HyperParams, ParamBox};
use super::prior::HyperPrior;
use crate::error::{Error, Result};
use crate::linalg::{check_dense_limit, pcg_solve, Counter, LinOp, PcgOptions, PcgOutcome, Preconditioner, SymOp};

/// Partial derivative of an operator with respect to one hyperparameter.
pub enum Derivative<T> {
    /// The operator does not depend on this component.
    Zero,
    Op(T),
    /// No analytic builder; callers fall back to finite differences.
    Unavailable,
}

/// Parametric forward map `A(y)`.
pub trait ForwardModel: Send + Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn n_params(&self) -> usize;
    fn build(&self, y: &[f64]) -> Result<Arc<dyn LinOp>>;
    fn derivative(&self, _y: &[f64], _j: usize) -> Result<Derivative<Arc<dyn LinOp>>> {
        Ok(Derivative::Unavailable)
    }
}

/// Prior covariance `Q_x(ψ)`; the built operator is symmetric so only
/// `apply` is used.
pub trait CovarianceModel: Send + Sync {
    fn dim(&self) -> usize;
    fn build(&self, psi: &[f64]) -> Result<Arc<dyn LinOp>>;
    fn derivative(&self, _psi: &[f64], _j: usize) -> Result<Derivative<Arc<dyn LinOp>>> {
        Ok(Derivative::Unavailable)
    }
}

/// Diagonal noise covariance `R(ψ)`.
pub trait NoiseModel: Send + Sync {
    fn dim(&self) -> usize;
    fn build(&self, psi: &[f64]) -> Result<NoiseCov>;
    fn derivative(&self, _psi: &[f64], _j: usize) -> Result<Derivative<DVector<f64>>> {
        Ok(Derivative::Unavailable)
    }
}

/// Positive diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCov {
    diag: DVector<f64>,
}

impl NoiseCov {
    pub fn new(diag: DVector<f64>) -> Result<Self> {
        if let Some(i) = diag.iter().position(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::invalid(format!("noise variance {i} is {} (must be positive)", diag[i])));
        }
        Ok(Self { diag })
    }

    pub fn scalar(m: usize, value: f64) -> Result<Self> {
        Self::new(DVector::from_element(m, value))
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    /// The common value when `R = c I`.
    pub fn as_scalar(&self) -> Option<f64> {
        let first = self.diag[0];
        self.diag.iter().all(|&d| d == first).then_some(first)
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.diag.component_mul(v)
    }
}

/// Counts of operator applications. A and Aᵀ (and their derivatives) count
/// towards `a`; Q and its derivatives towards `q`; Ψ matvecs towards `psi`.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    a: Counter,
    q: Counter,
    psi: Counter,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LedgerSnapshot {
    pub a: u64,
    pub q: u64,
    pub psi: u64,
}

impl std::ops::Sub for LedgerSnapshot {
    type Output = LedgerSnapshot;
    fn sub(self, rhs: Self) -> Self {
        LedgerSnapshot { a: self.a - rhs.a, q: self.q - rhs.q, psi: self.psi - rhs.psi }
    }
}

impl Ledger {
    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot { a: self.a.get(), q: self.q.get(), psi: self.psi.get() }
    }
}

/// A [`LinOp`] whose applications are charged to a ledger counter.
#[derive(Clone)]
pub struct CountedOp {
    inner: Arc<dyn LinOp>,
    counter: Counter,
}

impl CountedOp {
    fn new(inner: Arc<dyn LinOp>, counter: Counter) -> Self {
        Self { inner, counter }
    }
}

impl LinOp for CountedOp {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }
    fn ncols(&self) -> usize {
        self.inner.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.counter.incr();
        self.inner.apply(x)
    }
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        self.counter.incr();
        self.inner.apply_t(y)
    }
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        self.inner.to_dense()
    }
}

/// Matrix-free `Ψ(θ) = A(y) Q(ψ) A(y)ᵀ + R(ψ)`.
#[derive(Clone)]
pub struct PsiOperator {
    a: CountedOp,
    q: CountedOp,
    noise: NoiseCov,
    ledger: Counter,
    local: Counter,
}

impl PsiOperator {
    pub fn forward(&self) -> &CountedOp {
        &self.a
    }

    pub fn prior(&self) -> &CountedOp {
        &self.q
    }

    pub fn noise(&self) -> &NoiseCov {
        &self.noise
    }
}

impl SymOp for PsiOperator {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.local.incr();
        self.ledger.incr();
        let mut out = self.a.apply(&self.q.apply(&self.a.apply_t(v)));
        out += self.noise.apply(v);
        out
    }
    fn matvec_count(&self) -> u64 {
        self.local.get()
    }
}

enum DerivKind {
    Zero,
    Distribution { a: CountedOp, dq: Option<CountedOp>, dr: Option<DVector<f64>> },
    Model { a: CountedOp, q: CountedOp, da: CountedOp },
    FiniteDifference { base: PsiOperator, shifted: PsiOperator, h: f64 },
}

/// Action of `∂Ψ/∂θ_j` and `∂A/∂θ_j` for one component.
pub struct PsiDerivative {
    kind: DerivKind,
    m: usize,
}

impl PsiDerivative {
    pub fn is_zero(&self) -> bool {
        matches!(self.kind, DerivKind::Zero)
    }

    pub fn is_finite_difference(&self) -> bool {
        matches!(self.kind, DerivKind::FiniteDifference { .. })
    }

    /// `(∂Ψ/∂θ_j) v`. For model parameters this is
    /// `(∂A) Q Aᵀ v + A Q (∂A)ᵀ v`.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            DerivKind::Zero => DVector::zeros(self.m),
            DerivKind::Distribution { a, dq, dr } => {
                let mut out = match dq {
                    Some(dq) => a.apply(&dq.apply(&a.apply_t(v))),
                    None => DVector::zeros(self.m),
                };
                if let Some(dr) = dr {
                    out += dr.component_mul(v);
                }
                out
            }
            DerivKind::Model { a, q, da } => {
                let mut out = da.apply(&q.apply(&a.apply_t(v)));
                out += a.apply(&q.apply(&da.apply_t(v)));
                out
            }
            DerivKind::FiniteDifference { base, shifted, h } => (shifted.apply(v) - base.apply(v)) / *h,
        }
    }

    /// `(∂A/∂θ_j) x`; zero for distribution parameters.
    pub fn forward_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            DerivKind::Model { da, .. } => da.apply(x),
            DerivKind::FiniteDifference { base, shifted, h } => {
                (shifted.forward().apply(x) - base.forward().apply(x)) / *h
            }
            _ => DVector::zeros(self.m),
        }
    }
}

/// Dense `A`, `Q`, and diagonal of `R` at one θ.
pub struct DenseParts {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DVector<f64>,
}

impl DenseParts {
    pub fn psi(&self) -> DMatrix<f64> {
        let aq = &self.a * &self.q;
        let mut psi = aq * self.a.transpose();
        for i in 0..psi.nrows() {
            psi[(i, i)] += self.r[i];
        }
        (&psi + psi.transpose()) * 0.5
    }
}

/// Everything needed to build the pieces of `Ψ(θ)` and the objective.
pub struct ProblemParts {
    pub name: String,
    pub forward: Arc<dyn ForwardModel>,
    pub prior_cov: Arc<dyn CovarianceModel>,
    pub noise: Arc<dyn NoiseModel>,
    /// Number of distribution parameters ψ (leading components of θ).
    pub n_psi: usize,
    pub prior_mean: DVector<f64>,
    pub data: DVector<f64>,
    pub hyperprior: HyperPrior,
    pub bounds: ParamBox,
    pub x_true: Option<DVector<f64>>,
    pub theta_true: Option<Vec<f64>>,
}

/// Immutable, shareable problem specification.
pub struct ProblemSpec {
    name: String,
    forward: Arc<dyn ForwardModel>,
    prior_cov: Arc<dyn CovarianceModel>,
    noise: Arc<dyn NoiseModel>,
    n_psi: usize,
    prior_mean: DVector<f64>,
    data: DVector<f64>,
    hyperprior: HyperPrior,
    bounds: ParamBox,
    x_true: Option<DVector<f64>>,
    theta_true: Option<HyperParams>,
    ledger: Ledger,
}

impl ProblemSpec {
    pub fn new(parts: ProblemParts) -> Result<Self> {
        let (m, n) = (parts.forward.nrows(), parts.forward.ncols());
        let p = parts.n_psi + parts.forward.n_params();
        let dims = [
            ("prior covariance", parts.prior_cov.dim(), n),
            ("noise covariance", parts.noise.dim(), m),
            ("prior mean", parts.prior_mean.len(), n),
            ("data", parts.data.len(), m),
            ("hyperprior", parts.hyperprior.len(), p),
            ("box", parts.bounds.dim(), p),
        ];
        for (what, got, want) in dims {
            if got != want {
                return Err(Error::invalid(format!("{what} has dimension {got}, expected {want}")));
            }
        }
        if m == 0 || n == 0 {
            return Err(Error::invalid("forward operator must have nonzero dimensions"));
        }
        let theta_true = match parts.theta_true {
            Some(t) => Some(HyperParams::from_vector(DVector::from_vec(t), parts.n_psi)?),
            None => None,
        };
        if let Some(x) = &parts.x_true {
            if x.len() != n {
                return Err(Error::invalid(format!("x_true has length {}, expected {n}", x.len())));
            }
        }
        let spec = Self {
            name: parts.name,
            forward: parts.forward,
            prior_cov: parts.prior_cov,
            noise: parts.noise,
            n_psi: parts.n_psi,
            prior_mean: parts.prior_mean,
            data: parts.data,
            hyperprior: parts.hyperprior,
            bounds: parts.bounds,
            x_true: parts.x_true,
            theta_true,
            ledger: Ledger::default(),
        };
        spec.check_noise_on_box()?;
        Ok(spec)
    }

    /// R must be SPD over the box: probe the center and all corners (up to
    /// 2^8 of them).
    fn check_noise_on_box(&self) -> Result<()> {
        let q = self.n_psi;
        let mut points = vec![self.bounds.center().as_slice()[..q].to_vec()];
        if q <= 8 {
            for mask in 0..(1usize << q) {
                points.push(
                    (0..q)
                        .map(|j| if mask >> j & 1 == 1 { self.bounds.upper()[j] } else { self.bounds.lower()[j] })
                        .collect(),
                );
            }
        }
        for psi in points {
            self.noise.build(&psi).map_err(|e| Error::invalid(format!("noise covariance not SPD on the box: {e}")))?;
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_params(&self) -> usize {
        self.bounds.dim()
    }

    pub fn n_psi(&self) -> usize {
        self.n_psi
    }

    /// Data dimension `m`.
    pub fn data_dim(&self) -> usize {
        self.forward.nrows()
    }

    /// Unknown dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.forward.ncols()
    }

    pub fn bounds(&self) -> &ParamBox {
        &self.bounds
    }

    pub fn hyperprior(&self) -> &HyperPrior {
        &self.hyperprior
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn x_true(&self) -> Option<&DVector<f64>> {
        self.x_true.as_ref()
    }

    pub fn theta_true(&self) -> Option<&HyperParams> {
        self.theta_true.as_ref()
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Wrap a raw vector as hyperparameters with this problem's ψ/y split.
    pub fn params(&self, values: &[f64]) -> Result<HyperParams> {
        self.check_len(values.len())?;
        HyperParams::from_vector(DVector::from_column_slice(values), self.n_psi)
    }

    fn check_len(&self, p: usize) -> Result<()> {
        if p != self.n_params() {
            return Err(Error::invalid(format!("θ has length {p}, problem expects {}", self.n_params())));
        }
        Ok(())
    }

    fn check_theta(&self, theta: &HyperParams) -> Result<()> {
        self.check_len(theta.len())?;
        if theta.n_psi() != self.n_psi {
            return Err(Error::invalid(format!(
                "θ splits after {} components, problem expects {}",
                theta.n_psi(),
                self.n_psi
            )));
        }
        Ok(())
    }

    pub fn forward_op(&self, theta: &HyperParams) -> Result<CountedOp> {
        self.check_theta(theta)?;
        let a = self.forward.build(theta.y())?;
        self.check_shape("forward operator", &*a, self.data_dim(), self.state_dim())?;
        Ok(CountedOp::new(a, self.ledger.a.clone()))
    }

    pub fn prior_op(&self, theta: &HyperParams) -> Result<CountedOp> {
        self.check_theta(theta)?;
        let q = self.prior_cov.build(theta.psi())?;
        self.check_shape("prior covariance", &*q, self.state_dim(), self.state_dim())?;
        Ok(CountedOp::new(q, self.ledger.q.clone()))
    }

    pub fn noise_cov(&self, theta: &HyperParams) -> Result<NoiseCov> {
        self.check_theta(theta)?;
        let r = self.noise.build(theta.psi())?;
        if r.diag().len() != self.data_dim() {
            return Err(Error::invalid("noise covariance dimension mismatch"));
        }
        Ok(r)
    }

    fn check_shape(&self, what: &str, op: &dyn LinOp, m: usize, n: usize) -> Result<()> {
        if op.nrows() != m || op.ncols() != n {
            return Err(Error::invalid(format!(
                "{what} is {}x{}, expected {m}x{n}",
                op.nrows(),
                op.ncols()
            )));
        }
        Ok(())
    }

    pub fn build_psi(&self, theta: &HyperParams) -> Result<PsiOperator> {
        Ok(PsiOperator {
            a: self.forward_op(theta)?,
            q: self.prior_op(theta)?,
            noise: self.noise_cov(theta)?,
            ledger: self.ledger.psi.clone(),
            local: Counter::new(),
        })
    }

    /// Negative log hyperprior and gradient.
    pub fn hyperprior_eval(&self, theta: &HyperParams) -> Result<(f64, DVector<f64>)> {
        self.hyperprior.eval(theta.as_slice(), &self.bounds)
    }

    /// `A(y) μ_x − b`.
    pub fn residual(&self, a: &dyn LinOp) -> DVector<f64> {
        a.apply(&self.prior_mean) - &self.data
    }

    /// Derivative actions for component `j`; finite differences with step
    /// `h_rel·max(1, |θ_j|)` are used when no analytic builder exists.
    pub fn psi_derivative(&self, theta: &HyperParams, j: usize, h_rel: f64) -> Result<PsiDerivative> {
        self.check_theta(theta)?;
        let p = self.n_params();
        if j >= p {
            return Err(Error::invalid(format!("component {j} out of range for p = {p}")));
        }
        let m = self.data_dim();
        let q = self.n_psi;
        let analytic = if j < q {
            let dq = self.prior_cov.derivative(theta.psi(), j)?;
            let dr = self.noise.derivative(theta.psi(), j)?;
            match (dq, dr) {
                (Derivative::Unavailable, _) | (_, Derivative::Unavailable) => None,
                (Derivative::Zero, Derivative::Zero) => Some(DerivKind::Zero),
                (dq, dr) => {
                    let dq = match dq {
                        Derivative::Op(op) => Some(CountedOp::new(op, self.ledger.q.clone())),
                        _ => None,
                    };
                    let dr = match dr {
                        Derivative::Op(d) => Some(d),
                        _ => None,
                    };
                    Some(DerivKind::Distribution { a: self.forward_op(theta)?, dq, dr })
                }
            }
        } else {
            match self.forward.derivative(theta.y(), j - q)? {
                Derivative::Unavailable => None,
                Derivative::Zero => Some(DerivKind::Zero),
                Derivative::Op(da) => Some(DerivKind::Model {
                    a: self.forward_op(theta)?,
                    q: self.prior_op(theta)?,
                    da: CountedOp::new(da, self.ledger.a.clone()),
                }),
            }
        };
        let kind = match analytic {
            Some(k) => k,
            None => {
                let h = self.fd_step(theta.as_slice()[j], j, h_rel);
                let shifted = theta.with_component(j, theta.as_slice()[j] + h);
                DerivKind::FiniteDifference { base: self.build_psi(theta)?, shifted: self.build_psi(&shifted)?, h }
            }
        };
        Ok(PsiDerivative { kind, m })
    }

    /// Forward step `h_rel·max(1,|t|)`, flipped to a backward step when the
    /// forward point would leave the box.
    pub(crate) fn fd_step(&self, t: f64, j: usize, h_rel: f64) -> f64 {
        let h = h_rel * t.abs().max(1.0);
        if t + h > self.bounds.upper()[j] {
            -h
        } else {
            h
        }
    }

    /// Dense `A`, `Q`, `diag R` from uncounted raw operators.
    pub fn dense_parts(&self, theta: &HyperParams) -> Result<DenseParts> {
        self.check_theta(theta)?;
        check_dense_limit(self.data_dim())?;
        check_dense_limit(self.state_dim())?;
        let a = self.forward.build(theta.y())?.to_dense()?;
        let q = self.prior_cov.build(theta.psi())?.to_dense()?;
        let r = self.noise_cov(theta)?.diag().clone();
        Ok(DenseParts { a, q, r })
    }

    pub fn dense_psi(&self, theta: &HyperParams) -> Result<DMatrix<f64>> {
        Ok(self.dense_parts(theta)?.psi())
    }

    /// Dense `∂Ψ/∂θ_j` and `(∂A/∂θ_j) μ_x`. Requires analytic builders.
    pub fn dense_psi_derivative(&self, theta: &HyperParams, j: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let parts = self.dense_parts(theta)?;
        self.dense_psi_derivative_with(theta, j, &parts)
    }

    pub(crate) fn dense_psi_derivative_with(
        &self,
        theta: &HyperParams,
        j: usize,
        parts: &DenseParts,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (m, q) = (self.data_dim(), self.n_psi);
        let missing = || Error::invalid(format!("no analytic derivative builder for θ component {j}"));
        if j >= self.n_params() {
            return Err(Error::invalid(format!("component {j} out of range")));
        }
        if j < q {
            let mut d = match self.prior_cov.derivative(theta.psi(), j)? {
                Derivative::Zero => DMatrix::zeros(m, m),
                Derivative::Op(dq) => {
                    let dq = dq.to_dense()?;
                    &parts.a * dq * parts.a.transpose()
                }
                Derivative::Unavailable => return Err(missing()),
            };
            match self.noise.derivative(theta.psi(), j)? {
                Derivative::Zero => {}
                Derivative::Op(dr) => {
                    for i in 0..m {
                        d[(i, i)] += dr[i];
                    }
                }
                Derivative::Unavailable => return Err(missing()),
            }
            Ok(((&d + d.transpose()) * 0.5, DVector::zeros(m)))
        } else {
            match self.forward.derivative(theta.y(), j - q)? {
                Derivative::Zero => Ok((DMatrix::zeros(m, m), DVector::zeros(m))),
                Derivative::Op(da) => {
                    let da = da.to_dense()?;
                    let half = &da * &parts.q * parts.a.transpose();
                    let dmu = &da * &self.prior_mean;
                    Ok((&half + half.transpose(), dmu))
                }
                Derivative::Unavailable => Err(missing()),
            }
        }
    }

    /// Posterior mean `x̂ = μ_x + Q Aᵀ Ψ⁻¹ (b − A μ_x)` by PCG.
    pub fn reconstruct(
        &self,
        theta: &HyperParams,
        pre: Option<&dyn Preconditioner>,
        opts: &PcgOptions,
    ) -> Result<(DVector<f64>, PcgOutcome)> {
        let psi = self.build_psi(theta)?;
        let rhs = -self.residual(psi.forward());
        let sol = pcg_solve(&psi, &rhs, pre, opts)?;
        let x = &self.prior_mean + psi.prior().apply(&psi.forward().apply_t(&sol.x));
        Ok((x, sol))
    }

    /// `‖x̂ − x_true‖ / ‖x_true‖` when the truth is known.
    pub fn relative_error(&self, x: &DVector<f64>) -> Option<f64> {
        self.x_true.as_ref().map(|t| (x - t).norm() / t.norm())
    }
}
