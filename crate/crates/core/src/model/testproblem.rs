//! Seeded desk-scale test problems.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::components::{FixedForward, MaternCovModel, Scale, ScaledIdentityCov, ScaledIdentityNoise};
use super::deblur::DeblurForward;
use super::matern::{MaternKernel, Smoothness};
use super::params::ParamBox;
use super::prior::{HyperPrior, PriorComponent};
use super::problem::{ForwardModel, ProblemParts, ProblemSpec};
use super::superres::SuperresForward;
use super::tomo::{cell_centers, ray_matrix};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, split_seed, LinOp};

/// Box override in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthSource {
    /// Deterministic piecewise-smooth image.
    Phantom,
    /// Draw from the prior at θ_true.
    PriorSample,
}

/// θ = (noise variance, prior variance, l1, l2, l3).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeblurConfig {
    pub size: usize,
    pub psf_half_width: usize,
    pub noise_level: f64,
    pub seed: u64,
    /// Values for (prior variance, l1, l2, l3); the noise variance is the
    /// realised one.
    pub theta_true: Option<Vec<f64>>,
    pub bounds: Option<BoundsConfig>,
    pub x_true: TruthSource,
}

impl Default for DeblurConfig {
    fn default() -> Self {
        Self {
            size: 16,
            psf_half_width: 3,
            noise_level: 0.02,
            seed: 0,
            theta_true: None,
            bounds: None,
            x_true: TruthSource::Phantom,
        }
    }
}

/// θ = (θ1 noise variance, θ2 Matérn standard deviation, θ3 length scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TomoConfig {
    pub size: usize,
    pub n_src: usize,
    pub n_rec: usize,
    pub nu: Smoothness,
    pub noise_level: f64,
    pub seed: u64,
    /// Values for (θ2, θ3); θ1 is the realised noise variance.
    pub theta_true: Option<Vec<f64>>,
    pub bounds: Option<BoundsConfig>,
    pub x_true: TruthSource,
    pub gamma_rate: f64,
}

impl Default for TomoConfig {
    fn default() -> Self {
        Self {
            size: 8,
            n_src: 8,
            n_rec: 8,
            nu: Smoothness::Half,
            noise_level: 0.05,
            seed: 0,
            theta_true: None,
            bounds: None,
            x_true: TruthSource::PriorSample,
            gamma_rate: 1e-4,
        }
    }
}

/// θ = per-frame warp parameters (2 for translations, 6 for affine maps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperresConfig {
    pub size: usize,
    pub factor: usize,
    pub frames: usize,
    pub affine: bool,
    pub noise_level: f64,
    pub seed: u64,
    /// Translations are drawn uniformly from `[-shift_range, shift_range]`
    /// unless `theta_true` is given.
    pub shift_range: f64,
    pub theta_true: Option<Vec<f64>>,
    pub bounds: Option<BoundsConfig>,
}

impl Default for SuperresConfig {
    fn default() -> Self {
        Self {
            size: 16,
            factor: 2,
            frames: 3,
            affine: false,
            noise_level: 0.02,
            seed: 0,
            shift_range: 0.8,
            theta_true: None,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TestProblem {
    Deblur(DeblurConfig),
    Tomo(TomoConfig),
    Superres(SuperresConfig),
}

impl TestProblem {
    /// Default configuration for a named kind.
    pub fn default_for(kind: &str) -> Result<Self> {
        match kind {
            "deblur" => Ok(TestProblem::Deblur(DeblurConfig::default())),
            "tomo" => Ok(TestProblem::Tomo(TomoConfig::default())),
            "superres" => Ok(TestProblem::Superres(SuperresConfig::default())),
            other => Err(Error::invalid(format!("unsupported test problem kind '{other}'"))),
        }
    }
}

pub fn make_test_problem(cfg: &TestProblem) -> Result<ProblemSpec> {
    match cfg {
        TestProblem::Deblur(c) => make_deblur(c),
        TestProblem::Tomo(c) => make_tomo(c),
        TestProblem::Superres(c) => make_superres(c),
    }
}

/// Rectangle plus a smooth bump, values in roughly [0, 1.5].
pub fn phantom(side: usize) -> DVector<f64> {
    let s = side as f64;
    DVector::from_fn(side * side, |k, _| {
        let (i, j) = ((k / side) as f64 + 0.5, (k % side) as f64 + 0.5);
        let rect = if i > 0.2 * s && i < 0.55 * s && j > 0.25 * s && j < 0.7 * s { 1.0 } else { 0.0 };
        let (di, dj) = ((i - 0.7 * s) / (0.12 * s), (j - 0.6 * s) / (0.12 * s));
        rect + 0.8 * (-0.5 * (di * di + dj * dj)).exp()
    })
}

fn check_noise_level(level: f64) -> Result<()> {
    if !(level > 0.0) || !level.is_finite() {
        return Err(Error::invalid(format!("noise level must be positive, got {level}")));
    }
    Ok(())
}

/// `b = A x + e`, `e ~ N(0, (level·rms(Ax))² I)`; returns `(b, variance)`.
fn synthesize(a: &dyn LinOp, x: &DVector<f64>, level: f64, seed: u64) -> (DVector<f64>, f64) {
    let ax = a.apply(x);
    let rms = (ax.norm_squared() / ax.len() as f64).sqrt();
    let std = level * rms;
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 1));
    let b = DVector::from_fn(ax.len(), |i, _| ax[i] + std * { let z: f64 = StandardNormal.sample(&mut rng); z });
    (b, std * std)
}

fn bounds_or(cfg: &Option<BoundsConfig>, lower: Vec<f64>, upper: Vec<f64>) -> Result<ParamBox> {
    match cfg {
        Some(b) => ParamBox::new(b.lower.clone(), b.upper.clone()),
        None => ParamBox::new(lower, upper),
    }
}

fn take_truth(given: &Option<Vec<f64>>, default: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    match given {
        Some(v) if v.len() != default.len() => Err(Error::invalid(format!(
            "{what}: theta_true needs {} values, got {}",
            default.len(),
            v.len()
        ))),
        Some(v) => Ok(v.clone()),
        None => Ok(default),
    }
}

fn make_deblur(c: &DeblurConfig) -> Result<ProblemSpec> {
    check_noise_level(c.noise_level)?;
    if c.size == 0 || 2 * c.psf_half_width + 1 > c.size {
        return Err(Error::invalid("deblur needs size >= 2·psf_half_width + 1"));
    }
    let n = c.size * c.size;
    let fwd = DeblurForward { side: c.size, half: c.psf_half_width };
    let rest = take_truth(&c.theta_true, vec![0.25, 0.8, 0.2, 0.7], "deblur")?;
    let x = match c.x_true {
        TruthSource::Phantom => phantom(c.size),
        TruthSource::PriorSample => {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(c.seed, 0));
            DVector::from_fn(n, |_, _| rest[0].sqrt() * { let z: f64 = StandardNormal.sample(&mut rng); z })
        }
    };
    let a = fwd.build(&rest[1..])?;
    let (b, var) = synthesize(&*a, &x, c.noise_level, c.seed);
    let bounds = bounds_or(&c.bounds, vec![1e-7, 1e-3, 0.3, -0.6, 0.3], vec![1.0, 10.0, 2.0, 0.6, 2.0])?;
    let hyperprior = HyperPrior::new(vec![
        PriorComponent::Gamma { rate: 1e-4 },
        PriorComponent::Gamma { rate: 1e-4 },
        PriorComponent::Gaussian { mean: 1.0, variance: 1.0 },
        PriorComponent::Gaussian { mean: 0.0, variance: 1.0 },
        PriorComponent::Gaussian { mean: 1.0, variance: 1.0 },
    ])?;
    let mut theta_true = vec![var];
    theta_true.extend(rest);
    ProblemSpec::new(ProblemParts {
        name: "deblur".into(),
        forward: Arc::new(fwd),
        prior_cov: Arc::new(ScaledIdentityCov { dim: n, scale: Scale::Linear(1) }),
        noise: Arc::new(ScaledIdentityNoise { dim: n, scale: Scale::Linear(0) }),
        n_psi: 2,
        prior_mean: DVector::zeros(n),
        data: b,
        hyperprior,
        bounds,
        x_true: Some(x),
        theta_true: Some(theta_true),
    })
}

fn make_tomo(c: &TomoConfig) -> Result<ProblemSpec> {
    check_noise_level(c.noise_level)?;
    let a = Arc::new(ray_matrix(c.size, c.n_src, c.n_rec)?);
    let n = c.size * c.size;
    let m = c.n_src * c.n_rec;
    let kernel = MaternKernel::new(&cell_centers(c.size), c.nu)?;
    let rest = take_truth(&c.theta_true, vec![1.0, 0.3], "tomo")?;
    let x = match c.x_true {
        TruthSource::Phantom => phantom(c.size),
        TruthSource::PriorSample => {
            let mut cov = kernel.matrix(rest[0], rest[1])?;
            let jitter = 1e-10 * rest[0] * rest[0];
            for i in 0..n {
                cov[(i, i)] += jitter;
            }
            let l = cholesky_lower(&cov)?;
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(c.seed, 0));
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            l * z
        }
    };
    let (b, var) = synthesize(&*a, &x, c.noise_level, c.seed);
    let bounds = bounds_or(&c.bounds, vec![1e-4, 0.1, 0.05], vec![0.5, 5.0, 2.0])?;
    let hyperprior = HyperPrior::new(vec![PriorComponent::Gamma { rate: c.gamma_rate }; 3])?;
    let mut theta_true = vec![var];
    theta_true.extend(rest);
    ProblemSpec::new(ProblemParts {
        name: "tomo".into(),
        forward: Arc::new(FixedForward(a)),
        prior_cov: Arc::new(MaternCovModel { kernel, sigma: 1, length: 2 }),
        noise: Arc::new(ScaledIdentityNoise { dim: m, scale: Scale::Linear(0) }),
        n_psi: 3,
        prior_mean: DVector::zeros(n),
        data: b,
        hyperprior,
        bounds,
        x_true: Some(x),
        theta_true: Some(theta_true),
    })
}

fn make_superres(c: &SuperresConfig) -> Result<ProblemSpec> {
    check_noise_level(c.noise_level)?;
    let fwd = SuperresForward::new(c.size, c.factor, c.frames, c.affine)?;
    let p = fwd.n_params();
    let k = fwd.params_per_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(c.seed, 2));
    let mut default_truth = Vec::with_capacity(p);
    for _ in 0..c.frames {
        if c.affine {
            for _ in 0..4 {
                default_truth.push(0.05 * (2.0 * rng.random::<f64>() - 1.0));
            }
        }
        for _ in 0..2 {
            default_truth.push(c.shift_range * (2.0 * rng.random::<f64>() - 1.0));
        }
    }
    let truth = take_truth(&c.theta_true, default_truth, "superres")?;
    let x = phantom(c.size);
    let a = fwd.build(&truth)?;
    let (b, var) = synthesize(&*a, &x, c.noise_level, c.seed);
    let (mut lower, mut upper) = (Vec::with_capacity(p), Vec::with_capacity(p));
    for j in 0..p {
        let is_shift = j % k >= k - 2;
        let r = if is_shift { c.shift_range.max(0.1) * 1.5 } else { 0.2 };
        lower.push(-r);
        upper.push(r);
    }
    let bounds = bounds_or(&c.bounds, lower, upper)?;
    let n = c.size * c.size;
    let lambda2 = x.norm_squared() / n as f64;
    ProblemSpec::new(ProblemParts {
        name: "superres".into(),
        forward: Arc::new(fwd),
        prior_cov: Arc::new(ScaledIdentityCov { dim: n, scale: Scale::Fixed(lambda2) }),
        noise: Arc::new(ScaledIdentityNoise { dim: b.len(), scale: Scale::Fixed(var) }),
        n_psi: 0,
        prior_mean: DVector::zeros(n),
        data: b,
        hyperprior: HyperPrior::new(vec![PriorComponent::Gaussian { mean: 0.0, variance: 1.0 }; p])?,
        bounds,
        x_true: Some(x),
        theta_true: Some(truth),
    })
}

/// Helper for toy problems: fixed dense `A`, `R = θ₁ I`, fixed `Q`, flat
/// prior on `[lower, upper]`.
pub fn noise_only_problem(
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    data: DVector<f64>,
    lower: f64,
    upper: f64,
) -> Result<ProblemSpec> {
    let m = a.nrows();
    let n = a.ncols();
    ProblemSpec::new(ProblemParts {
        name: "noise-only".into(),
        forward: Arc::new(FixedForward(Arc::new(a))),
        prior_cov: Arc::new(super::components::FixedCov(Arc::new(q))),
        noise: Arc::new(ScaledIdentityNoise { dim: m, scale: Scale::Linear(0) }),
        n_psi: 1,
        prior_mean: DVector::zeros(n),
        data,
        hyperprior: HyperPrior::flat(1),
        bounds: ParamBox::new(vec![lower], vec![upper])?,
        x_true: None,
        theta_true: None,
    })
}
