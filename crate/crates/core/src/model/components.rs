//! Reusable building blocks for [`ProblemSpec`](super::ProblemSpec).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::matern::MaternKernel;
use super::problem::{CovarianceModel, Derivative, ForwardModel, NoiseCov, NoiseModel};
use crate::error::{Error, Result};
use crate::linalg::LinOp;

/// How a scalar multiple of the identity depends on ψ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Fixed(f64),
    /// `ψ_k`.
    Linear(usize),
    /// `ψ_k²`.
    Square(usize),
}

impl Scale {
    fn value(self, psi: &[f64]) -> Result<f64> {
        match self {
            Scale::Fixed(c) => Ok(c),
            Scale::Linear(k) => psi.get(k).copied().ok_or_else(|| Error::invalid(format!("ψ has no component {k}"))),
            Scale::Square(k) => psi.get(k).map(|v| v * v).ok_or_else(|| Error::invalid(format!("ψ has no component {k}"))),
        }
    }

    fn derivative(self, psi: &[f64], j: usize) -> Option<f64> {
        match self {
            Scale::Linear(k) if k == j => Some(1.0),
            Scale::Square(k) if k == j => Some(2.0 * psi[k]),
            _ => None,
        }
    }
}

/// `c I` on `R^n`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledIdentity {
    pub dim: usize,
    pub c: f64,
}

impl LinOp for ScaledIdentity {
    fn nrows(&self) -> usize {
        self.dim
    }
    fn ncols(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        x * self.c
    }
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        y * self.c
    }
}

/// Prior covariance `c(ψ) I`.
#[derive(Debug, Clone)]
pub struct ScaledIdentityCov {
    pub dim: usize,
    pub scale: Scale,
}

impl CovarianceModel for ScaledIdentityCov {
    fn dim(&self) -> usize {
        self.dim
    }
    fn build(&self, psi: &[f64]) -> Result<Arc<dyn LinOp>> {
        let c = self.scale.value(psi)?;
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::invalid(format!("prior scale must be positive, got {c}")));
        }
        Ok(Arc::new(ScaledIdentity { dim: self.dim, c }))
    }
    fn derivative(&self, psi: &[f64], j: usize) -> Result<Derivative<Arc<dyn LinOp>>> {
        Ok(match self.scale.derivative(psi, j) {
            Some(c) => Derivative::Op(Arc::new(ScaledIdentity { dim: self.dim, c })),
            None => Derivative::Zero,
        })
    }
}

/// Fixed dense prior covariance.
#[derive(Debug, Clone)]
pub struct FixedCov(pub Arc<DMatrix<f64>>);

impl CovarianceModel for FixedCov {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn build(&self, _psi: &[f64]) -> Result<Arc<dyn LinOp>> {
        Ok(self.0.clone())
    }
    fn derivative(&self, _psi: &[f64], _j: usize) -> Result<Derivative<Arc<dyn LinOp>>> {
        Ok(Derivative::Zero)
    }
}

/// Noise covariance `c(ψ) I`.
#[derive(Debug, Clone)]
pub struct ScaledIdentityNoise {
    pub dim: usize,
    pub scale: Scale,
}

impl NoiseModel for ScaledIdentityNoise {
    fn dim(&self) -> usize {
        self.dim
    }
    fn build(&self, psi: &[f64]) -> Result<NoiseCov> {
        NoiseCov::scalar(self.dim, self.scale.value(psi)?)
    }
    fn derivative(&self, psi: &[f64], j: usize) -> Result<Derivative<DVector<f64>>> {
        Ok(match self.scale.derivative(psi, j) {
            Some(c) => Derivative::Op(DVector::from_element(self.dim, c)),
            None => Derivative::Zero,
        })
    }
}

/// Forward operator independent of θ.
#[derive(Clone)]
pub struct FixedForward(pub Arc<dyn LinOp>);

impl ForwardModel for FixedForward {
    fn nrows(&self) -> usize {
        self.0.nrows()
    }
    fn ncols(&self) -> usize {
        self.0.ncols()
    }
    fn n_params(&self) -> usize {
        0
    }
    fn build(&self, _y: &[f64]) -> Result<Arc<dyn LinOp>> {
        Ok(self.0.clone())
    }
    fn derivative(&self, _y: &[f64], _j: usize) -> Result<Derivative<Arc<dyn LinOp>>> {
        Ok(Derivative::Zero)
    }
}

/// Matérn prior with standard deviation `ψ[sigma]` and length scale
/// `ψ[length]`.
#[derive(Debug, Clone)]
pub struct MaternCovModel {
    pub kernel: MaternKernel,
    pub sigma: usize,
    pub length: usize,
}

impl MaternCovModel {
    fn params(&self, psi: &[f64]) -> Result<(f64, f64)> {
        match (psi.get(self.sigma), psi.get(self.length)) {
            (Some(&s), Some(&l)) => Ok((s, l)),
            _ => Err(Error::invalid("Matérn parameters missing from ψ")),
        }
    }
}

impl CovarianceModel for MaternCovModel {
    fn dim(&self) -> usize {
        self.kernel.dim()
    }
    fn build(&self, psi: &[f64]) -> Result<Arc<dyn LinOp>> {
        let (s, l) = self.params(psi)?;
        Ok(Arc::new(self.kernel.matrix(s, l)?))
    }
    fn derivative(&self, psi: &[f64], j: usize) -> Result<Derivative<Arc<dyn LinOp>>> {
        let (s, l) = self.params(psi)?;
        Ok(if j == self.sigma {
            Derivative::Op(Arc::new(self.kernel.d_sigma(s, l)?))
        } else if j == self.length {
            Derivative::Op(Arc::new(self.kernel.d_length(s, l)?))
        } else {
            Derivative::Zero
        })
    }
}
