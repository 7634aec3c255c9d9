use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};

/// Hyperparameters θ = (ψ, y): distribution parameters ψ followed by model
/// parameters y.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    values: DVector<f64>,
    n_psi: usize,
}

impl HyperParams {
    pub fn new(psi: &[f64], y: &[f64]) -> Self {
        let values = DVector::from_iterator(psi.len() + y.len(), psi.iter().chain(y).copied());
        Self { values, n_psi: psi.len() }
    }

    pub fn from_vector(values: DVector<f64>, n_psi: usize) -> Result<Self> {
        if n_psi > values.len() {
            return Err(Error::invalid(format!(
                "{n_psi} distribution parameters requested but θ has length {}",
                values.len()
            )));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("θ component {j} is not finite")));
        }
        Ok(Self { values, n_psi })
    }

    pub fn psi(&self) -> &[f64] {
        &self.values.as_slice()[..self.n_psi]
    }

    pub fn y(&self) -> &[f64] {
        &self.values.as_slice()[self.n_psi..]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_psi(&self) -> usize {
        self.n_psi
    }

    /// Copy with component `j` replaced.
    pub fn with_component(&self, j: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.values[j] = value;
        out
    }

    /// Copy with the whole vector replaced; the ψ/y split is kept.
    pub fn with_values(&self, values: DVector<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::invalid("θ length changed"));
        }
        Self::from_vector(values, self.n_psi)
    }
}

/// Compact box Θ = Π [lower_j, upper_j].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid(format!(
                "box bounds need equal nonzero lengths, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() || l >= u {
                return Err(Error::invalid(format!("box component {j}: need finite lower < upper, got [{l}, {u}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(t, (l, u))| t >= l && t <= u)
    }

    pub fn project(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(theta.len(), |j, _| theta[j].clamp(self.lower[j], self.upper[j]))
    }

    pub fn center(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| 0.5 * (self.lower[j] + self.upper[j]))
    }

    /// Radius of the smallest enclosing ball (half the diagonal).
    pub fn radius(&self) -> f64 {
        0.5 * (0..self.dim()).map(|j| self.width(j).powi(2)).sum::<f64>().sqrt()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| self.lower[j] + rng.random::<f64>() * self.width(j))
    }

    pub fn check_dim(&self, p: usize) -> Result<()> {
        if p != self.dim() {
            return Err(Error::invalid(format!("box has dimension {}, θ has length {p}", self.dim())));
        }
        Ok(())
    }
}
