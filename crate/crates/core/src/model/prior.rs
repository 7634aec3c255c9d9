use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::params::ParamBox;
use crate::error::{Error, Result};

/// One factor of the hyperprior. Additive constants are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorComponent {
    /// Gamma with shape 1: contributes `rate·θ`.
    Gamma { rate: f64 },
    /// Contributes `(θ − mean)² / (2 variance)`.
    Gaussian { mean: f64, variance: f64 },
    /// Flat on the box.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperPrior {
    components: Vec<PriorComponent>,
}

impl HyperPrior {
    pub fn new(components: Vec<PriorComponent>) -> Result<Self> {
        for (j, c) in components.iter().enumerate() {
            match *c {
                PriorComponent::Gamma { rate } if !(rate >= 0.0) || !rate.is_finite() => {
                    return Err(Error::invalid(format!("prior component {j}: gamma rate must be >= 0, got {rate}")));
                }
                PriorComponent::Gaussian { mean, variance } if !(variance > 0.0) || !mean.is_finite() || !variance.is_finite() => {
                    return Err(Error::invalid(format!("prior component {j}: gaussian needs finite mean and variance > 0")));
                }
                _ => {}
            }
        }
        Ok(Self { components })
    }

    pub fn flat(p: usize) -> Self {
        Self { components: vec![PriorComponent::Uniform; p] }
    }

    pub fn components(&self) -> &[PriorComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Negative log density and its gradient. Points outside the support
    /// (negative for gamma, outside the box for uniform) are rejected.
    pub fn eval(&self, theta: &[f64], bounds: &ParamBox) -> Result<(f64, DVector<f64>)> {
        if theta.len() != self.components.len() {
            return Err(Error::invalid(format!(
                "hyperprior has {} components, θ has {}",
                self.components.len(),
                theta.len()
            )));
        }
        let mut value = 0.0;
        let mut grad = DVector::zeros(theta.len());
        for (j, (c, &t)) in self.components.iter().zip(theta).enumerate() {
            match *c {
                PriorComponent::Gamma { rate } => {
                    if t < 0.0 {
                        return Err(Error::invalid(format!("θ component {j} = {t} outside gamma support")));
                    }
                    value += rate * t;
                    grad[j] = rate;
                }
                PriorComponent::Gaussian { mean, variance } => {
                    value += (t - mean).powi(2) / (2.0 * variance);
                    grad[j] = (t - mean) / variance;
                }
                PriorComponent::Uniform => {
                    if t < bounds.lower()[j] || t > bounds.upper()[j] {
                        return Err(Error::invalid(format!("θ component {j} = {t} outside uniform support")));
                    }
                }
            }
        }
        Ok((value, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_box(p: usize) -> ParamBox {
        ParamBox::new(vec![0.0; p], vec![10.0; p]).unwrap()
    }

    #[test]
    fn gamma_rate_times_theta() {
        let prior = HyperPrior::new(vec![PriorComponent::Gamma { rate: 1e-4 }]).unwrap();
        let (v, g) = prior.eval(&[3.0], &unit_box(1)).unwrap();
        assert_relative_eq!(v, 3e-4, max_relative = 1e-15);
        assert_eq!(g[0], 1e-4);
        assert!(prior.eval(&[-0.1], &unit_box(1)).is_err());
    }

    #[test]
    fn gaussian_at_mean_is_zero() {
        let prior = HyperPrior::new(vec![PriorComponent::Gaussian { mean: 0.0, variance: 1.0 }]).unwrap();
        let b = ParamBox::new(vec![-1.0], vec![1.0]).unwrap();
        let (v, g) = prior.eval(&[0.0], &b).unwrap();
        assert_eq!((v, g[0]), (0.0, 0.0));
    }

    #[test]
    fn uniform_outside_box_is_rejected() {
        let prior = HyperPrior::flat(1);
        assert_eq!(prior.eval(&[5.0], &unit_box(1)).unwrap().0, 0.0);
        assert!(matches!(prior.eval(&[11.0], &unit_box(1)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn invalid_parameters() {
        assert!(HyperPrior::new(vec![PriorComponent::Gamma { rate: -1.0 }]).is_err());
        assert!(HyperPrior::new(vec![PriorComponent::Gaussian { mean: 0.0, variance: 0.0 }]).is_err());
    }

    #[test]
    fn component_tags_parse() {
        let c: Vec<PriorComponent> = serde_json::from_str(
            r#"[{"family":"gamma","rate":0.0001},{"family":"gaussian","mean":1,"variance":2},{"family":"uniform"}]"#,
        )
        .unwrap();
        assert_eq!(c[2], PriorComponent::Uniform);
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            t in proptest::collection::vec(0.5f64..9.5, 3),
            rate in 0.0f64..2.0, mean in -3.0f64..3.0, var in 0.1f64..5.0,
        ) {
            let prior = HyperPrior::new(vec![
                PriorComponent::Gamma { rate },
                PriorComponent::Gaussian { mean, variance: var },
                PriorComponent::Uniform,
            ]).unwrap();
            let b = unit_box(3);
            let (_, g) = prior.eval(&t, &b).unwrap();
            for j in 0..3 {
                let h = 1e-5;
                let mut tp = t.clone();
                let mut tm = t.clone();
                tp[j] += h;
                tm[j] -= h;
                let fd = (prior.eval(&tp, &b).unwrap().0 - prior.eval(&tm, &b).unwrap().0) / (2.0 * h);
                prop_assert!((fd - g[j]).abs() <= 1e-8 * g[j].abs().max(1.0), "{} vs {}", fd, g[j]);
            }
        }
    }
}
