//! Blind deblurring: 2-D convolution with a Gaussian PSF whose precision is
//! `LᵀL`, `L = [[l1, l2], [0, l3]]`.

use std::sync::Arc;

use nalgebra::DVector;

use super::problem::{Derivative, ForwardModel};
use crate::error::{Error, Result};
use crate::linalg::LinOp;

/// Zero-boundary 2-D correlation `out(p) = Σ_d k(d) x(p + d)` on an
/// `side × side` image stored row-major.
#[derive(Debug, Clone)]
pub struct Conv2d {
    side: usize,
    half: usize,
    kernel: Vec<f64>,
}

impl Conv2d {
    pub fn new(side: usize, half: usize, kernel: Vec<f64>) -> Result<Self> {
        let w = 2 * half + 1;
        if kernel.len() != w * w {
            return Err(Error::invalid(format!("kernel has {} taps, expected {}", kernel.len(), w * w)));
        }
        Ok(Self { side, half, kernel })
    }

    fn accumulate(&self, x: &DVector<f64>, sign: isize) -> DVector<f64> {
        let s = self.side as isize;
        let h = self.half as isize;
        let w = 2 * h + 1;
        let mut out = DVector::zeros(x.len());
        for i in 0..s {
            for j in 0..s {
                let mut acc = 0.0;
                for di in -h..=h {
                    let ii = i + sign * di;
                    if ii < 0 || ii >= s {
                        continue;
                    }
                    for dj in -h..=h {
                        let jj = j + sign * dj;
                        if jj < 0 || jj >= s {
                            continue;
                        }
                        acc += self.kernel[((di + h) * w + dj + h) as usize] * x[(ii * s + jj) as usize];
                    }
                }
                out[(i * s + j) as usize] = acc;
            }
        }
        out
    }
}

impl LinOp for Conv2d {
    fn nrows(&self) -> usize {
        self.side * self.side
    }
    fn ncols(&self) -> usize {
        self.side * self.side
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self.accumulate(x, 1)
    }
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        self.accumulate(y, -1)
    }
}

/// `A(y)` for `y = (l1, l2, l3)`. The PSF is left unnormalized.
#[derive(Debug, Clone)]
pub struct DeblurForward {
    pub side: usize,
    pub half: usize,
}

impl DeblurForward {
    fn taps(&self, y: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> Result<Vec<f64>> {
        if y.len() != 3 {
            return Err(Error::invalid(format!("deblur PSF takes 3 parameters, got {}", y.len())));
        }
        let h = self.half as isize;
        let mut out = Vec::with_capacity(((2 * h + 1) * (2 * h + 1)) as usize);
        for di in -h..=h {
            for dj in -h..=h {
                out.push(f(di as f64, dj as f64, 0.0));
            }
        }
        Ok(out)
    }

    pub fn psf(&self, y: &[f64]) -> Result<Vec<f64>> {
        let (l1, l2, l3) = (y[0], y[1], y[2]);
        self.taps(y, |di, dj, _| {
            let a = l1 * di + l2 * dj;
            (-0.5 * (a * a + l3 * l3 * dj * dj)).exp()
        })
    }
}

impl ForwardModel for DeblurForward {
    fn nrows(&self) -> usize {
        self.side * self.side
    }
    fn ncols(&self) -> usize {
        self.side * self.side
    }
    fn n_params(&self) -> usize {
        3
    }
    fn build(&self, y: &[f64]) -> Result<Arc<dyn LinOp>> {
        Ok(Arc::new(Conv2d::new(self.side, self.half, self.psf(y)?)?))
    }
    fn derivative(&self, y: &[f64], j: usize) -> Result<Derivative<Arc<dyn LinOp>>> {
        if y.len() != 3 || j >= 3 {
            return Err(Error::invalid(format!("deblur derivative component {j} out of range")));
        }
        let (l1, l2, l3) = (y[0], y[1], y[2]);
        let taps = self.taps(y, |di, dj, _| {
            let a = l1 * di + l2 * dj;
            let p = (-0.5 * (a * a + l3 * l3 * dj * dj)).exp();
            match j {
                0 => -p * a * di,
                1 => -p * a * dj,
                _ => -p * l3 * dj * dj,
            }
        })?;
        Ok(Derivative::Op(Arc::new(Conv2d::new(self.side, self.half, taps)?)))
    }
}
