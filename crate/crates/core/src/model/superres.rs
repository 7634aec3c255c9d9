//! Multi-frame super-resolution: `A(θ)` stacks a decimated reference frame
//! and `k` decimated, bilinearly warped frames.

use std::sync::Arc;

use nalgebra_sparse::{CooMatrix, CsrMatrix};

use super::problem::{Derivative, ForwardModel};
use crate::error::{Error, Result};
use crate::linalg::LinOp;

#[derive(Debug, Clone)]
pub struct SuperresForward {
    side: usize,
    factor: usize,
    frames: usize,
    affine: bool,
    decimate: CsrMatrix<f64>,
}

impl SuperresForward {
    pub fn new(side: usize, factor: usize, frames: usize, affine: bool) -> Result<Self> {
        if side == 0 || factor == 0 || side % factor != 0 {
            return Err(Error::invalid(format!(
                "image side {side} must be a positive multiple of the decimation factor {factor}"
            )));
        }
        Ok(Self { side, factor, frames, affine, decimate: decimation(side, factor) })
    }

    pub fn params_per_frame(&self) -> usize {
        if self.affine {
            6
        } else {
            2
        }
    }

    fn low_pixels(&self) -> usize {
        (self.side / self.factor).pow(2)
    }

    /// Source coordinate of output pixel `p` and its sensitivity to each
    /// frame parameter.
    fn warp(&self, params: &[f64], p: [f64; 2]) -> ([f64; 2], Vec<[f64; 2]>) {
        let c = 0.5 * (self.side as f64 - 1.0);
        let d = [p[0] - c, p[1] - c];
        if self.affine {
            let (a11, a12, a21, a22, tr, tc) = (params[0], params[1], params[2], params[3], params[4], params[5]);
            let q = [c + d[0] + a11 * d[0] + a12 * d[1] + tr, c + d[1] + a21 * d[0] + a22 * d[1] + tc];
            let sens = vec![[d[0], 0.0], [d[1], 0.0], [0.0, d[0]], [0.0, d[1]], [1.0, 0.0], [0.0, 1.0]];
            (q, sens)
        } else {
            ([p[0] + params[0], p[1] + params[1]], vec![[1.0, 0.0], [0.0, 1.0]])
        }
    }

    /// Bilinear warp matrix, or its derivative in parameter `deriv`.
    fn warp_matrix(&self, params: &[f64], deriv: Option<usize>) -> CsrMatrix<f64> {
        let s = self.side;
        let mut coo = CooMatrix::new(s * s, s * s);
        for i in 0..s {
            for j in 0..s {
                let (q, sens) = self.warp(params, [i as f64, j as f64]);
                let (r0, c0) = (q[0].floor(), q[1].floor());
                let (fr, fc) = (q[0] - r0, q[1] - c0);
                let corners = [(0, 0), (0, 1), (1, 0), (1, 1)];
                let weights: [f64; 4] = match deriv {
                    None => [(1.0 - fr) * (1.0 - fc), (1.0 - fr) * fc, fr * (1.0 - fc), fr * fc],
                    Some(k) => {
                        let [gr, gc] = sens[k];
                        let dr = [-(1.0 - fc), -fc, 1.0 - fc, fc];
                        let dc = [-(1.0 - fr), 1.0 - fr, -fr, fr];
                        [0, 1, 2, 3].map(|t| gr * dr[t] + gc * dc[t])
                    }
                };
                for ((di, dj), w) in corners.iter().zip(weights) {
                    if w == 0.0 {
                        continue;
                    }
                    let (rr, cc) = (r0 as isize + di, c0 as isize + dj);
                    if rr < 0 || cc < 0 || rr >= s as isize || cc >= s as isize {
                        continue;
                    }
                    coo.push(i * s + j, rr as usize * s + cc as usize, w);
                }
            }
        }
        CsrMatrix::from(&coo)
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.n_params() {
            return Err(Error::invalid(format!("super-resolution expects {} parameters, got {}", self.n_params(), y.len())));
        }
        Ok(())
    }

    /// Stack blocks (reference first) into one sparse matrix; `None` blocks
    /// are zero.
    fn stack(&self, blocks: &[Option<CsrMatrix<f64>>]) -> CsrMatrix<f64> {
        let ml = self.low_pixels();
        let mut coo = CooMatrix::new(ml * blocks.len(), self.side * self.side);
        for (b, block) in blocks.iter().enumerate() {
            if let Some(block) = block {
                for (i, row) in block.row_iter().enumerate() {
                    for (&j, &v) in row.col_indices().iter().zip(row.values()) {
                        coo.push(b * ml + i, j, v);
                    }
                }
            }
        }
        CsrMatrix::from(&coo)
    }
}

fn decimation(side: usize, factor: usize) -> CsrMatrix<f64> {
    let low = side / factor;
    let w = 1.0 / (factor * factor) as f64;
    let mut coo = CooMatrix::new(low * low, side * side);
    for bi in 0..low {
        for bj in 0..low {
            for di in 0..factor {
                for dj in 0..factor {
                    coo.push(bi * low + bj, (bi * factor + di) * side + bj * factor + dj, w);
                }
            }
        }
    }
    CsrMatrix::from(&coo)
}

impl ForwardModel for SuperresForward {
    fn nrows(&self) -> usize {
        self.low_pixels() * (self.frames + 1)
    }
    fn ncols(&self) -> usize {
        self.side * self.side
    }
    fn n_params(&self) -> usize {
        self.frames * self.params_per_frame()
    }
    fn build(&self, y: &[f64]) -> Result<Arc<dyn LinOp>> {
        self.check(y)?;
        let k = self.params_per_frame();
        let mut blocks = vec![Some(self.decimate.clone())];
        for f in 0..self.frames {
            let s = self.warp_matrix(&y[f * k..(f + 1) * k], None);
            blocks.push(Some(&self.decimate * &s));
        }
        Ok(Arc::new(self.stack(&blocks)))
    }
    fn derivative(&self, y: &[f64], j: usize) -> Result<Derivative<Arc<dyn LinOp>>> {
        self.check(y)?;
        if j >= self.n_params() {
            return Err(Error::invalid(format!("super-resolution derivative component {j} out of range")));
        }
        let k = self.params_per_frame();
        let (frame, local) = (j / k, j % k);
        let ds = self.warp_matrix(&y[frame * k..(frame + 1) * k], Some(local));
        let mut blocks: Vec<Option<CsrMatrix<f64>>> = vec![None; self.frames + 1];
        blocks[frame + 1] = Some(&self.decimate * &ds);
        Ok(Derivative::Op(Arc::new(self.stack(&blocks))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn zero_shift_frames_equal_reference() {
        for affine in [false, true] {
            let fwd = SuperresForward::new(8, 2, 3, affine).unwrap();
            let a = fwd.build(&vec![0.0; fwd.n_params()]).unwrap();
            let x = DVector::from_fn(64, |i, _| (i as f64 * 0.3).sin() + 1.0);
            let b = a.apply(&x);
            for f in 1..4 {
                assert_eq!(b.rows(f * 16, 16), b.rows(0, 16), "affine={affine} frame {f}");
            }
        }
    }

    #[test]
    fn integer_shift_moves_pixels() {
        let fwd = SuperresForward::new(4, 1, 1, false).unwrap();
        let a = fwd.build(&[0.0, 1.0]).unwrap();
        let x = DVector::from_fn(16, |i, _| i as f64);
        let b = a.apply(&x);
        // Frame pixel (0, 0) samples x at (0, 1).
        assert_eq!(b[16], 1.0);
        // Last column samples outside the image.
        assert_eq!(b[16 + 3], 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences_off_the_grid() {
        for affine in [false, true] {
            let fwd = SuperresForward::new(8, 2, 2, affine).unwrap();
            let y: Vec<f64> = (0..fwd.n_params()).map(|i| 0.013 + 0.021 * i as f64).collect();
            for j in 0..fwd.n_params() {
                let Derivative::Op(d) = fwd.derivative(&y, j).unwrap() else { panic!() };
                let d = d.to_dense().unwrap();
                let h = 1e-7;
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += h;
                ym[j] -= h;
                let fd = (fwd.build(&yp).unwrap().to_dense().unwrap() - fwd.build(&ym).unwrap().to_dense().unwrap()) / (2.0 * h);
                assert!((fd - d).amax() < 1e-6, "affine={affine} component {j}");
            }
        }
    }
}
