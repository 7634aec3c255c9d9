//! Straight-ray travel-time tomography on the unit square.

use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};

/// Sources on the left edge; receivers spread along the top edge and then
/// down the right edge.
pub fn ray_geometry(n_src: usize, n_rec: usize) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let sources = (0..n_src).map(|k| [0.0, (k as f64 + 0.5) / n_src as f64]).collect();
    let receivers = (0..n_rec)
        .map(|k| {
            let u = 2.0 * (k as f64 + 0.5) / n_rec as f64;
            if u <= 1.0 {
                [u, 1.0]
            } else {
                [1.0, 2.0 - u]
            }
        })
        .collect();
    (sources, receivers)
}

/// Cell centers in the same row-major order as the ray matrix columns
/// (cell `(r, c)` covers `x ∈ [c/s, (c+1)/s]`, `y ∈ [r/s, (r+1)/s]`).
pub fn cell_centers(side: usize) -> Vec<[f64; 2]> {
    let s = side as f64;
    (0..side * side).map(|k| [((k % side) as f64 + 0.5) / s, ((k / side) as f64 + 0.5) / s]).collect()
}

/// Intersection lengths of the segment `p0 → p1` with each grid cell.
fn ray_row(side: usize, p0: [f64; 2], p1: [f64; 2]) -> Vec<(usize, f64)> {
    let s = side as f64;
    let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
    let len = (dx * dx + dy * dy).sqrt();
    let mut ts = vec![0.0, 1.0];
    for k in 0..=side {
        let line = k as f64 / s;
        if dx != 0.0 {
            let t = (line - p0[0]) / dx;
            if t > 0.0 && t < 1.0 {
                ts.push(t);
            }
        }
        if dy != 0.0 {
            let t = (line - p0[1]) / dy;
            if t > 0.0 && t < 1.0 {
                ts.push(t);
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).expect("finite crossing parameters"));
    ts.dedup();
    let mut out: Vec<(usize, f64)> = Vec::new();
    for w in ts.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        if tb - ta <= 1e-14 {
            continue;
        }
        let tm = 0.5 * (ta + tb);
        let (x, y) = (p0[0] + tm * dx, p0[1] + tm * dy);
        let c = ((x * s).floor() as isize).clamp(0, side as isize - 1) as usize;
        let r = ((y * s).floor() as isize).clamp(0, side as isize - 1) as usize;
        let idx = r * side + c;
        let seg = (tb - ta) * len;
        match out.iter_mut().find(|(i, _)| *i == idx) {
            Some(entry) => entry.1 += seg,
            None => out.push((idx, seg)),
        }
    }
    out
}

/// Sparse ray-sum matrix with one row per (source, receiver) pair.
pub fn ray_matrix(side: usize, n_src: usize, n_rec: usize) -> Result<CsrMatrix<f64>> {
    if side == 0 || n_src == 0 || n_rec == 0 {
        return Err(Error::invalid("tomography needs positive grid size, source and receiver counts"));
    }
    let (sources, receivers) = ray_geometry(n_src, n_rec);
    let mut coo = CooMatrix::new(n_src * n_rec, side * side);
    for (si, src) in sources.iter().enumerate() {
        for (ri, rec) in receivers.iter().enumerate() {
            for (col, val) in ray_row(side, *src, *rec) {
                coo.push(si * n_rec + ri, col, val);
            }
        }
    }
    Ok(CsrMatrix::from(&coo))
}
