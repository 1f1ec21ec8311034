//! Exact maximization of y·x − ½x·Gx over { x ≥ 0, Σx ≤ cap } in a few
//! dimensions, by enumerating active sets.
//!
//! For positive definite G every face has at most one stationary point, and
//! the global maximizer is the stationary point of the face containing it in
//! its relative interior. Taking the best feasible stationary point over all
//! faces therefore gives the exact maximum.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

struct Face {
    idx: Vec<usize>,
    inv: Vec<f64>,
    /// 1ᵀG_S⁻¹1, for the faces where Σx = cap.
    ones_inv_ones: f64,
    row_sums: Vec<f64>,
}

pub struct SmallQp {
    dim: usize,
    g: Vec<f64>,
    cap: f64,
    faces: Vec<Face>,
}

pub const MAX_DIM: usize = 6;

impl SmallQp {
    pub fn new(g: &DMatrix<f64>, cap: f64) -> Result<Self> {
        let d = g.nrows();
        if d > MAX_DIM {
            return Err(Error::Unsupported(format!("exact QP limited to dimension {MAX_DIM} (got {d})")));
        }
        let ev = g.clone().symmetric_eigen().eigenvalues;
        let min_ev = ev.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_ev <= 0.0 {
            return Err(Error::NotPsd(min_ev));
        }
        let mut faces = Vec::new();
        for mask in 1u32..(1 << d) {
            let idx: Vec<usize> = (0..d).filter(|i| mask >> i & 1 == 1).collect();
            let m = idx.len();
            let sub = DMatrix::from_fn(m, m, |a, b| g[(idx[a], idx[b])]);
            let Some(inv) = sub.try_inverse() else { continue };
            let row_sums: Vec<f64> = (0..m).map(|a| (0..m).map(|b| inv[(a, b)]).sum()).collect();
            let ones_inv_ones = row_sums.iter().sum();
            faces.push(Face { idx, inv: inv.iter().copied().collect(), ones_inv_ones, row_sums });
        }
        Ok(Self { dim: d, g: g.iter().copied().collect(), cap, faces })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn objective(&self, y: &[f64], x: &[f64]) -> f64 {
        let d = self.dim;
        let mut v = 0.0;
        for i in 0..d {
            if x[i] == 0.0 {
                continue;
            }
            let mut gx = 0.0;
            for j in 0..d {
                // column-major storage; G is symmetric
                gx += self.g[i + j * d] * x[j];
            }
            v += x[i] * (y[i] - 0.5 * gx);
        }
        v
    }

    /// Maximum value and a maximizer.
    pub fn solve(&self, y: &[f64]) -> (f64, [f64; MAX_DIM]) {
        let d = self.dim;
        let mut best = 0.0;
        let mut arg = [0.0; MAX_DIM];
        let mut x = [0.0; MAX_DIM];
        let tol = 1e-12 * (1.0 + self.cap);
        for face in &self.faces {
            let m = face.idx.len();
            // x_S = G_S⁻¹ y_S, column-major inverse
            let mut free = [0.0; MAX_DIM];
            for a in 0..m {
                free[a] = (0..m).map(|b| face.inv[a + b * m] * y[face.idx[b]]).sum();
            }
            let total: f64 = free[..m].iter().sum();
            let mut try_point = |xs: &[f64]| {
                if xs[..m].iter().any(|v| *v < -tol) {
                    return;
                }
                x[..d].fill(0.0);
                for a in 0..m {
                    x[face.idx[a]] = xs[a].max(0.0);
                }
                if x[..d].iter().sum::<f64>() > self.cap + tol {
                    return;
                }
                let v = self.objective(y, &x);
                if v > best {
                    best = v;
                    arg = x;
                }
            };
            if total <= self.cap {
                try_point(&free);
            } else {
                // Σx = cap with multiplier λ = (Σ free − cap)/(1ᵀG⁻¹1) ≥ 0
                let lambda = (total - self.cap) / face.ones_inv_ones;
                let mut on = [0.0; MAX_DIM];
                for a in 0..m {
                    on[a] = free[a] - lambda * face.row_sums[a];
                }
                try_point(&on);
            }
        }
        (best, arg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(g: &DMatrix<f64>, y: &[f64], cap: f64) -> f64 {
        let n = 400;
        let mut best = 0.0f64;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let x = [cap * i as f64 / n as f64, cap * j as f64 / n as f64];
                let gx0 = g[(0, 0)] * x[0] + g[(0, 1)] * x[1];
                let gx1 = g[(1, 0)] * x[0] + g[(1, 1)] * x[1];
                best = best.max(y[0] * x[0] + y[1] * x[1] - 0.5 * (x[0] * gx0 + x[1] * gx1));
            }
        }
        best
    }

    #[test]
    fn matches_grid_search_in_two_dimensions() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        for y in [[1.0, 1.0], [-1.0, 0.5], [3.0, -2.0], [5.0, 5.0], [-1.0, -1.0]] {
            let qp = SmallQp::new(&g, 2.0).unwrap();
            let (v, _) = qp.solve(&y);
            let b = brute(&g, &y, 2.0);
            assert!(v >= b - 1e-12 && v - b < 1e-3, "y = {y:?}: {v} vs {b}");
        }
    }

    #[test]
    fn rejects_indefinite() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(SmallQp::new(&g, 1.0), Err(Error::NotPsd(_))));
    }
}
