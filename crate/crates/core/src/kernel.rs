//! Model parameters, the kernel g, cone functions, projected kernel matrices
//! and the monotone extension of the projected nonlinearity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{AtomicMeasure, DyadicGrid};

/// Sparse SBM parameters: edge probability (c + Δσ_iσ_j)/N, prior P{σ = +1} = p.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Number of sites; 0 is allowed for limit-only computations.
    pub n: usize,
    pub c: f64,
    pub delta: f64,
    pub p: f64,
}

impl ModelParams {
    pub fn new(n: usize, c: f64, delta: f64, p: f64) -> Result<Self> {
        let params = Self { n, c, delta, p };
        params.validate()?;
        Ok(params)
    }

    /// Limit-only parameters (N = 0).
    pub fn limit(c: f64, delta: f64, p: f64) -> Result<Self> {
        Self::new(0, c, delta, p)
    }

    pub fn with_n(&self, n: usize) -> Self {
        Self { n, ..*self }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.c.is_finite() && self.c > 0.0) {
            v.push(format!("c must be positive (got {})", self.c));
        }
        if !(self.delta.is_finite() && self.delta.abs() < self.c) {
            v.push(format!("|delta| must be < c (got delta = {}, c = {})", self.delta, self.c));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            v.push(format!("p must lie in (0, 1) (got {})", self.p));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(v.join("; ")))
        }
    }

    /// m̄ = 2p − 1.
    pub fn m_bar(&self) -> f64 {
        2.0 * self.p - 1.0
    }

    pub fn is_disassortative(&self) -> bool {
        self.delta <= 0.0
    }
}

/// g(z) = (c + Δz)(log(c + Δz) − 1).
pub fn g(z: f64, params: &ModelParams) -> f64 {
    let a = params.c + params.delta * z;
    a * (a.ln() - 1.0)
}

/// g'(z) = Δ log(c + Δz).
pub fn g_prime(z: f64, params: &ModelParams) -> f64 {
    params.delta * (params.c + params.delta * z).ln()
}

/// h(z) = (c + Δz) log(c + Δz).
pub fn h(z: f64, params: &ModelParams) -> f64 {
    let a = params.c + params.delta * z;
    a * a.ln()
}

/// min of g over [-1, 1]; g is convex with its minimum where c + Δz = 1.
pub fn g_min(params: &ModelParams) -> f64 {
    let mut m = g(-1.0, params).min(g(1.0, params));
    if params.delta != 0.0 {
        let z = (1.0 - params.c) / params.delta;
        if (-1.0..=1.0).contains(&z) {
            m = m.min(g(z, params));
        }
    }
    m
}

pub fn g_sup_norm(params: &ModelParams) -> f64 {
    g(-1.0, params).abs().max(g(1.0, params).abs()).max(g_min(params).abs())
}

pub fn g_prime_sup_norm(params: &ModelParams) -> f64 {
    g_prime(-1.0, params).abs().max(g_prime(1.0, params).abs())
}

/// G_μ(x) = ∫ g(xy) dμ(y).
pub fn cone_function(mu: &AtomicMeasure, x: f64, params: &ModelParams) -> f64 {
    mu.atoms.iter().map(|&(y, w)| w * g(x * y, params)).sum()
}

/// C∞(G_μ) = ½ ∫ G_μ dμ.
pub fn c_infinity(mu: &AtomicMeasure, params: &ModelParams) -> f64 {
    0.5 * mu.atoms.iter().map(|&(x, w)| w * cone_function(mu, x, params)).sum::<f64>()
}

/// b = 2c|log c| + c + 1.
pub fn choose_b(params: &ModelParams) -> f64 {
    2.0 * params.c * params.c.ln().abs() + params.c + 1.0
}

/// G̃_b^{(K)} = (g(kk') + b)/|D_K|²; b = 0 gives G^{(K)}.
#[derive(Clone, Debug)]
pub struct ShiftedKernel {
    pub params: ModelParams,
    pub b: f64,
    pub k: u32,
    pub matrix: DMatrix<f64>,
}

pub fn shifted_matrix(k: u32, b: f64, params: &ModelParams) -> ShiftedKernel {
    let grid = DyadicGrid::new(k);
    let pts = grid.points();
    let d = grid.len();
    let scale = 1.0 / (d * d) as f64;
    let matrix = DMatrix::from_fn(d, d, |i, j| (g(pts[i] * pts[j], params) + b) * scale);
    ShiftedKernel { params: *params, b, k, matrix }
}

impl ShiftedKernel {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues().last().unwrap()
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x)).iter().copied().collect()
    }

    pub fn quad(&self, x: &[f64]) -> f64 {
        let gx = self.apply(x);
        x.iter().zip(&gx).map(|(a, b)| a * b).sum()
    }

    /// min over [-1, 1] of g̃_b = g + b.
    pub fn min_shifted_g(&self) -> f64 {
        g_min(&self.params) + self.b
    }
}

/// H̃(y) = sup_{x ≥ 0, ‖x‖₁ ≤ R'} (y·x − ½ x·G̃x), R' = R|D_K|²/min g̃_b.
#[derive(Clone, Debug)]
pub struct ExtendedNonlinearity {
    kernel: ShiftedKernel,
    /// Radius R' in the normalized ℓ¹ norm.
    pub r_prime: f64,
    /// Cap on Σ_k x_k, i.e. |D_K|·R'.
    cap: f64,
    step: f64,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub value: f64,
    pub argmax: Vec<f64>,
    pub gap: f64,
    pub iterations: usize,
}

impl ExtendedNonlinearity {
    pub fn new(kernel: &ShiftedKernel, r: f64) -> Result<Self> {
        if !(r > 0.0) {
            return Err(Error::InvalidParams(format!("R must be positive (got {r})")));
        }
        let ev = kernel.eigenvalues();
        if ev[0] < -1e-10 {
            return Err(Error::NotPsd(ev[0]));
        }
        let m = kernel.min_shifted_g();
        if !(m > 0.0) {
            return Err(Error::InvalidParams(format!("min g̃_b = {m} must be positive; increase b")));
        }
        let d = kernel.dim() as f64;
        let r_prime = r * d * d / m;
        let lmax = ev.last().copied().unwrap_or(0.0).max(1e-12);
        Ok(Self { kernel: kernel.clone(), r_prime, cap: d * r_prime, step: 1.0 / lmax, tol: 1e-9, max_iter: 50_000 })
    }

    pub fn kernel(&self) -> &ShiftedKernel {
        &self.kernel
    }

    /// Lipschitz constant in the dual norm: ∇H̃ = argmax and ‖argmax‖₁ ≤ R'.
    pub fn lipschitz_dual(&self) -> f64 {
        self.r_prime
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        self.solve(y, None).value
    }

    fn objective(&self, y: &[f64], x: &[f64], gx: &[f64]) -> f64 {
        y.iter().zip(x).zip(gx).map(|((yi, xi), gi)| yi * xi - 0.5 * xi * gi).sum()
    }

    fn project(&self, v: &mut [f64]) {
        for a in v.iter_mut() {
            if *a < 0.0 {
                *a = 0.0;
            }
        }
        let s: f64 = v.iter().sum();
        if s > self.cap {
            project_scaled_simplex(v, self.cap);
        }
    }

    /// Accelerated projected gradient with function-value restarts; stops on a
    /// Frank-Wolfe duality gap below `tol`.
    pub fn solve(&self, y: &[f64], warm: Option<&[f64]>) -> QpSolution {
        let n = self.kernel.dim();
        assert_eq!(y.len(), n, "gradient vector has wrong dimension");
        let mut x = match warm {
            Some(w) => w.to_vec(),
            None => vec![0.0; n],
        };
        self.project(&mut x);
        let mut z = x.clone();
        let mut theta = 1.0f64;
        let mut gx = self.kernel.apply(&x);
        let mut fx = self.objective(y, &x, &gx);
        let mut gap = f64::INFINITY;
        let mut it = 0;
        while it < self.max_iter {
            it += 1;
            let gz = self.kernel.apply(&z);
            let mut xn: Vec<f64> = (0..n).map(|i| z[i] + self.step * (y[i] - gz[i])).collect();
            self.project(&mut xn);
            let gxn = self.kernel.apply(&xn);
            let fxn = self.objective(y, &xn, &gxn);
            if fxn < fx {
                if theta > 1.0 {
                    // restart momentum from the current iterate
                    theta = 1.0;
                    z = x.clone();
                    continue;
                }
                // a plain gradient step cannot decrease the objective; this is rounding
                gap = self.fw_gap(y, &x, &gx);
                break;
            }
            let theta_n = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let beta = (theta - 1.0) / theta_n;
            z = (0..n).map(|i| xn[i] + beta * (xn[i] - x[i])).collect();
            theta = theta_n;
            x = xn;
            gx = gxn;
            fx = fxn;
            gap = self.fw_gap(y, &x, &gx);
            if gap <= self.tol {
                break;
            }
        }
        QpSolution { value: fx, argmax: x, gap, iterations: it }
    }

    fn fw_gap(&self, y: &[f64], x: &[f64], gx: &[f64]) -> f64 {
        let grad: Vec<f64> = y.iter().zip(gx).map(|(a, b)| a - b).collect();
        let best = grad.iter().cloned().fold(0.0f64, f64::max) * self.cap;
        let cur: f64 = grad.iter().zip(x).map(|(g, xi)| g * xi).sum();
        (best - cur).max(0.0)
    }
}

/// Euclidean projection onto { v ≥ 0, Σ v = cap }.
pub fn project_scaled_simplex(v: &mut [f64], cap: f64) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - cap) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    for a in v.iter_mut() {
        *a = (*a - theta).max(0.0);
    }
}

/// H̃(y) for the given kernel and radius R.
pub fn extended_nonlinearity(y: &[f64], kernel: &ShiftedKernel, r: f64) -> Result<f64> {
    Ok(ExtendedNonlinearity::new(kernel, r)?.value(y))
}

/// Bound on the Lipschitz seminorm (TV) of ψ: 2c(2 + |log 2c| + |log(c − |Δ|)|).
pub fn density_bound(params: &ModelParams) -> f64 {
    let c = params.c;
    2.0 * c * (2.0 + (2.0 * c).ln().abs() + (c - params.delta.abs()).ln().abs())
}

/// Bound on the x-derivative of the Gateaux density: c(1 + |log 2c| + |log(c − |Δ|)|).
pub fn density_derivative_bound(params: &ModelParams) -> f64 {
    let c = params.c;
    c * (1.0 + (2.0 * c).ln().abs() + (c - params.delta.abs()).ln().abs())
}

/// Smallest admissible R for the shifted problem:
/// ‖ψ̃_b‖_{Lip,TV} + ‖g̃_b‖_∞ + ‖g̃_b'‖_∞ + 1, with the Lipschitz seminorm bounded by density_bound + b.
pub fn r_threshold(params: &ModelParams, b: f64) -> f64 {
    let gsup = (g_min(params) + b).abs().max((g(-1.0, params) + b).abs()).max((g(1.0, params) + b).abs());
    density_bound(params) + b + gsup + g_prime_sup_norm(params) + 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(c: f64, d: f64) -> ModelParams {
        ModelParams::limit(c, d, 0.5).unwrap()
    }

    #[test]
    fn g_examples() {
        let q = p(3.0, -1.0);
        assert!((g(0.0, &q) - 3.0 * (3f64.ln() - 1.0)).abs() < 1e-15);
        assert!((g(0.0, &q) - 0.29584).abs() < 1e-5);
        assert!((g(1.0, &q) - (-0.61371)).abs() < 1e-5);
    }

    #[test]
    fn cone_and_c_infinity_examples() {
        let q = p(3.0, -1.0);
        assert_eq!(cone_function(&AtomicMeasure::zero(), 0.4, &q), 0.0);
        assert!((cone_function(&AtomicMeasure::dirac(1.0, 1.0), 0.4, &q) - g(0.4, &q)).abs() < 1e-15);
        let sym = AtomicMeasure::new(vec![(-1.0, 0.5), (1.0, 0.5)]).unwrap();
        let x = 0.37;
        assert!((cone_function(&sym, x, &q) - 0.5 * (g(-x, &q) + g(x, &q))).abs() < 1e-15);
        assert_eq!(c_infinity(&AtomicMeasure::zero(), &q), 0.0);
        assert!((c_infinity(&AtomicMeasure::dirac(1.0, 1.0), &q) - (-0.30686)).abs() < 1e-5);
    }

    #[test]
    fn shifted_matrix_k0_entries() {
        let q = p(3.0, -1.0);
        let b = 2.5;
        let k = shifted_matrix(0, b, &q);
        let m = &k.matrix;
        assert!((m[(0, 0)] - (g(1.0, &q) + b) / 4.0).abs() < 1e-15);
        for (i, j) in [(0, 1), (1, 0), (1, 1)] {
            assert!((m[(i, j)] - (g(0.0, &q) + b) / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn psd_for_disassortative_choice_of_b_when_c_at_most_one() {
        for (c, d) in [(0.5, -0.4), (0.8, -0.5), (1.0, -0.9)] {
            let q = p(c, d);
            for k in 0..=4 {
                let ker = shifted_matrix(k, choose_b(&q), &q);
                assert!(ker.min_eigenvalue() >= -1e-10, "c={c} delta={d} K={k}");
            }
        }
    }

    #[test]
    fn disassortative_kernel_with_c_above_one_is_indefinite() {
        // Witness: the signed measure δ_1 − δ_0 gives g(1) − g(0) < 0 whatever b is.
        let q = p(3.0, -1.0);
        let b = choose_b(&q);
        assert!(g(1.0, &q) - g(0.0, &q) < 0.0);
        let ker = shifted_matrix(0, b, &q);
        let (a, o) = ((g(1.0, &q) + b) / 4.0, (g(0.0, &q) + b) / 4.0);
        let (tr, det) = (a + o, a * o - o * o);
        let lo = 0.5 * (tr - (tr * tr - 4.0 * det).sqrt());
        assert!(lo < 0.0);
        assert!((ker.min_eigenvalue() - lo).abs() < 1e-12);
        assert!(matches!(ExtendedNonlinearity::new(&ker, 10.0), Err(Error::NotPsd(_))));
    }

    #[test]
    fn assortative_unshifted_kernel_is_indefinite() {
        let q = p(3.0, 2.0);
        let ker = shifted_matrix(2, 0.0, &q);
        assert!(ker.min_eigenvalue() < -1e-10);
        assert!(ExtendedNonlinearity::new(&ker, 10.0).is_err());
    }

    #[test]
    fn extension_at_zero_and_monotone() {
        let q = p(0.8, -0.5);
        let ker = shifted_matrix(1, choose_b(&q), &q);
        let ext = ExtendedNonlinearity::new(&ker, 30.0).unwrap();
        assert!(ext.value(&[0.0; 4]).abs() < 1e-12);
        let y = [0.3, -0.2, 0.5, 0.1];
        let y2 = [0.35, -0.2, 0.6, 0.1];
        assert!(ext.value(&y) <= ext.value(&y2) + 1e-9);
    }

    #[test]
    fn choose_b_makes_shift_positive() {
        for (c, d) in [(0.5, -0.4), (3.0, -2.9), (10.0, 9.0), (1.0, 0.0)] {
            let q = p(c, d);
            assert!(g_min(&q) + choose_b(&q) > 0.0);
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::measures::{norm_l1_dual, project_to_dyadic};
    use proptest::prelude::*;

    fn params() -> impl Strategy<Value = ModelParams> {
        (0.1f64..5.0, -0.99f64..0.99, 0.05f64..0.95).prop_map(|(c, r, p)| ModelParams::limit(c, r * c, p).unwrap())
    }

    proptest! {
        #[test]
        fn g_is_convex(p in params(), z in -0.99f64..0.99) {
            let e = 1e-3;
            let second = (g(z + e, &p) - 2.0 * g(z, &p) + g(z - e, &p)) / (e * e);
            let exact = p.delta * p.delta / (p.c + p.delta * z);
            prop_assert!(exact >= 0.0);
            prop_assert!((second - exact).abs() <= 1e-3 * (1.0 + exact), "{second} vs {exact}");
        }

        // holds for c ≤ 1; for c > 1 the shifted kernel can be indefinite (see
        // disassortative_kernel_with_c_above_one_is_indefinite)
        #[test]
        fn shifted_kernel_is_psd_when_disassortative_and_c_at_most_one(c in 0.05f64..=1.0, r in 0.0f64..0.99, k in 0u32..=4) {
            let p = ModelParams::limit(c, -r * c, 0.5).unwrap();
            let kern = shifted_matrix(k, choose_b(&p), &p);
            prop_assert!(kern.is_psd(1e-10), "min eigenvalue {}", kern.min_eigenvalue());
        }

        #[test]
        fn extension_is_lipschitz_in_the_dual_norm(
            c in 0.1f64..=1.0,
            r in 0.0f64..0.9,
            ya in prop::collection::vec(-2.0f64..2.0, 2),
            yb in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            let p = ModelParams::limit(c, -r * c, 0.5).unwrap();
            let kern = shifted_matrix(0, choose_b(&p), &p);
            let ext = ExtendedNonlinearity::new(&kern, 1.0).unwrap();
            let (a, b) = (ext.solve(&ya, None), ext.solve(&yb, None));
            let dy: Vec<f64> = ya.iter().zip(&yb).map(|(u, v)| u - v).collect();
            let bound = ext.lipschitz_dual() * norm_l1_dual(&dy);
            prop_assert!(bound.is_finite());
            prop_assert!((a.value - b.value).abs() <= bound + a.gap + b.gap + 1e-9);
            // H̃ is nondecreasing in each coordinate
            let up: Vec<f64> = ya.iter().map(|v| v + 0.1).collect();
            prop_assert!(ext.solve(&up, None).value >= a.value - a.gap - 1e-9);
        }

        #[test]
        fn kernel_on_projection_matches_cone_function(
            p in params(),
            k in 0u32..=5,
            atoms in prop::collection::vec((-1.0f64..=1.0, 0.0f64..1.0), 1..6),
        ) {
            let mu = AtomicMeasure::new(atoms).unwrap();
            let b = choose_b(&p);
            let kern = shifted_matrix(k, b, &p);
            let x = project_to_dyadic(&mu, k);
            let gx = kern.apply(&x.x);
            let d = x.x.len() as f64;
            let tol = g_prime_sup_norm(&p) * 0.5f64.powi(k as i32) * mu.mass() + 1e-12;
            for (i, pt) in x.grid().points().into_iter().enumerate() {
                let direct = cone_function(&mu, pt, &p) + b * mu.mass();
                prop_assert!((d * gx[i] - direct).abs() <= tol, "k={k} point {pt}: {} vs {direct}", d * gx[i]);
            }
        }
    }
}
