//! The projected Hamilton-Jacobi equation ∂_t f̃ = H̃(∇f̃) on dense dyadic
//! grids (K ≤ 1), the characteristics solver and the assembly of f(t, μ).

pub mod assemble;
pub mod characteristics;
pub mod qp;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{shifted_matrix, ExtendedNonlinearity, ModelParams, ShiftedKernel};
use crate::limit::PsiEvaluator;
use crate::measures::{measure_from_weights, DyadicWeights};

pub use assemble::{assemble_f, f_route_registry, FRoute, FValue, GridRoute, HopfLaxRoute, CharacteristicsRoute};
pub use characteristics::{characteristics_solve, CharacteristicsResult};
pub use qp::SmallQp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HjGridSpec {
    pub k: u32,
    pub b: f64,
    pub r: f64,
    /// Box [0, x_max]^{|D_K|} in unnormalized coordinates x_k = |D_K| μ(cell k).
    pub x_max: f64,
    pub h: f64,
    pub tau: f64,
    pub horizon: f64,
    /// Keep every n-th time slice (the first and last are always kept).
    pub save_every: usize,
}

impl HjGridSpec {
    /// Dimension |D_K|.
    pub fn dim(&self) -> usize {
        1usize << (self.k + 1)
    }

    pub fn n_axis(&self) -> usize {
        (self.x_max / self.h).round() as usize + 1
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.tau).ceil() as usize
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.k > 1 {
            v.push(format!("the dense-grid scheme supports K <= 1 (got {})", self.k));
        }
        if !(self.h > 0.0 && self.x_max > 0.0) {
            v.push("h and x_max must be positive".into());
        } else if ((self.x_max / self.h).round() * self.h - self.x_max).abs() > 1e-9 * self.x_max {
            v.push(format!("x_max = {} is not a multiple of h = {}", self.x_max, self.h));
        }
        if !(self.tau > 0.0 && self.horizon >= 0.0) {
            v.push("tau must be positive and the horizon non-negative".into());
        }
        if self.save_every == 0 {
            v.push("save_every must be positive".into());
        }
        v
    }
}

/// τ·L/h with L = R' the Lipschitz constant of H̃ in the dual norm and h/|D_K|
/// the grid spacing in the normalized ℓ¹ norm. The scheme is monotone when
/// this is at most 1.
pub fn cfl_ratio(spec: &HjGridSpec, ext: &ExtendedNonlinearity) -> f64 {
    spec.tau * ext.lipschitz_dual() * spec.dim() as f64 / spec.h
}

/// Largest τ with CFL ratio `ratio` for the given kernel and R.
pub fn stable_tau(k: u32, b: f64, r: f64, h: f64, params: &ModelParams, ratio: f64) -> Result<f64> {
    let ext = ExtendedNonlinearity::new(&shifted_matrix(k, b, params), r)?;
    Ok(ratio * h / (ext.lipschitz_dual() * (1usize << (k + 1)) as f64))
}

#[derive(Clone, Debug, Serialize)]
pub struct HjSolution {
    pub spec: HjGridSpec,
    pub boundary: String,
    pub cfl: f64,
    pub times: Vec<f64>,
    /// Node values per saved time, mixed-radix order with axis 0 fastest.
    pub slices: Vec<Vec<f64>>,
}

/// Nodes of the tensor grid.
#[derive(Clone, Copy, Debug)]
pub struct GridIndex {
    pub dim: usize,
    pub n_axis: usize,
    pub h: f64,
}

impl GridIndex {
    pub fn len(&self) -> usize {
        self.n_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self, mut idx: usize, out: &mut [usize]) {
        for c in out.iter_mut().take(self.dim) {
            *c = idx % self.n_axis;
            idx /= self.n_axis;
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut c = vec![0; self.dim];
        self.coords(idx, &mut c);
        c.iter().map(|&i| i as f64 * self.h).collect()
    }

    fn stride(&self, axis: usize) -> usize {
        self.n_axis.pow(axis as u32)
    }
}

impl HjSolution {
    pub fn index(&self) -> GridIndex {
        GridIndex { dim: self.spec.dim(), n_axis: self.spec.n_axis(), h: self.spec.h }
    }

    pub fn final_slice(&self) -> &[f64] {
        self.slices.last().expect("at least the initial slice")
    }

    /// Multilinear interpolation of slice `s` at x; x must lie in the box.
    pub fn value_at(&self, s: usize, x: &[f64]) -> Result<f64> {
        let gi = self.index();
        if x.len() != gi.dim {
            return Err(Error::InvalidParams(format!("point has dimension {}, expected {}", x.len(), gi.dim)));
        }
        let mut base = vec![0usize; gi.dim];
        let mut frac = vec![0.0; gi.dim];
        for k in 0..gi.dim {
            let u = x[k] / gi.h;
            if !(u >= -1e-9 && u <= (gi.n_axis - 1) as f64 + 1e-9) {
                return Err(Error::InvalidParams(format!("coordinate {} outside the box [0, {}]", x[k], self.spec.x_max)));
            }
            let u = u.clamp(0.0, (gi.n_axis - 1) as f64);
            let i = (u.floor() as usize).min(gi.n_axis.saturating_sub(2));
            base[k] = i;
            frac[k] = u - i as f64;
        }
        let vals = &self.slices[s];
        let mut out = 0.0;
        for corner in 0..(1usize << gi.dim) {
            let mut w = 1.0;
            let mut idx = 0;
            for k in 0..gi.dim {
                let up = corner >> k & 1;
                w *= if up == 1 { frac[k] } else { 1.0 - frac[k] };
                idx += (base[k] + up).min(gi.n_axis - 1) * gi.stride(k);
            }
            if w != 0.0 {
                out += w * vals[idx];
            }
        }
        Ok(out)
    }

    /// Discrete Lipschitz seminorm in the normalized ℓ¹ norm: max over nodes
    /// and axes of |D_K|·|forward difference|.
    pub fn lipschitz(&self, s: usize) -> f64 {
        lipschitz_of(&self.slices[s], &self.index())
    }
}

pub fn lipschitz_of(vals: &[f64], gi: &GridIndex) -> f64 {
    let mut c = vec![0; gi.dim];
    let mut best = 0.0f64;
    for idx in 0..vals.len() {
        gi.coords(idx, &mut c);
        for k in 0..gi.dim {
            if c[k] + 1 < gi.n_axis {
                let d = (vals[idx + gi.stride(k)] - vals[idx]).abs() / gi.h;
                best = best.max(d * gi.dim as f64);
            }
        }
    }
    best
}

/// Explicit monotone scheme f ← f + τH̃(D⁺f) with forward differences and a
/// zero-gradient ghost layer at the upper faces of the box.
///
/// H̃ is nondecreasing in each gradient coordinate, so information travels
/// towards smaller x and the upwind difference looks forward.
pub fn solve_grid_values(spec: &HjGridSpec, kernel: &ShiftedKernel, initial: Vec<f64>) -> Result<HjSolution> {
    let v = spec.violations();
    if !v.is_empty() {
        return Err(Error::InvalidParams(v.join("; ")));
    }
    if kernel.k != spec.k {
        return Err(Error::InvalidParams(format!("kernel built for K = {}, grid has K = {}", kernel.k, spec.k)));
    }
    let ext = ExtendedNonlinearity::new(kernel, spec.r)?;
    let cfl = cfl_ratio(spec, &ext);
    if cfl > 1.0 + 1e-12 {
        return Err(Error::Cfl { ratio: cfl });
    }
    let qp = SmallQp::new(&kernel.matrix, spec.dim() as f64 * ext.r_prime)?;
    let gi = GridIndex { dim: spec.dim(), n_axis: spec.n_axis(), h: spec.h };
    if initial.len() != gi.len() {
        return Err(Error::InvalidParams(format!("initial condition has {} values, grid has {}", initial.len(), gi.len())));
    }
    let n_steps = spec.n_steps();
    let mut times = vec![0.0];
    let mut slices = vec![initial.clone()];
    let mut cur = initial;
    let mut next = vec![0.0; cur.len()];
    let mut t = 0.0;
    for step in 1..=n_steps {
        let dt = spec.tau.min(spec.horizon - t);
        next.par_iter_mut().enumerate().for_each(|(idx, out)| {
            let mut c = [0usize; qp::MAX_DIM];
            gi.coords(idx, &mut c[..gi.dim]);
            let mut y = [0.0; qp::MAX_DIM];
            for k in 0..gi.dim {
                if c[k] + 1 < gi.n_axis {
                    y[k] = (cur[idx + gi.stride(k)] - cur[idx]) / gi.h;
                }
            }
            *out = cur[idx] + dt * qp.solve(&y[..gi.dim]).0;
        });
        std::mem::swap(&mut cur, &mut next);
        t += dt;
        if step % spec.save_every == 0 || step == n_steps {
            times.push(t);
            slices.push(cur.clone());
        }
    }
    Ok(HjSolution { spec: spec.clone(), boundary: "neumann".into(), cfl, times, slices })
}

/// ψ̃_b(μ_x) = ψ(μ_x) + b‖x‖₁ at every node.
pub fn shifted_psi_nodes(spec: &HjGridSpec, params: &ModelParams, eval: &dyn PsiEvaluator) -> Result<Vec<f64>> {
    let gi = GridIndex { dim: spec.dim(), n_axis: spec.n_axis(), h: spec.h };
    (0..gi.len())
        .into_par_iter()
        .map(|idx| {
            let x = DyadicWeights { k: spec.k, x: gi.point(idx) };
            let mu = measure_from_weights(&x);
            Ok(eval.psi(&mu, params)?.value + spec.b * mu.mass())
        })
        .collect()
}

/// Solve with initial condition ψ̃_b^{(K)}. Refuses Δ > 0 and non-PSD kernels.
pub fn solve_grid(spec: &HjGridSpec, params: &ModelParams, eval: &dyn PsiEvaluator) -> Result<HjSolution> {
    if !params.is_disassortative() {
        return Err(Error::Unsupported("the grid scheme is only available for Δ <= 0".into()));
    }
    let kernel = shifted_matrix(spec.k, spec.b, params);
    ExtendedNonlinearity::new(&kernel, spec.r)?;
    let init = shifted_psi_nodes(spec, params, eval)?;
    solve_grid_values(spec, &kernel, init)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::kernel::{choose_b, r_threshold};
    use proptest::prelude::*;

    fn setup() -> (ShiftedKernel, HjGridSpec) {
        let p = ModelParams::limit(0.8, -0.5, 0.5).unwrap();
        let b = choose_b(&p);
        let r = r_threshold(&p, b);
        let h = 0.25;
        let tau = stable_tau(0, b, r, h, &p, 1.0).unwrap();
        (shifted_matrix(0, b, &p), HjGridSpec { k: 0, b, r, x_max: 1.5, h, tau, horizon: 0.05, save_every: 5 })
    }

    // 7 × 7 nodes at K = 0
    fn data() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 49)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ordered_data_stay_ordered(u0 in data(), gap in prop::collection::vec(0.0f64..0.5, 49)) {
            let (kern, spec) = setup();
            let v0: Vec<f64> = u0.iter().zip(&gap).map(|(a, g)| a + g).collect();
            let u = solve_grid_values(&spec, &kern, u0).unwrap();
            let v = solve_grid_values(&spec, &kern, v0).unwrap();
            for (su, sv) in u.slices.iter().zip(&v.slices) {
                for (a, b) in su.iter().zip(sv) {
                    prop_assert!(a <= b, "{a} > {b}");
                }
            }
        }

        #[test]
        fn lipschitz_seminorm_does_not_grow(u0 in data()) {
            let (kern, spec) = setup();
            let sol = solve_grid_values(&spec, &kern, u0).unwrap();
            let l0 = sol.lipschitz(0);
            for s in 1..sol.slices.len() {
                prop_assert!(sol.lipschitz(s) <= l0 * (1.0 + 1e-9) + spec.h, "slice {s}: {} > {l0}", sol.lipschitz(s));
            }
        }
    }
}
