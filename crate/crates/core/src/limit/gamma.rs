//! Damped iteration for the fixed-point equation ν = Γ(μ + tν).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::ModelParams;
use crate::measures::{bin_to_grid, wasserstein, AtomicMeasure, DyadicGrid};
use crate::rng::{child_seed, tag};

use super::psi::d_law_mc;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedPointOptions {
    pub damping: f64,
    pub max_iter: usize,
    /// Stop when W₁ between successive iterates falls below this.
    pub tol: f64,
    pub n_samples: usize,
    /// Iterates are binned onto D_K.
    pub k: u32,
    pub seed: u64,
    /// Fixed points closer than this in W₁ are reported as one.
    pub merge_distance: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { damping: 0.5, max_iter: 200, tol: 1e-3, n_samples: 100_000, k: 6, seed: 0, merge_distance: 0.02 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedPointRun {
    pub start: String,
    pub nu: AtomicMeasure,
    pub converged: bool,
    pub iterations: usize,
    /// W₁ between successive iterates.
    pub history: Vec<f64>,
    /// W₁(ν, Γ(μ + tν)) at the returned ν, both binned onto D_K.
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedPointReport {
    pub runs: Vec<FixedPointRun>,
    /// Indices into `runs` of the distinct fixed points among converged runs.
    pub distinct: Vec<usize>,
}

/// Γ(μ + tν) from the stratified law, binned onto D_K. The same seed is used
/// at every iterate, so the iteration map is deterministic.
pub fn gamma_binned(mu: &AtomicMeasure, t: f64, nu: &AtomicMeasure, params: &ModelParams, n: usize, k: u32, seed: u64) -> Result<AtomicMeasure> {
    let arg = mu.plus_scaled(t, nu);
    let law = d_law_mc(&arg, params, n, seed)?;
    Ok(bin_to_grid(&law.gamma_measure(params), k))
}

/// Starting measures: δ at m̄, uniform on the grid, and measures tilted towards ±1.
pub fn default_starts(params: &ModelParams, k: u32) -> Vec<(String, AtomicMeasure)> {
    let grid = DyadicGrid::new(k);
    let pts = grid.points();
    let tilted = |a: f64| {
        let ws: Vec<f64> = pts.iter().map(|x| (a * x).exp()).collect();
        let s: f64 = ws.iter().sum();
        AtomicMeasure { atoms: pts.iter().zip(&ws).map(|(x, w)| (*x, w / s)).collect() }
    };
    vec![
        ("dirac_mbar".into(), bin_to_grid(&AtomicMeasure::dirac(params.m_bar(), 1.0), k)),
        ("uniform".into(), AtomicMeasure::uniform_on(&pts, 1.0)),
        ("skew_plus".into(), tilted(3.0)),
        ("skew_minus".into(), tilted(-3.0)),
        ("dirac_plus".into(), bin_to_grid(&AtomicMeasure::dirac(1.0, 1.0), k)),
        ("dirac_minus".into(), AtomicMeasure::dirac(-1.0, 1.0)),
    ]
}

fn iterate(
    t: f64,
    mu: &AtomicMeasure,
    params: &ModelParams,
    opts: &FixedPointOptions,
    start: (String, AtomicMeasure),
) -> Result<FixedPointRun> {
    let seed = child_seed(opts.seed, tag::GAMMA, 0);
    let mut nu = bin_to_grid(&start.1, opts.k);
    let mut history = Vec::new();
    let mut converged = false;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        let g = gamma_binned(mu, t, &nu, params, opts.n_samples, opts.k, seed)?;
        let next = bin_to_grid(&nu.scaled(1.0 - opts.damping).plus_scaled(opts.damping, &g), opts.k);
        let w = wasserstein(&nu, &next)?;
        history.push(w);
        nu = next;
        if w < opts.tol {
            converged = true;
            break;
        }
    }
    let g = gamma_binned(mu, t, &nu, params, opts.n_samples, opts.k, seed)?;
    let residual = wasserstein(&nu, &g)?;
    Ok(FixedPointRun { start: start.0, nu, converged, iterations: it, history, residual })
}

/// Solve ν = Γ(μ + tν) from every start. Non-convergence is reported in the
/// runs, not raised. At t = 0 the answer is Γ(μ) itself.
pub fn fixed_point(t: f64, mu: &AtomicMeasure, params: &ModelParams, opts: &FixedPointOptions) -> Result<FixedPointReport> {
    fixed_point_from(t, mu, params, opts, default_starts(params, opts.k))
}

pub fn fixed_point_from(
    t: f64,
    mu: &AtomicMeasure,
    params: &ModelParams,
    opts: &FixedPointOptions,
    starts: Vec<(String, AtomicMeasure)>,
) -> Result<FixedPointReport> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParams(format!("t must be non-negative (got {t})")));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidParams(format!("damping must lie in (0, 1] (got {})", opts.damping)));
    }
    if t == 0.0 {
        let seed = child_seed(opts.seed, tag::GAMMA, 0);
        let g = gamma_binned(mu, 0.0, &AtomicMeasure::zero(), params, opts.n_samples, opts.k, seed)?;
        let run = FixedPointRun { start: "exact".into(), nu: g, converged: true, iterations: 1, history: vec![0.0], residual: 0.0 };
        return Ok(FixedPointReport { runs: vec![run], distinct: vec![0] });
    }
    let runs = starts.into_iter().map(|s| iterate(t, mu, params, opts, s)).collect::<Result<Vec<_>>>()?;
    let mut distinct: Vec<usize> = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        if !r.converged {
            continue;
        }
        let mut new = true;
        for &j in &distinct {
            if wasserstein(&r.nu, &runs[j].nu)? < opts.merge_distance {
                new = false;
                break;
            }
        }
        if new {
            distinct.push(i);
        }
    }
    Ok(FixedPointReport { runs, distinct })
}
