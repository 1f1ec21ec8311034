//! The Parisi functional, the Hopf-Lax objective and their maximization over
//! probability measures on D_K.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::free_energy::{free_energy_t0, EstimatorOptions};
use crate::kernel::{g, h, ModelParams};
use crate::measures::{wasserstein, AtomicMeasure, DyadicGrid};
use crate::rng::{child_seed, stream, tag};
use crate::stats::Estimate;

use super::gamma::{fixed_point, FixedPointOptions};
use super::psi::{log_tilt, posterior_mean, psi_from_law, DLaw, MonteCarloPsi, PsiEvaluator};
use super::simplex::{project_simplex, project_simplex_mean};

/// ½ ∫∫ k(xy) dν(x)dν(y) for a kernel k.
fn double_integral(nu: &AtomicMeasure, k: impl Fn(f64) -> f64) -> f64 {
    let mut s = 0.0;
    for &(x, a) in &nu.atoms {
        for &(y, b) in &nu.atoms {
            s += a * b * k(x * y);
        }
    }
    0.5 * s
}

/// Par(ν) = ψ(ν) + c/2 + Δm̄²/2 − ½E h(x₁x₂), x₁, x₂ i.i.d. from ν.
pub fn parisi(nu: &AtomicMeasure, params: &ModelParams, eval: &dyn PsiEvaluator) -> Result<Estimate> {
    if !nu.is_probability() {
        return Err(Error::InvalidMeasure(format!("Par needs a probability measure (mass {})", nu.mass())));
    }
    let psi = eval.psi(nu, params)?;
    let mb = params.m_bar();
    let rest = 0.5 * params.c + 0.5 * params.delta * mb * mb - double_integral(nu, |z| h(z, params));
    Ok(Estimate { value: psi.value + rest, se: psi.se })
}

/// Par_N(ν): the same functional with ψ replaced by ψ_N(ν) = F̄_N(0, ν).
pub fn parisi_finite_n(nu: &AtomicMeasure, params: &ModelParams, opts: &EstimatorOptions) -> Result<Estimate> {
    if !nu.is_probability() {
        return Err(Error::InvalidMeasure(format!("Par needs a probability measure (mass {})", nu.mass())));
    }
    let psi_n = free_energy_t0(params, nu, opts)?;
    let mb = params.m_bar();
    let rest = 0.5 * params.c + 0.5 * params.delta * mb * mb - double_integral(nu, |z| h(z, params));
    Ok(Estimate { value: psi_n.value + rest, se: psi_n.std_error })
}

/// ψ(μ + tν) − (t/2)∫G_ν dν.
pub fn hopf_lax_objective(t: f64, mu: &AtomicMeasure, nu: &AtomicMeasure, params: &ModelParams, eval: &dyn PsiEvaluator) -> Result<Estimate> {
    let psi = eval.psi(&mu.plus_scaled(t, nu), params)?;
    Ok(Estimate { value: psi.value - t * double_integral(nu, |z| g(z, params)), se: psi.se })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    /// sup over probability ν with mean m̄ of Par(ν).
    Parisi,
    /// sup over probability ν of ψ(μ + tν) − (t/2)∫G_ν dν.
    HopfLax,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerOptions {
    /// Random starts on top of the deterministic ones.
    pub restarts: usize,
    /// Draws per objective evaluation during the ascent.
    pub n_mc: usize,
    /// Draws for the independent re-evaluation of the returned optimum.
    pub n_final: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub step0: f64,
    /// Stop once the projected step is shorter than this (Euclidean, weights).
    pub tol: f64,
    /// Also start from the fixed points of ν = Γ(μ + tν), the critical
    /// points of the objective.
    pub fixed_point_starts: bool,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self { restarts: 2, n_mc: 100_000, n_final: 400_000, seed: 0, max_iter: 300, step0: 0.05, tol: 1e-7, fixed_point_starts: true }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub restart: usize,
    pub iteration: usize,
    pub value: f64,
    pub se: f64,
    pub constraint_residual: f64,
    pub step: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RestartInfo {
    pub start: String,
    /// Objective at the end of the ascent (ascent draws, not re-evaluated).
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariationalResult {
    pub problem: Problem,
    pub k: u32,
    pub t: f64,
    /// Objective at the optimizer, re-evaluated with independent draws.
    pub value: Estimate,
    pub optimizer: AtomicMeasure,
    pub restarts: Vec<RestartInfo>,
    /// sup over the support of |D_μψ(μ + tν, x) − G_ν(x)|.
    pub critical_residual: f64,
    /// sup over the support of the gradient after removing the Lagrange
    /// multipliers of the constraints.
    pub kkt_residual: f64,
    pub mass_residual: f64,
    pub mean_residual: f64,
    /// "proven" for Δ ≤ 0, "conjectural candidate" otherwise.
    pub label: String,
    pub trace: Vec<TraceRow>,
}

struct Setup<'a> {
    problem: Problem,
    params: &'a ModelParams,
    t: f64,
    mu: &'a AtomicMeasure,
    xs: Vec<f64>,
    k: u32,
}

struct Evaluation {
    value: f64,
    se: f64,
    /// Per-draw values of the random part, for paired comparisons.
    paired: Option<Vec<f64>>,
    grad: Vec<f64>,
    /// D_μψ(argument, x_j) − G_ν(x_j).
    critical: Vec<f64>,
}

/// Expectation of f over the stratified law of posterior means, through a
/// fine histogram with linear interpolation so that many x share one pass.
struct MeanHistogram {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl MeanHistogram {
    const BINS: usize = 4096;

    fn new(law: &DLaw, params: &ModelParams) -> Self {
        let n = Self::BINS;
        let nodes: Vec<f64> = (0..=n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
        let mut weights = vec![0.0; n + 1];
        let (p, mb) = (params.p, params.m_bar());
        let mut add = |m: f64, w: f64| {
            let u = ((m + 1.0) * 0.5 * n as f64).clamp(0.0, n as f64);
            let i = (u.floor() as usize).min(n - 1);
            let f = u - i as f64;
            weights[i] += w * (1.0 - f);
            weights[i + 1] += w * f;
        };
        for (w, d) in &law.plus {
            add(posterior_mean(*d, mb), p * w);
        }
        for (w, d) in &law.minus {
            add(posterior_mean(*d, mb), (1.0 - p) * w);
        }
        Self { nodes, weights }
    }

    fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).filter(|(_, w)| **w != 0.0).map(|(m, w)| w * f(*m)).sum()
    }
}

impl Setup<'_> {
    fn nu(&self, w: &[f64]) -> AtomicMeasure {
        AtomicMeasure { atoms: self.xs.iter().zip(w).filter(|(_, a)| **a > 0.0).map(|(x, a)| (*x, *a)).collect() }
    }

    fn argument(&self, nu: &AtomicMeasure) -> AtomicMeasure {
        match self.problem {
            Problem::Parisi => nu.clone(),
            Problem::HopfLax => self.mu.plus_scaled(self.t, nu),
        }
    }

    fn evaluate(&self, w: &[f64], eval: &dyn PsiEvaluator) -> Result<Evaluation> {
        let params = self.params;
        let nu = self.nu(w);
        let arg = self.argument(&nu);
        let law = eval.law(&arg, params)?;
        let psi = psi_from_law(&law, &arg, params);
        let (c, d, mb) = (params.c, params.delta, params.m_bar());
        let hist = MeanHistogram::new(&law, params);
        let dpsi: Vec<f64> = self.xs.iter().map(|&x| hist.expect(|m| h(m * x, params)) - c - d * mb * x).collect();
        let g_nu: Vec<f64> = self.xs.iter().map(|&x| nu.integrate(|y| g(x * y, params))).collect();
        let critical: Vec<f64> = dpsi.iter().zip(&g_nu).map(|(a, b)| a - b).collect();
        let paired = law.paired_values(params.p, |dd| log_tilt(dd, params.p));
        let (value, grad) = match self.problem {
            Problem::Parisi => {
                let h_nu: Vec<f64> = self.xs.iter().map(|&x| nu.integrate(|y| h(x * y, params))).collect();
                let v = psi.value + 0.5 * c + 0.5 * d * mb * mb - double_integral(&nu, |z| h(z, params));
                (v, dpsi.iter().zip(&h_nu).map(|(a, b)| a - b).collect())
            }
            Problem::HopfLax => {
                let v = psi.value - self.t * double_integral(&nu, |z| g(z, params));
                (v, critical.iter().map(|r| self.t * r).collect())
            }
        };
        Ok(Evaluation { value, se: psi.se, paired, grad, critical })
    }

    fn project(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self.problem {
            Problem::Parisi => project_simplex_mean(y, &self.xs, self.params.m_bar()),
            Problem::HopfLax => Ok(project_simplex(y)),
        }
    }

    fn residuals(&self, w: &[f64]) -> (f64, f64) {
        let mass = (w.iter().sum::<f64>() - 1.0).abs();
        let mean = match self.problem {
            Problem::Parisi => (w.iter().zip(&self.xs).map(|(a, x)| a * x).sum::<f64>() - self.params.m_bar()).abs(),
            Problem::HopfLax => 0.0,
        };
        (mass, mean)
    }

    /// Remove the multipliers: a constant (mass) and, with the mean
    /// constraint, a linear term, fitted by least squares on the support.
    fn kkt_residual(&self, w: &[f64], grad: &[f64]) -> f64 {
        let supp: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 1e-12).collect();
        if supp.is_empty() {
            return f64::NAN;
        }
        let n = supp.len() as f64;
        let (a, b) = match self.problem {
            Problem::HopfLax => (supp.iter().map(|&j| grad[j]).sum::<f64>() / n, 0.0),
            Problem::Parisi => {
                let sx: f64 = supp.iter().map(|&j| self.xs[j]).sum();
                let sxx: f64 = supp.iter().map(|&j| self.xs[j] * self.xs[j]).sum();
                let sy: f64 = supp.iter().map(|&j| grad[j]).sum();
                let sxy: f64 = supp.iter().map(|&j| self.xs[j] * grad[j]).sum();
                let det = n * sxx - sx * sx;
                if det.abs() < 1e-14 {
                    (sy / n, 0.0)
                } else {
                    ((sy * sxx - sx * sxy) / det, (n * sxy - sx * sy) / det)
                }
            }
        };
        supp.iter().map(|&j| (grad[j] - a - b * self.xs[j]).abs()).fold(0.0, f64::max)
    }

    fn fixed_point_starts(&self, opts: &OptimizerOptions) -> Result<Vec<(String, Vec<f64>)>> {
        let fp = FixedPointOptions { n_samples: opts.n_mc, k: self.k, seed: opts.seed, ..Default::default() };
        let rep = fixed_point(self.t, self.mu, self.params, &fp)?;
        let grid = DyadicGrid::new(self.k);
        Ok(rep
            .distinct
            .iter()
            .map(|&i| {
                let mut w = vec![0.0; self.xs.len()];
                for &(x, a) in &rep.runs[i].nu.atoms {
                    w[grid.cell_of(x)] += a;
                }
                (format!("fixed_point_{}", rep.runs[i].start), w)
            })
            .collect())
    }

    fn starts(&self, restarts: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
        let xs = &self.xs;
        let nrm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|a| a / s).collect::<Vec<f64>>()
        };
        let nearest = |m: f64| {
            let mut v = vec![0.0; xs.len()];
            let j = (0..xs.len()).min_by(|&a, &b| (xs[a] - m).abs().total_cmp(&(xs[b] - m).abs())).unwrap();
            v[j] = 1.0;
            v
        };
        let mut out = vec![
            ("dirac_mbar".to_string(), nearest(self.params.m_bar())),
            ("uniform".into(), vec![1.0 / xs.len() as f64; xs.len()]),
            ("skew_plus".into(), nrm(xs.iter().map(|x| (2.0 * x).exp()).collect())),
            ("skew_minus".into(), nrm(xs.iter().map(|x| (-2.0 * x).exp()).collect())),
            ("spread".into(), nrm(xs.iter().map(|x| 0.05 + x * x).collect())),
        ];
        for r in 0..restarts {
            let mut rng = stream(seed, tag::OPTIMIZER, r as u64);
            let v: Vec<f64> = (0..xs.len()).map(|_| Exp1.sample(&mut rng)).collect::<Vec<f64>>();
            // sparse Dirichlet-like starts explore more of the simplex
            let v = v.into_iter().map(|a: f64| if rng.random::<f64>() < 0.7 { 0.0 } else { a }).collect::<Vec<_>>();
            let v = if v.iter().sum::<f64>() > 0.0 { nrm(v) } else { vec![1.0 / xs.len() as f64; xs.len()] };
            out.push((format!("random_{r}"), v));
        }
        out
    }
}

fn paired_diff_se(a: &Evaluation, b: &Evaluation) -> f64 {
    match (&a.paired, &b.paired) {
        (Some(x), Some(y)) if x.len() == y.len() && x.len() > 1 => {
            let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            crate::stats::mean_se(&d).1
        }
        (None, None) => 0.0,
        _ => (a.se * a.se + b.se * b.se).sqrt(),
    }
}

fn ascend(setup: &Setup, start: Vec<f64>, eval: &dyn PsiEvaluator, opts: &OptimizerOptions, restart: usize, trace: &mut Vec<TraceRow>) -> Result<(Vec<f64>, Evaluation, RestartInfo)> {
    let mut w = setup.project(&start)?;
    let mut cur = setup.evaluate(&w, eval)?;
    let mut eta = opts.step0;
    let mut converged = false;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        let y: Vec<f64> = w.iter().zip(&cur.grad).map(|(a, g)| a + eta * g).collect();
        let cand = setup.project(&y)?;
        let step = cand.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if step < opts.tol {
            converged = true;
            break;
        }
        let next = setup.evaluate(&cand, eval)?;
        let band = 2.0 * paired_diff_se(&next, &cur);
        // ascent needs a real increase unless the step is within the noise band
        let accept = next.value > cur.value || (band > 0.0 && next.value >= cur.value - band && step > 1e3 * opts.tol);
        if accept && next.value.is_finite() {
            w = cand;
            cur = next;
            eta *= 1.5;
        } else {
            eta *= 0.5;
            if eta < 1e-10 {
                converged = true;
                break;
            }
        }
        let (mass, mean) = setup.residuals(&w);
        trace.push(TraceRow { restart, iteration: it, value: cur.value, se: cur.se, constraint_residual: mass.max(mean), step: eta });
    }
    let info = RestartInfo { start: String::new(), value: cur.value, iterations: it, converged };
    Ok((w, cur, info))
}

fn optimize(setup: Setup, opts: &OptimizerOptions) -> Result<VariationalResult> {
    if setup.xs.is_empty() {
        return Err(Error::InvalidParams("empty grid".into()));
    }
    let eval = MonteCarloPsi { n_mc: opts.n_mc, seed: child_seed(opts.seed, tag::OPTIMIZER, 1) };
    let mut trace = Vec::new();
    let mut best: Option<(Vec<f64>, Evaluation)> = None;
    let mut restarts = Vec::new();
    let mut starts = setup.starts(opts.restarts, opts.seed);
    if opts.fixed_point_starts {
        starts.extend(setup.fixed_point_starts(opts)?);
    }
    for (r, (name, start)) in starts.into_iter().enumerate() {
        let (w, ev, mut info) = ascend(&setup, start, &eval, opts, r, &mut trace)?;
        info.start = name;
        restarts.push(info);
        if best.as_ref().is_none_or(|(_, b)| ev.value > b.value) {
            best = Some((w, ev));
        }
    }
    let (w, ev) = best.expect("at least one start");
    let nu = setup.nu(&w);
    let final_eval = MonteCarloPsi { n_mc: opts.n_final, seed: child_seed(opts.seed, tag::OPTIMIZER, 2) };
    let value = match setup.problem {
        Problem::Parisi => parisi(&nu, setup.params, &final_eval)?,
        Problem::HopfLax => hopf_lax_objective(setup.t, setup.mu, &nu, setup.params, &final_eval)?,
    };
    let supp: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 1e-12).collect();
    let critical_residual = supp.iter().map(|&j| ev.critical[j].abs()).fold(0.0, f64::max);
    let kkt_residual = setup.kkt_residual(&w, &ev.grad);
    let (mass_residual, mean_residual) = setup.residuals(&w);
    let label = if setup.params.is_disassortative() { "proven" } else { "conjectural candidate" };
    Ok(VariationalResult {
        problem: setup.problem,
        k: setup.k,
        t: setup.t,
        value,
        optimizer: nu,
        restarts,
        critical_residual,
        kkt_residual,
        mass_residual,
        mean_residual,
        label: label.into(),
        trace,
    })
}

/// sup of Par over probability measures on D_K with mean m̄.
pub fn optimize_parisi(params: &ModelParams, k: u32, opts: &OptimizerOptions) -> Result<VariationalResult> {
    params.validate()?;
    let xs = DyadicGrid::new(k).points();
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if params.m_bar() > hi {
        return Err(Error::InvalidParams(format!("m̄ = {} exceeds the largest point {hi} of D_{k}", params.m_bar())));
    }
    let zero = AtomicMeasure::zero();
    optimize(Setup { problem: Problem::Parisi, params, t: 1.0, mu: &zero, xs, k }, opts)
}

/// f(t, μ) = sup_ν ψ(μ + tν) − (t/2)∫G_ν dν over probability measures on D_K.
pub fn hopf_lax(t: f64, mu: &AtomicMeasure, params: &ModelParams, k: u32, opts: &OptimizerOptions) -> Result<VariationalResult> {
    params.validate()?;
    if !(t >= 0.0) {
        return Err(Error::InvalidParams(format!("t must be non-negative (got {t})")));
    }
    let xs = DyadicGrid::new(k).points();
    optimize(Setup { problem: Problem::HopfLax, params, t, mu, xs, k }, opts)
}

/// W₁ distance of a variational optimizer to δ_x.
pub fn distance_to_dirac(nu: &AtomicMeasure, x: f64) -> Result<f64> {
    wasserstein(nu, &AtomicMeasure::dirac(x, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limit::psi::EnumeratePsi;

    #[test]
    fn parisi_at_dirac_zero() {
        for (c, d) in [(3.0, -2.0), (2.0, 1.0), (0.8, -0.5)] {
            let p = ModelParams::limit(c, d, 0.5).unwrap();
            let v = parisi(&AtomicMeasure::dirac(0.0, 1.0), &p, &EnumeratePsi::default()).unwrap();
            assert!((v.value - 0.5 * (c * c.ln() - c)).abs() < 1e-12);
        }
    }

    #[test]
    fn hopf_lax_at_time_zero_is_psi() {
        let p = ModelParams::limit(3.0, -1.0, 0.6).unwrap();
        let mu = AtomicMeasure::new(vec![(-1.0, 0.5), (0.0, 0.25)]).unwrap();
        let opts = OptimizerOptions { restarts: 0, max_iter: 5, n_mc: 2000, n_final: 2000, fixed_point_starts: false, ..Default::default() };
        let r = hopf_lax(0.0, &mu, &p, 0, &opts).unwrap();
        let direct = crate::limit::psi::psi(&mu, &p, 2000, child_seed(0, tag::OPTIMIZER, 2)).unwrap();
        assert!((r.value.value - direct.value).abs() < 1e-12);
    }

    #[test]
    fn parisi_constraints_hold() {
        let p = ModelParams::limit(3.0, -2.0, 0.6).unwrap();
        let opts = OptimizerOptions { restarts: 0, max_iter: 20, n_mc: 5000, n_final: 5000, fixed_point_starts: false, ..Default::default() };
        let r = optimize_parisi(&p, 3, &opts).unwrap();
        assert!(r.mass_residual < 1e-8 && r.mean_residual < 1e-8, "{} {}", r.mass_residual, r.mean_residual);
        assert!(r.optimizer.atoms.iter().all(|a| a.1 >= 0.0));
    }
}
