//! Free-energy and mutual-information estimators, the t- and μ-derivative
//! formulas, and the Poisson versus binomial comparison.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{GibbsEstimate, GibbsMethod, Marginals, Method, PairSet};
use crate::kernel::ModelParams;
use crate::measures::AtomicMeasure;
use crate::inference::exact::{log_partition, posterior_form};
use crate::model::{sample_coupled_pair, sample_instance, Instance};
use crate::registry::Registry;
use crate::rng::{child_seed, stream, tag};
use crate::stats::{gauss_legendre_on, log_add_exp, mean, mean_se};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyResult {
    /// Per-site free energy F̄_N(t, μ).
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub t: f64,
    pub mu_mass: f64,
    pub method: String,
    /// F̄_N(0, μ).
    pub f0: f64,
    /// ∫_0^t ∂_s F̄_N ds (zero for the exact method).
    pub integral: f64,
    pub n_disorder: usize,
    pub mixing_warning: bool,
}

/// Options shared by the estimators.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    pub n_disorder: usize,
    pub seed: u64,
    pub cap: usize,
    /// Above this N the pair average is estimated from `pair_samples` random pairs.
    pub all_pairs_max_n: usize,
    pub pair_samples: usize,
    pub n_t_nodes: usize,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self { n_disorder: 200, seed: 0, cap: 22, all_pairs_max_n: 64, pair_samples: 4096, n_t_nodes: 8 }
    }
}

/// φ_N(a) = (a/N) log a + (1 − a/N) log(1 − a/N): the expected log-likelihood
/// ratio of one observation whose success probability is a/N.
#[inline]
pub fn phi_n(a: f64, n: usize) -> f64 {
    let q = a / n as f64;
    q * a.ln() + (1.0 - q) * (1.0 - q).ln()
}

fn check_n(params: &ModelParams) -> Result<()> {
    if params.n < 2 {
        return Err(Error::InvalidParams("finite-N estimators need N >= 2".into()));
    }
    Ok(())
}

fn disorder_seed(seed: u64, k: usize) -> u64 {
    child_seed(seed, tag::DISORDER, k as u64)
}

/// Per-instance (1/N) log Z by enumeration.
pub fn log_z_per_site(inst: &Instance, cap: usize) -> Result<f64> {
    Ok(log_partition(inst, cap)? / inst.n() as f64)
}

/// Quenched (1/N) E log Z by exact enumeration, averaged over disorder.
pub fn free_energy_exact(params: &ModelParams, t: f64, mu: &AtomicMeasure, opts: &EstimatorOptions) -> Result<FreeEnergyResult> {
    check_n(params)?;
    if params.n > opts.cap {
        return Err(Error::EnumerationCap { n: params.n, cap: opts.cap });
    }
    let vals = (0..opts.n_disorder)
        .into_par_iter()
        .map(|k| {
            let inst = sample_instance(params, t, mu, None, disorder_seed(opts.seed, k))?;
            log_z_per_site(&inst, opts.cap)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (v, se) = mean_se(&vals);
    Ok(FreeEnergyResult {
        value: v,
        std_error: if vals.len() > 1 { se } else { 0.0 },
        n: params.n,
        t,
        mu_mass: mu.mass(),
        method: "exact".into(),
        f0: f64::NAN,
        integral: 0.0,
        n_disorder: opts.n_disorder,
        mixing_warning: false,
    })
}

/// (1/N) log Z of an instance without pair couplings (t = 0): Z factorizes
/// over sites.
pub fn log_z_t0_per_site(inst: &Instance) -> Result<f64> {
    let form = posterior_form(inst)?;
    if form.coupling.iter().any(|j| *j != 0.0) {
        return Err(Error::InvalidParams("factorized log Z needs an instance without pair couplings".into()));
    }
    let sites: f64 = form.field.iter().map(|h| log_add_exp(*h, -*h)).sum();
    Ok((form.constant + sites) / inst.n() as f64)
}

/// F̄_N(0, μ) by per-site factorization; valid for any N.
pub fn free_energy_t0(params: &ModelParams, mu: &AtomicMeasure, opts: &EstimatorOptions) -> Result<FreeEnergyResult> {
    check_n(params)?;
    let vals = (0..opts.n_disorder)
        .into_par_iter()
        .map(|k| {
            let inst = sample_instance(params, 0.0, mu, None, disorder_seed(opts.seed, k))?;
            log_z_t0_per_site(&inst)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (v, se) = mean_se(&vals);
    let se = if vals.len() > 1 { se } else { 0.0 };
    Ok(FreeEnergyResult {
        value: v,
        std_error: se,
        n: params.n,
        t: 0.0,
        mu_mass: mu.mass(),
        method: "exact_t0".into(),
        f0: v,
        integral: 0.0,
        n_disorder: opts.n_disorder,
        mixing_warning: false,
    })
}

/// F̄_N(t, 0) at Δ = 0, where the Hamiltonian does not depend on σ:
/// ((N − 1)/2) t φ_N(c).
pub fn free_energy_delta0(params: &ModelParams, t: f64) -> f64 {
    0.5 * (params.n as f64 - 1.0) * t * phi_n(params.c, params.n)
}

/// (1/N)(N choose 2)[(c/N) log c + (1 − c/N) log(1 − c/N)], the same value
/// written for the original model.
pub fn free_energy_delta0_binomial(params: &ModelParams) -> f64 {
    let n = params.n as f64;
    let c = params.c;
    (n * (n - 1.0) / 2.0) / n * ((c / n) * c.ln() + (1.0 - c / n) * (1.0 - c / n).ln())
}

/// The pair set used for the average over (i, j) ∈ [N]².
pub fn pair_set_for(n: usize, opts: &EstimatorOptions, seed: u64) -> PairSet {
    if n <= opts.all_pairs_max_n {
        return PairSet::All;
    }
    let mut rng = stream(seed, tag::PAIRS, 0);
    let mut v = Vec::with_capacity(opts.pair_samples);
    while v.len() < opts.pair_samples {
        let i = rng.random_range(0..n) as u32;
        let j = rng.random_range(0..n) as u32;
        if i != j {
            v.push((i, j));
        }
    }
    PairSet::List(v)
}

/// Three expressions for ∂_t F̄_N on one instance.
#[derive(Clone, Copy, Debug)]
struct DerivRow {
    exact: f64,
    lemma: f64,
    taylor: f64,
}

const TAYLOR_TERMS: usize = 40;

/// Average over off-diagonal pairs of f(⟨σ_iσ_j⟩), from one set of correlations.
fn offdiag_mean(marg: &Marginals, corr: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let n = marg.n();
    let (mut s, mut cnt) = (0.0, 0usize);
    marg.pairs.for_each(n, |idx, i, j| {
        if i != j {
            s += f(corr[idx]);
            cnt += 1;
        }
    });
    s / cnt as f64
}

/// Bias-corrected pair average: 2 f(full) − ½(f(A) + f(B)) removes the leading
/// bias of a nonlinear f of noisy correlations. Identity for exact marginals.
fn corrected_mean(marg: &Marginals, f: impl Fn(f64) -> f64 + Copy) -> f64 {
    let full = offdiag_mean(marg, &marg.corr, f);
    if marg.halves.is_none() {
        return full;
    }
    let (a, b) = marg.corr_halves();
    2.0 * full - 0.5 * (offdiag_mean(marg, a, f) + offdiag_mean(marg, b, f))
}

fn deriv_row(params: &ModelParams, marg: &Marginals) -> DerivRow {
    let n = params.n;
    let nf = n as f64;
    let (c, d) = (params.c, params.delta);
    let mbar = params.m_bar();
    let off = corrected_mean(marg, |x| phi_n(c + d * x, n));
    let exact = 0.5 * (nf - 1.0) * (phi_n(c + d, n) / nf + (1.0 - 1.0 / nf) * off);
    let alog = corrected_mean(marg, |x| {
        let a = c + d * x;
        a * a.ln()
    });
    let lemma = 0.5 * alog - 0.5 * d * mbar * mbar - 0.5 * c;
    let series = corrected_mean(marg, |x| {
        let mut s = 0.0;
        let r = -d / c * x;
        let mut pow = r;
        for k in 2..=TAYLOR_TERMS {
            pow *= r;
            s += pow / (k * (k - 1)) as f64;
        }
        s
    });
    let taylor = 0.5 * (c + d * mbar * mbar) * c.ln() + 0.5 * c * series - 0.5 * c;
    DerivRow { exact, lemma, taylor }
}

/// ∂_t F̄_N in its exact finite-N form together with the large-N forms.
#[derive(Clone, Debug, Serialize)]
pub struct TimeDerivative {
    /// ((N − 1)/2) E_{(i,j) ∈ [N]²} φ_N(c + Δ⟨σ_iσ_j⟩).
    pub exact: GibbsEstimate,
    /// ½E a log a − Δm̄²/2 − c/2 with a = c + Δ⟨σ_iσ_j⟩, i ≠ j.
    pub lemma: GibbsEstimate,
    /// ½(c + Δm̄²) log c + (c/2)Σ_{n=2}^{40}(−Δ/c)^n E⟨σ_iσ_j⟩^n/(n(n−1)) − c/2.
    pub taylor: GibbsEstimate,
    /// Paired SE of taylor − lemma.
    pub taylor_lemma_se: f64,
}

fn quenched(vals: &[f64], method: Method, n_samples: usize, warn: bool) -> GibbsEstimate {
    let (v, se) = mean_se(vals);
    GibbsEstimate {
        value: v,
        std_error: if vals.len() > 1 { se } else { 0.0 },
        n_samples,
        method,
        burn_in: 0,
        thinning: 1,
        tau_int: 0.0,
        mixing_warning: warn,
    }
}

fn time_derivative_from(params: &ModelParams, margs: &[Marginals]) -> TimeDerivative {
    let rows: Vec<DerivRow> = margs.iter().map(|m| deriv_row(params, m)).collect();
    let method = margs.first().map_or(Method::Exact, |m| m.method);
    let warn = margs.iter().any(|m| m.mixing_warning);
    let ns = margs.len();
    let pick = |f: fn(&DerivRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let diff: Vec<f64> = rows.iter().map(|r| r.taylor - r.lemma).collect();
    TimeDerivative {
        exact: quenched(&pick(|r| r.exact), method, ns, warn),
        lemma: quenched(&pick(|r| r.lemma), method, ns, warn),
        taylor: quenched(&pick(|r| r.taylor), method, ns, warn),
        taylor_lemma_se: mean_se(&diff).1,
    }
}

/// ∂_t F̄_N(t, μ) from Gibbs correlations, quenched over `opts.n_disorder` instances.
pub fn df_dt_gibbs(
    params: &ModelParams,
    t: f64,
    mu: &AtomicMeasure,
    method: &dyn GibbsMethod,
    opts: &EstimatorOptions,
) -> Result<TimeDerivative> {
    check_n(params)?;
    if !(t > 0.0) {
        return Err(Error::InvalidParams(format!("the time derivative needs t > 0 (got {t})")));
    }
    let margs = (0..opts.n_disorder)
        .into_par_iter()
        .map(|k| {
            let s = disorder_seed(opts.seed, k);
            let inst = sample_instance(params, t, mu, None, s)?;
            let pairs = pair_set_for(params.n, opts, s);
            method.marginals(&inst, &pairs, child_seed(s, tag::MCMC, 0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(time_derivative_from(params, &margs))
}

/// ∂_t F̄_N for one instance with given marginals (exact finite-N form).
pub fn df_dt_instance(params: &ModelParams, marg: &Marginals) -> f64 {
    deriv_row(params, marg).exact
}

/// F̄_N(t, μ) = F̄_N(0, μ) + ∫_0^t ∂_s F̄_N ds with Gauss-Legendre nodes.
pub fn free_energy_thermo(
    params: &ModelParams,
    t: f64,
    mu: &AtomicMeasure,
    method: &dyn GibbsMethod,
    opts: &EstimatorOptions,
) -> Result<FreeEnergyResult> {
    check_n(params)?;
    let f0 = free_energy_t0(params, mu, opts)?;
    let (mut integral, mut var, mut warn) = (0.0, 0.0, false);
    if t > 0.0 {
        for (idx, (node, w)) in gauss_legendre_on(opts.n_t_nodes, 0.0, t).into_iter().enumerate() {
            let node_opts = EstimatorOptions { seed: child_seed(opts.seed, tag::DISORDER, 1_000_000 + idx as u64), ..opts.clone() };
            let d = df_dt_gibbs(params, node, mu, method, &node_opts)?;
            integral += w * d.exact.value;
            var += (w * d.exact.std_error).powi(2);
            warn |= d.exact.mixing_warning;
        }
    }
    Ok(FreeEnergyResult {
        value: f0.value + integral,
        std_error: (f0.std_error.powi(2) + var).sqrt(),
        n: params.n,
        t,
        mu_mass: mu.mass(),
        method: "thermo_integration".into(),
        f0: f0.value,
        integral,
        n_disorder: opts.n_disorder,
        mixing_warning: warn,
    })
}

/// A free-energy estimator selectable by name.
pub trait FreeEnergyEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    fn estimate(&self, params: &ModelParams, t: f64, mu: &AtomicMeasure, opts: &EstimatorOptions) -> Result<FreeEnergyResult>;
}

pub struct ExactEstimator;

impl FreeEnergyEstimator for ExactEstimator {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn estimate(&self, params: &ModelParams, t: f64, mu: &AtomicMeasure, opts: &EstimatorOptions) -> Result<FreeEnergyResult> {
        free_energy_exact(params, t, mu, opts)
    }
}

pub struct ThermoIntegration {
    pub method: Box<dyn GibbsMethod>,
}

impl FreeEnergyEstimator for ThermoIntegration {
    fn name(&self) -> &'static str {
        "thermo_integration"
    }

    fn estimate(&self, params: &ModelParams, t: f64, mu: &AtomicMeasure, opts: &EstimatorOptions) -> Result<FreeEnergyResult> {
        free_energy_thermo(params, t, mu, self.method.as_ref(), opts)
    }
}

pub fn estimator_registry(method: Box<dyn GibbsMethod>) -> Registry<dyn FreeEnergyEstimator> {
    let mut r: Registry<dyn FreeEnergyEstimator> = Registry::new();
    r.register("exact", Box::new(ExactEstimator));
    r.register("thermo_integration", Box::new(ThermoIntegration { method }));
    r
}

#[derive(Clone, Debug, Serialize)]
pub struct MutualInformation {
    /// MI/N with the finite-N constant (1/N)E H(σ*).
    pub value: f64,
    pub std_error: f64,
    /// MI/N with the N → ∞ constant; differs from `value` by O(1/N).
    pub asymptotic: f64,
    pub constant: f64,
    pub asymptotic_constant: f64,
}

/// (1/N)E H(σ*): the expected log-likelihood of the data at the true signal.
pub fn signal_energy_per_site(params: &ModelParams, t: f64, mu: &AtomicMeasure) -> f64 {
    let n = params.n;
    let nf = n as f64;
    let (c, d, p) = (params.c, params.delta, params.p);
    let same = p * p + (1.0 - p) * (1.0 - p);
    // ordered pairs are uniform on [N]², so i = j with probability 1/N
    let q = 1.0 / nf + (1.0 - 1.0 / nf) * same;
    let edges = 0.5 * t * (nf - 1.0) * (q * phi_n(c + d, n) + (1.0 - q) * phi_n(c - d, n));
    let channel = nf * mu.integrate(|x| p * phi_n(c + d * x, n) + (1.0 - p) * phi_n(c - d * x, n));
    edges + channel
}

/// ½E(c + Δσ*_1σ*_2) log(c + Δσ*_1σ*_2) − c/2 − Δm̄²/2.
pub fn mi_constant_asymptotic(params: &ModelParams) -> f64 {
    let (c, d, p) = (params.c, params.delta, params.p);
    let q = p * p + (1.0 - p) * (1.0 - p);
    let m = params.m_bar();
    let xlogx = |a: f64| if a == 0.0 { 0.0 } else { a * a.ln() };
    0.5 * q * xlogx(c + d) + 0.5 * (1.0 - q) * xlogx(c - d) - 0.5 * c - 0.5 * d * m * m
}

/// MI/N = (1/N)E H(σ*) − F̄_N. The free energy must be for the unperturbed model.
pub fn mutual_information(params: &ModelParams, fe: &FreeEnergyResult, mu: &AtomicMeasure) -> MutualInformation {
    let constant = signal_energy_per_site(params, fe.t, mu);
    let asym = mi_constant_asymptotic(params);
    MutualInformation {
        value: constant - fe.value,
        std_error: fe.std_error,
        asymptotic: asym - fe.value,
        constant,
        asymptotic_constant: asym,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GateauxDensity {
    /// E_i[a log a + (N − a) log(1 − a/N)], a = c + Δ⟨σ_i⟩x.
    pub exact: GibbsEstimate,
    /// E_i a log a − c − Δm̄x.
    pub approximate: GibbsEstimate,
}

fn gateaux_row(params: &ModelParams, marg: &Marginals, x: f64) -> (f64, f64) {
    let n = params.n as f64;
    let (c, d) = (params.c, params.delta);
    let f_exact = |m: f64| {
        let a = c + d * m * x;
        a * a.ln() + (n - a) * (1.0 - a / n).ln()
    };
    let f_approx = |m: f64| {
        let a = c + d * m * x;
        a * a.ln()
    };
    let avg = |ms: &[f64], f: &dyn Fn(f64) -> f64| ms.iter().map(|m| f(*m)).sum::<f64>() / ms.len() as f64;
    let corrected = |f: &dyn Fn(f64) -> f64| {
        let full = avg(&marg.m, f);
        match &marg.halves {
            None => full,
            Some(h) => 2.0 * full - 0.5 * (avg(&h[0].0, f) + avg(&h[1].0, f)),
        }
    };
    (corrected(&f_exact), corrected(&f_approx) - c - d * params.m_bar() * x)
}

/// Gateaux derivative density of F̄_N(t, ·) at μ in the direction δ_x.
pub fn gateaux_density_gibbs(
    params: &ModelParams,
    t: f64,
    mu: &AtomicMeasure,
    x: f64,
    method: &dyn GibbsMethod,
    opts: &EstimatorOptions,
) -> Result<GateauxDensity> {
    check_n(params)?;
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::InvalidParams(format!("x = {x} outside [-1, 1]")));
    }
    let margs = (0..opts.n_disorder)
        .into_par_iter()
        .map(|k| {
            let s = disorder_seed(opts.seed, k);
            let inst = sample_instance(params, t, mu, None, s)?;
            method.marginals(&inst, &PairSet::None, child_seed(s, tag::MCMC, 0))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(f64, f64)> = margs.iter().map(|m| gateaux_row(params, m, x)).collect();
    let method_tag = margs.first().map_or(Method::Exact, |m| m.method);
    let warn = margs.iter().any(|m| m.mixing_warning);
    Ok(GateauxDensity {
        exact: quenched(&rows.iter().map(|r| r.0).collect::<Vec<_>>(), method_tag, margs.len(), warn),
        approximate: quenched(&rows.iter().map(|r| r.1).collect::<Vec<_>>(), method_tag, margs.len(), warn),
    })
}

/// Finite difference paired with the analytic derivative on the same disorder.
#[derive(Clone, Debug, Serialize)]
pub struct FdCheck {
    pub fd: f64,
    pub analytic: f64,
    /// Mean of fd − analytic over instances.
    pub diff: f64,
    /// Paired SE of the difference.
    pub se: f64,
    pub n_disorder: usize,
}

fn fd_summary(rows: &[(f64, f64)]) -> FdCheck {
    let fd: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let an: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let (d, se) = mean_se(&diff);
    FdCheck { fd: mean(&fd), analytic: mean(&an), diff: d, se, n_disorder: rows.len() }
}

/// Central difference (F(t+h) − F(t−h))/2h by enumeration, on coupled instances
/// (t − h, t, t + h) built by superposition, against ∂_t F̄_N at the middle one.
pub fn fd_time_check(params: &ModelParams, t: f64, mu: &AtomicMeasure, h: f64, opts: &EstimatorOptions) -> Result<FdCheck> {
    check_n(params)?;
    if !(t > h && h > 0.0) {
        return Err(Error::InvalidParams("need 0 < h < t".into()));
    }
    let rows = (0..opts.n_disorder)
        .into_par_iter()
        .map(|k| {
            let low = sample_instance(params, t - h, mu, None, disorder_seed(opts.seed, k))?;
            let mid = low.extend_time(h, 1)?;
            let up = mid.extend_time(h, 2)?;
            let fd = (log_z_per_site(&up, opts.cap)? - log_z_per_site(&low, opts.cap)?) / (2.0 * h);
            let marg = crate::inference::exact_marginals(&mid, &PairSet::All, opts.cap)?;
            Ok((fd, df_dt_instance(params, &marg)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fd_summary(&rows))
}

/// (F(μ + εδ_x) − F(μ))/ε by enumeration on coupled instances, against the
/// exact Gateaux density at μ + (ε/2)δ_x, where the difference quotient is
/// second-order accurate.
pub fn fd_gateaux_check(
    params: &ModelParams,
    t: f64,
    mu: &AtomicMeasure,
    x: f64,
    eps: f64,
    opts: &EstimatorOptions,
) -> Result<FdCheck> {
    check_n(params)?;
    let rows = (0..opts.n_disorder)
        .into_par_iter()
        .map(|k| {
            let base = sample_instance(params, t, mu, None, disorder_seed(opts.seed, k))?;
            let mid = base.extend_channel(x, 0.5 * eps, 1)?;
            let up = mid.extend_channel(x, 0.5 * eps, 2)?;
            let fd = (log_z_per_site(&up, opts.cap)? - log_z_per_site(&base, opts.cap)?) / eps;
            let marg = crate::inference::exact_marginals(&mid, &PairSet::None, opts.cap)?;
            Ok((fd, gateaux_row(params, &marg, x).0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fd_summary(&rows))
}

#[derive(Clone, Debug, Serialize)]
pub struct PoissonGap {
    pub n: usize,
    /// |F̄_N − F̄°_N|.
    pub gap: f64,
    pub se: f64,
    /// F̄_N − F̄°_N.
    pub signed: f64,
    pub poisson: f64,
    pub binomial: f64,
}

/// Poissonized versus original free energy on coupled instances.
pub fn poisson_gap(params: &ModelParams, opts: &EstimatorOptions) -> Result<PoissonGap> {
    check_n(params)?;
    let rows = (0..opts.n_disorder)
        .into_par_iter()
        .map(|k| {
            let (p, b) = sample_coupled_pair(params, 1.0, disorder_seed(opts.seed, k))?;
            Ok((log_z_per_site(&p, opts.cap)?, log_z_per_site(&b, opts.cap)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let (d, se) = mean_se(&diff);
    Ok(PoissonGap {
        n: params.n,
        gap: d.abs(),
        se,
        signed: d,
        poisson: mean(&rows.iter().map(|r| r.0).collect::<Vec<_>>()),
        binomial: mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::ExactGibbs;

    #[test]
    fn delta0_closed_form_value() {
        let p = ModelParams::new(10, 2.0, 0.0, 0.5).unwrap();
        assert!((free_energy_delta0(&p, 1.0) - (-0.17949)).abs() < 1e-4);
        assert!((free_energy_delta0(&p, 1.0) - free_energy_delta0_binomial(&p)).abs() < 1e-15);
    }

    #[test]
    fn t0_mu0_is_zero() {
        let p = ModelParams::new(8, 3.0, -1.0, 0.6).unwrap();
        let opts = EstimatorOptions { n_disorder: 3, ..Default::default() };
        assert!(free_energy_exact(&p, 0.0, &AtomicMeasure::zero(), &opts).unwrap().value.abs() < 1e-12);
        assert!(free_energy_t0(&p, &AtomicMeasure::zero(), &opts).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn factorized_t0_matches_enumeration() {
        let p = ModelParams::new(12, 3.0, -1.5, 0.7).unwrap();
        let mu = AtomicMeasure::new(vec![(0.5, 0.7), (-1.0, 0.4)]).unwrap();
        for s in 0..5 {
            let inst = sample_instance(&p, 0.0, &mu, None, s).unwrap();
            let a = log_z_t0_per_site(&inst).unwrap();
            let b = log_z_per_site(&inst, 22).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn delta0_derivative_collapses() {
        let p = ModelParams::new(10, 2.0, 0.0, 0.5).unwrap();
        let opts = EstimatorOptions { n_disorder: 4, ..Default::default() };
        let d = df_dt_gibbs(&p, 0.7, &AtomicMeasure::zero(), &ExactGibbs::default(), &opts).unwrap();
        let c = 2.0f64;
        assert!((d.lemma.value - (0.5 * c * c.ln() - 0.5 * c)).abs() < 1e-12);
        assert!((d.exact.value - 0.5 * 9.0 * phi_n(c, 10)).abs() < 1e-12);
    }

    #[test]
    fn mi_constants() {
        let p = ModelParams::new(50, 3.0, -2.0, 0.5).unwrap();
        assert!((mi_constant_asymptotic(&p) - (1.25 * 5f64.ln() - 1.5)).abs() < 1e-12);
        assert!((mi_constant_asymptotic(&p) - 0.51180).abs() < 1e-5);
        let z = ModelParams::new(10, 2.0, 0.0, 0.5).unwrap();
        assert!((signal_energy_per_site(&z, 1.0, &AtomicMeasure::zero()) - free_energy_delta0(&z, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn empty_hamiltonian_gateaux_density() {
        let p = ModelParams::new(10, 3.0, -1.5, 0.7).unwrap();
        let opts = EstimatorOptions { n_disorder: 2, ..Default::default() };
        let x = 0.6;
        let g = gateaux_density_gibbs(&p, 0.0, &AtomicMeasure::zero(), x, &ExactGibbs::default(), &opts).unwrap();
        let a = 3.0 - 1.5 * p.m_bar() * x;
        assert!((g.approximate.value - (a * a.ln() - 3.0 + 1.5 * p.m_bar() * x)).abs() < 1e-12);
    }
}

#[cfg(test)]
mod invariants {
    use super::*;
    use crate::inference::ExactGibbs;
    use crate::kernel::{density_bound, density_derivative_bound};
    use crate::limit::psi_gateaux_density;
    use proptest::prelude::*;

    fn opts(n_disorder: usize, seed: u64) -> EstimatorOptions {
        EstimatorOptions { n_disorder, seed, ..Default::default() }
    }

    #[test]
    fn free_energy_is_nondecreasing_in_time_and_mass() {
        let p = ModelParams::new(8, 3.0, -1.5, 0.5).unwrap();
        let mu = AtomicMeasure::dirac(0.5, 0.5);
        let f = |t: f64, m: &AtomicMeasure| free_energy_exact(&p, t, m, &opts(300, 31)).unwrap();
        let chain = [f(0.5, &mu), f(1.0, &mu), f(1.0, &mu.scaled(2.0))];
        for w in chain.windows(2) {
            let slack = 3.0 * (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt();
            assert!(w[1].value >= w[0].value - slack, "{} < {} − {slack}", w[1].value, w[0].value);
        }
    }

    #[test]
    fn thermo_integration_is_path_independent() {
        let p = ModelParams::new(8, 3.0, -1.5, 0.5).unwrap();
        let mu = AtomicMeasure::dirac(0.5, 0.5);
        let o = opts(150, 32);
        let g = ExactGibbs::default();
        let one = free_energy_thermo(&p, 1.0, &mu, &g, &o).unwrap();
        let half = free_energy_thermo(&p, 0.5, &mu, &g, &opts(150, 33)).unwrap();
        let (mut second, mut var) = (0.0, 0.0);
        for (idx, (node, w)) in gauss_legendre_on(o.n_t_nodes, 0.5, 1.0).into_iter().enumerate() {
            let d = df_dt_gibbs(&p, node, &mu, &g, &opts(150, 40 + idx as u64)).unwrap();
            second += w * d.exact.value;
            var += (w * d.exact.std_error).powi(2);
        }
        let two = half.value + second;
        let se = (one.std_error.powi(2) + half.std_error.powi(2) + var).sqrt();
        assert!((one.value - two).abs() <= 3.0 * se, "{} vs {two} (SE {se})", one.value);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn gateaux_density_respects_its_bounds(
            c in 0.5f64..4.0,
            r in -0.9f64..0.9,
            p in 0.1f64..0.9,
            y in -1.0f64..1.0,
            mass in 0.0f64..2.0,
            x in -0.99f64..0.99,
        ) {
            let params = ModelParams::limit(c, r * c, p).unwrap();
            let mu = AtomicMeasure::dirac(y, mass);
            let e = 1e-3;
            let d = |x: f64| psi_gateaux_density(&mu, x, &params, 4000, 7).unwrap();
            let (lo, mid, hi) = (d(x - e), d(x), d(x + e));
            prop_assert!(mid.value.abs() <= density_bound(&params) + 3.0 * mid.se);
            // same draws at both points, so the difference quotient carries no MC noise of order 1/e
            let slope = (hi.value - lo.value) / (2.0 * e);
            prop_assert!(slope.abs() <= density_derivative_bound(&params) * (1.0 + 1e-6), "slope {slope}");
        }
    }
}
