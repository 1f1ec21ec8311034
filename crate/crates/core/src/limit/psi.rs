//! ψ(μ), its Gateaux density and the Γ map, through the law of the single-site
//! log-likelihood ratio D.
//!
//! For a root with planted sign s, the Poisson process Π_s(μ) has intensity
//! (c + Δsx)dμ(x). Writing c + Δσx = √((c+Δx)(c−Δx)) · exp(σℓ(x)) with
//! ℓ(x) = ½log((c+Δx)/(c−Δx)), the σ-integral becomes
//!
//!   Π √((c+Δx)(c−Δx)) · (p e^D + (1−p) e^{−D}),  D = −Δ∫x dμ + Σ_{x∈Π} ℓ(x).
//!
//! The first factor has a closed-form expectation, so only D is sampled.

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{h, ModelParams};
use crate::measures::AtomicMeasure;
use crate::rng::{stream, tag, Rng};
use crate::stats::{log_add_exp, Estimate};

/// Law of D under both planted signs. Monte Carlo laws have equal weights and
/// index-paired draws; enumerated laws carry exact probabilities.
#[derive(Clone, Debug)]
pub struct DLaw {
    pub plus: Vec<(f64, f64)>,
    pub minus: Vec<(f64, f64)>,
    pub paired: bool,
}

/// Per-measure quantities shared by the samplers.
pub(crate) struct Prepared {
    pub tilt: f64,
    /// ℓ(x) per atom.
    pub ell: Vec<f64>,
    /// Cumulative intensities (c + Δsx)μ{x} for s = +1 and s = −1.
    pub cum: [Vec<f64>; 2],
    pub rate: [f64; 2],
}

pub(crate) fn ell(x: f64, params: &ModelParams) -> f64 {
    0.5 * ((params.c + params.delta * x) / (params.c - params.delta * x)).ln()
}

fn check_measure(mu: &AtomicMeasure) -> Result<()> {
    for &(x, w) in &mu.atoms {
        if !(-1.0..=1.0).contains(&x) || !(w >= 0.0) || !w.is_finite() {
            return Err(Error::InvalidMeasure(format!("atom ({x}, {w}) is not a non-negative atom on [-1, 1]")));
        }
    }
    Ok(())
}

pub(crate) fn prepare(mu: &AtomicMeasure, params: &ModelParams) -> Result<Prepared> {
    params.validate()?;
    check_measure(mu)?;
    let ell_v: Vec<f64> = mu.atoms.iter().map(|&(x, _)| ell(x, params)).collect();
    let mut cum = [Vec::with_capacity(mu.atoms.len()), Vec::with_capacity(mu.atoms.len())];
    let mut rate = [0.0; 2];
    for (k, s) in [1.0, -1.0].into_iter().enumerate() {
        for &(x, w) in &mu.atoms {
            rate[k] += (params.c + params.delta * s * x) * w;
            cum[k].push(rate[k]);
        }
    }
    Ok(Prepared { tilt: -params.delta * mu.first_moment(), ell: ell_v, cum, rate })
}

/// Inverse-CDF Poisson draw, so that nearby rates give the same count for the
/// same uniform. Large rates fall back to the library sampler.
fn poisson_count(rate: f64, rng: &mut Rng) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    if rate > 30.0 {
        return Poisson::new(rate).map(|d| d.sample(rng) as u64).unwrap_or(0);
    }
    let u: f64 = rng.random();
    let mut pk = (-rate).exp();
    let mut cdf = pk;
    let mut k = 0u64;
    while u > cdf && k < 10_000 {
        k += 1;
        pk *= rate / k as f64;
        cdf += pk;
    }
    k
}

impl Prepared {
    /// One draw of D for planted sign index `k` (0 for +, 1 for −).
    pub(crate) fn draw(&self, k: usize, rng: &mut Rng) -> f64 {
        let n = poisson_count(self.rate[k], rng);
        let cum = &self.cum[k];
        let mut d = self.tilt;
        for _ in 0..n {
            let u = rng.random::<f64>() * self.rate[k];
            let idx = cum.partition_point(|c| *c <= u).min(cum.len() - 1);
            d += self.ell[idx];
        }
        d
    }
}

/// `n` paired Monte Carlo draws of D. Draw i uses its own stream, so laws of
/// nearby measures share random numbers.
pub fn d_law_mc(mu: &AtomicMeasure, params: &ModelParams, n: usize, seed: u64) -> Result<DLaw> {
    let prep = prepare(mu, params)?;
    let w = 1.0 / n as f64;
    let draws: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, tag::PSI, i as u64);
            (prep.draw(0, &mut rng), prep.draw(1, &mut rng))
        })
        .collect();
    Ok(DLaw {
        plus: draws.iter().map(|d| (w, d.0)).collect(),
        minus: draws.iter().map(|d| (w, d.1)).collect(),
        paired: true,
    })
}

fn poisson_pmf_table(rate: f64) -> Vec<f64> {
    let mut out = vec![(-rate).exp()];
    let mut cdf = out[0];
    let mut k = 0usize;
    while (cdf < 1.0 - 1e-16 || (k as f64) < rate) && k < 2000 {
        k += 1;
        let next = out[k - 1] * rate / k as f64;
        out.push(next);
        cdf += next;
    }
    out
}

/// Exact law of D by summing over Poisson multiplicities of every atom with
/// ℓ ≠ 0, truncated where the tail mass drops below 1e-16.
pub fn d_law_enumerate(mu: &AtomicMeasure, params: &ModelParams, max_support: usize) -> Result<DLaw> {
    let prep = prepare(&mu.normal_form(), params)?;
    let mu = mu.normal_form();
    let mut out: [Vec<(f64, f64)>; 2] = [Vec::new(), Vec::new()];
    for (k, s) in [1.0, -1.0].into_iter().enumerate() {
        let mut law = vec![(1.0, prep.tilt)];
        for (a, &(x, w)) in mu.atoms.iter().enumerate() {
            let l = prep.ell[a];
            if l == 0.0 || w == 0.0 {
                continue;
            }
            let pmf = poisson_pmf_table((params.c + params.delta * s * x) * w);
            if law.len() * pmf.len() > max_support {
                return Err(Error::Unsupported(format!(
                    "enumerating ψ needs more than {max_support} support points; use the Monte Carlo evaluator"
                )));
            }
            let mut next = Vec::with_capacity(law.len() * pmf.len());
            for &(pw, d) in &law {
                for (m, q) in pmf.iter().enumerate() {
                    next.push((pw * q, d + m as f64 * l));
                }
            }
            law = next;
        }
        out[k] = law;
    }
    let [plus, minus] = out;
    Ok(DLaw { plus, minus, paired: false })
}

/// log(p e^D + (1 − p) e^{−D}).
#[inline]
pub fn log_tilt(d: f64, p: f64) -> f64 {
    if d == 0.0 {
        // log(p + (1 − p)), kept exact so that an empty process gives exactly 0
        return 0.0;
    }
    log_add_exp(p.ln() + d, (1.0 - p).ln() - d)
}

/// Posterior mean ⟨σ⟩ = (m̄ + tanh D)/(1 + m̄ tanh D).
#[inline]
pub fn posterior_mean(d: f64, m_bar: f64) -> f64 {
    let t = d.tanh();
    (m_bar + t) / (1.0 + m_bar * t)
}

impl DLaw {
    /// p E_+ f(D) + (1 − p) E_− f(D), with the SE of paired Monte Carlo draws.
    pub fn expect(&self, p: f64, f: impl Fn(f64) -> f64 + Sync) -> Estimate {
        let value = p * self.plus.iter().map(|(w, d)| w * f(*d)).sum::<f64>()
            + (1.0 - p) * self.minus.iter().map(|(w, d)| w * f(*d)).sum::<f64>();
        if !self.paired {
            return Estimate::exact(value);
        }
        let n = self.plus.len();
        let var = self
            .plus
            .iter()
            .zip(&self.minus)
            .map(|(a, b)| {
                let y = p * f(a.1) + (1.0 - p) * f(b.1) - value;
                y * y
            })
            .sum::<f64>()
            / (n.max(2) - 1) as f64;
        Estimate { value, se: (var / n as f64).sqrt() }
    }

    /// Per-draw combined values, for paired comparisons between measures.
    pub fn paired_values(&self, p: f64, f: impl Fn(f64) -> f64) -> Option<Vec<f64>> {
        self.paired.then(|| self.plus.iter().zip(&self.minus).map(|(a, b)| p * f(a.1) + (1.0 - p) * f(b.1)).collect())
    }

    /// Law of the posterior mean: the stratified form of Γ(μ).
    pub fn gamma_measure(&self, params: &ModelParams) -> AtomicMeasure {
        let (p, mb) = (params.p, params.m_bar());
        let atoms = self
            .plus
            .iter()
            .map(|(w, d)| (posterior_mean(*d, mb), p * w))
            .chain(self.minus.iter().map(|(w, d)| (posterior_mean(*d, mb), (1.0 - p) * w)))
            .collect();
        AtomicMeasure { atoms }
    }
}

/// Closed-form part of ψ: −μ[−1,1]c + Σ_s P*(s) ∫φ(x)(c + Δsx)dμ with
/// φ(x) = ½log((c+Δx)(c−Δx)).
pub fn psi_constant(mu: &AtomicMeasure, params: &ModelParams) -> f64 {
    let (c, d) = (params.c, params.delta);
    let phi = |x: f64| 0.5 * ((c + d * x).ln() + (c - d * x).ln());
    // Σ_s P*(s)(c + Δsx) = c + Δm̄x
    -mu.mass() * c + mu.integrate(|x| phi(x) * (c + d * params.m_bar() * x))
}

pub fn psi_from_law(law: &DLaw, mu: &AtomicMeasure, params: &ModelParams) -> Estimate {
    let e = law.expect(params.p, |d| log_tilt(d, params.p));
    Estimate { value: psi_constant(mu, params) + e.value, se: e.se }
}

/// D_μψ(μ, x) = E h(⟨σ⟩x) − c − Δm̄x at each x, with h(z) = (c + Δz)log(c + Δz).
pub fn gateaux_from_law(law: &DLaw, xs: &[f64], params: &ModelParams) -> Vec<Estimate> {
    let mb = params.m_bar();
    xs.iter()
        .map(|&x| {
            let e = law.expect(params.p, |d| h(posterior_mean(d, mb) * x, params));
            Estimate { value: e.value - params.c - params.delta * mb * x, se: e.se }
        })
        .collect()
}

/// A way of computing the law of D.
pub trait PsiEvaluator: Send + Sync {
    fn name(&self) -> &'static str;
    fn law(&self, mu: &AtomicMeasure, params: &ModelParams) -> Result<DLaw>;

    fn psi(&self, mu: &AtomicMeasure, params: &ModelParams) -> Result<Estimate> {
        Ok(psi_from_law(&self.law(mu, params)?, mu, params))
    }

    fn gateaux(&self, mu: &AtomicMeasure, xs: &[f64], params: &ModelParams) -> Result<Vec<Estimate>> {
        if let Some(x) = xs.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
            return Err(Error::InvalidParams(format!("x = {x} outside [-1, 1]")));
        }
        Ok(gateaux_from_law(&self.law(mu, params)?, xs, params))
    }
}

#[derive(Clone, Debug)]
pub struct MonteCarloPsi {
    pub n_mc: usize,
    pub seed: u64,
}

impl PsiEvaluator for MonteCarloPsi {
    fn name(&self) -> &'static str {
        "mc"
    }

    fn law(&self, mu: &AtomicMeasure, params: &ModelParams) -> Result<DLaw> {
        if self.n_mc < 2 {
            return Err(Error::InvalidParams("n_mc must be at least 2".into()));
        }
        d_law_mc(mu, params, self.n_mc, self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct EnumeratePsi {
    pub max_support: usize,
}

impl Default for EnumeratePsi {
    fn default() -> Self {
        Self { max_support: 4_000_000 }
    }
}

impl PsiEvaluator for EnumeratePsi {
    fn name(&self) -> &'static str {
        "enumerate"
    }

    fn law(&self, mu: &AtomicMeasure, params: &ModelParams) -> Result<DLaw> {
        d_law_enumerate(mu, params, self.max_support)
    }
}

/// ψ(μ) by Monte Carlo.
pub fn psi(mu: &AtomicMeasure, params: &ModelParams, n_mc: usize, seed: u64) -> Result<Estimate> {
    MonteCarloPsi { n_mc, seed }.psi(mu, params)
}

/// D_μψ(μ, x) by Monte Carlo.
pub fn psi_gateaux_density(mu: &AtomicMeasure, x: f64, params: &ModelParams, n_mc: usize, seed: u64) -> Result<Estimate> {
    Ok(MonteCarloPsi { n_mc, seed }.gateaux(mu, &[x], params)?[0])
}

/// Γ(μ): i.i.d. draws of the root posterior mean, with σ* ~ P* drawn per
/// sample. Equal-weight atoms, or binned onto D_K when `bin` is given.
pub fn gamma_map(mu: &AtomicMeasure, params: &ModelParams, n_samples: usize, seed: u64, bin: Option<u32>) -> Result<AtomicMeasure> {
    if n_samples == 0 {
        return Err(Error::InvalidParams("n_samples must be positive".into()));
    }
    let prep = prepare(mu, params)?;
    let mb = params.m_bar();
    let w = 1.0 / n_samples as f64;
    let atoms: Vec<(f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, tag::GAMMA, i as u64);
            let k = if rng.random::<f64>() < params.p { 0 } else { 1 };
            (posterior_mean(prep.draw(k, &mut rng), mb), w)
        })
        .collect();
    let m = AtomicMeasure { atoms };
    Ok(match bin {
        Some(k) => crate::measures::bin_to_grid(&m, k),
        None => m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(c: f64, d: f64, p: f64) -> ModelParams {
        ModelParams::limit(c, d, p).unwrap()
    }

    #[test]
    fn zero_measure_gives_zero_and_prior_mean() {
        let p = params(3.0, -2.0, 0.7);
        let e = psi(&AtomicMeasure::zero(), &p, 100, 1).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.se, 0.0);
        let g = gamma_map(&AtomicMeasure::zero(), &p, 50, 1, None).unwrap();
        assert!(g.atoms.iter().all(|(x, _)| *x == p.m_bar()));
    }

    #[test]
    fn dirac_at_zero() {
        let p = params(3.0, -1.0, 0.6);
        let e = psi(&AtomicMeasure::dirac(0.0, 1.0), &p, 1000, 2).unwrap();
        assert!((e.value - (-3.0 + 3.0 * 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn enumeration_matches_monte_carlo() {
        let p = params(3.0, -1.5, 0.7);
        let mu = AtomicMeasure::new(vec![(-0.5, 0.4), (1.0, 0.3)]).unwrap();
        let ex = EnumeratePsi::default().psi(&mu, &p).unwrap();
        let mc = psi(&mu, &p, 200_000, 3).unwrap();
        assert!((ex.value - mc.value).abs() <= 4.0 * mc.se, "{ex:?} {mc:?}");
        let gx = EnumeratePsi::default().gateaux(&mu, &[0.3], &p).unwrap()[0];
        let gm = psi_gateaux_density(&mu, 0.3, &p, 200_000, 4).unwrap();
        assert!((gx.value - gm.value).abs() <= 4.0 * gm.se, "{gx:?} {gm:?}");
    }

    #[test]
    fn stratified_gamma_has_prior_mean() {
        let p = params(3.0, -1.5, 0.7);
        let mu = AtomicMeasure::new(vec![(-0.5, 0.8), (0.75, 0.6)]).unwrap();
        let law = EnumeratePsi::default().law(&mu, &p).unwrap();
        let g = law.gamma_measure(&p);
        assert!((g.mass() - 1.0).abs() < 1e-12);
        assert!((g.first_moment() - p.m_bar()).abs() < 1e-12);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gamma_is_a_probability_measure_on_the_interval(
            c in 0.5f64..4.0,
            r in -0.95f64..0.95,
            p in 0.05f64..0.95,
            atoms in prop::collection::vec((-1.0f64..=1.0, 0.0f64..1.5), 0..4),
            seed in any::<u64>(),
        ) {
            let params = ModelParams::limit(c, r * c, p).unwrap();
            let mu = AtomicMeasure::new(atoms).unwrap();
            let g = gamma_map(&mu, &params, 500, seed, None).unwrap();
            prop_assert!(g.atoms.iter().all(|(x, w)| (-1.0..=1.0).contains(x) && *w > 0.0));
            prop_assert!((g.mass() - 1.0).abs() <= 1e-9);
        }
    }
}
