//! Heat-bath (Glauber) sampling of the posterior with independent replicas.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Instance, IsingForm, Spin};
use crate::rng::{stream, tag, Rng};
use crate::stats::batch_means;

use super::exact::posterior_form;
use super::{GibbsEstimate, GibbsMethod, Marginals, Method, PairSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Start at σ*. Under the Nishimori identity σ* is a draw from the posterior
    /// averaged over disorder, so this start is already in equilibrium.
    Planted,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcOptions {
    pub n_sweeps: usize,
    pub burn_in: usize,
    pub n_replicas: usize,
    pub thinning: usize,
    pub n_batches: usize,
    pub init: Init,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self { n_sweeps: 4000, burn_in: 500, n_replicas: 4, thinning: 1, n_batches: 50, init: Init::Planted }
    }
}

impl McmcOptions {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.n_sweeps <= self.burn_in {
            v.push(format!("n_sweeps ({}) must exceed burn_in ({})", self.n_sweeps, self.burn_in));
        }
        if self.n_replicas == 0 {
            v.push("n_replicas must be positive".into());
        }
        if self.thinning == 0 {
            v.push("thinning must be positive".into());
        }
        if self.n_batches < 20 {
            v.push(format!("n_batches must be at least 20 (got {})", self.n_batches));
        }
        if self.n_sweeps > self.burn_in && (self.n_sweeps - self.burn_in) / self.thinning.max(1) < self.n_batches {
            v.push("fewer retained samples than batches".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(v.join("; ")))
        }
    }

    pub fn n_kept(&self) -> usize {
        (self.n_sweeps - self.burn_in) / self.thinning
    }
}

struct Chains<'a> {
    form: &'a IsingForm,
    sigma: Vec<Vec<Spin>>,
    local: Vec<Vec<f64>>,
    rngs: Vec<Rng>,
}

impl<'a> Chains<'a> {
    fn new(form: &'a IsingForm, inst: &Instance, opts: &McmcOptions, seed: u64) -> Self {
        let n = form.n;
        let mut rngs: Vec<Rng> = (0..opts.n_replicas).map(|r| stream(seed, tag::MCMC, r as u64)).collect();
        let sigma: Vec<Vec<Spin>> = rngs
            .iter_mut()
            .map(|rng| match opts.init {
                Init::Planted => inst.signal.spins.clone(),
                Init::Random => (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect(),
            })
            .collect();
        let local = sigma.iter().map(|s| (0..n).map(|i| form.local(i, s)).collect()).collect();
        Self { form, sigma, local, rngs }
    }

    fn sweep(&mut self) {
        let n = self.form.n;
        for r in 0..self.sigma.len() {
            let (sigma, local, rng) = (&mut self.sigma[r], &mut self.local[r], &mut self.rngs[r]);
            for i in 0..n {
                // P(σ_i = +1) = e^{L}/(e^{L} + e^{−L}); the prior is part of the field
                let p_up = 1.0 / (1.0 + (-2.0 * local[i]).exp());
                let new: Spin = if rng.random::<f64>() < p_up { 1 } else { -1 };
                if new != sigma[i] {
                    sigma[i] = new;
                    let delta = 2.0 * new as f64;
                    let row = &self.form.coupling[i * n..(i + 1) * n];
                    for (l, j) in local.iter_mut().zip(row) {
                        *l += j * delta;
                    }
                }
            }
        }
    }
}

/// Run the chains and call `observe` with all replicas after every retained sweep.
pub fn run_mcmc<F: FnMut(&[Vec<Spin>])>(inst: &Instance, opts: &McmcOptions, seed: u64, mut observe: F) -> Result<()> {
    opts.validate()?;
    let form = posterior_form(inst)?;
    let mut chains = Chains::new(&form, inst, opts, seed);
    for s in 0..opts.n_sweeps {
        chains.sweep();
        if s >= opts.burn_in && (s - opts.burn_in).is_multiple_of(opts.thinning) {
            observe(&chains.sigma);
        }
    }
    Ok(())
}

fn estimate_from_trace(trace: &[f64], opts: &McmcOptions) -> GibbsEstimate {
    let bm = batch_means(trace, opts.n_batches);
    GibbsEstimate {
        value: bm.mean,
        std_error: bm.se,
        n_samples: trace.len() * opts.n_replicas,
        method: Method::Mcmc,
        burn_in: opts.burn_in,
        thinning: opts.thinning,
        tau_int: bm.tau_int,
        mixing_warning: bm.tau_int > trace.len() as f64 / 50.0,
    }
}

/// ⟨f⟩ for a one-replica functional, averaged over replicas; SE by batch means.
pub fn mcmc_gibbs(inst: &Instance, f: &dyn Fn(&[Spin]) -> f64, opts: &McmcOptions, seed: u64) -> Result<GibbsEstimate> {
    let mut trace = Vec::with_capacity(opts.n_kept());
    run_mcmc(inst, opts, seed, |reps| {
        trace.push(reps.iter().map(|s| f(s)).sum::<f64>() / reps.len() as f64);
    })?;
    Ok(estimate_from_trace(&trace, opts))
}

/// ⟨f(σ¹, …, σⁿ)⟩ where the replicas are the independent chains.
pub fn mcmc_gibbs_replicas(
    inst: &Instance,
    f: &dyn Fn(&[&[Spin]]) -> f64,
    opts: &McmcOptions,
    seed: u64,
) -> Result<GibbsEstimate> {
    let mut trace = Vec::with_capacity(opts.n_kept());
    run_mcmc(inst, opts, seed, |reps| {
        let views: Vec<&[Spin]> = reps.iter().map(|r| r.as_slice()).collect();
        trace.push(f(&views));
    })?;
    Ok(estimate_from_trace(&trace, opts))
}

/// Marginals by MCMC; replicas are split into two groups for unbiased products.
pub fn mcmc_marginals(inst: &Instance, pairs: &PairSet, opts: &McmcOptions, seed: u64) -> Result<Marginals> {
    let n = inst.n();
    let np = pairs.len(n);
    let form = posterior_form(inst)?;
    let n_rep = opts.n_replicas;
    let split = n_rep.div_ceil(2);
    let mut m = [vec![0.0; n], vec![0.0; n]];
    let mut c = [vec![0.0; np], vec![0.0; np]];
    let mut counts = [0usize; 2];
    let mut trace = Vec::with_capacity(opts.n_kept());
    run_mcmc(inst, opts, seed, |reps| {
        let mut energy = 0.0;
        for (r, s) in reps.iter().enumerate() {
            // with one replica both groups see it, and products fall back to the same chain
            let groups: &[usize] = if n_rep == 1 { &[0, 1] } else if r < split { &[0] } else { &[1] };
            for &g in groups {
                for (acc, x) in m[g].iter_mut().zip(s) {
                    *acc += *x as f64;
                }
                if np > 0 {
                    let cg = &mut c[g];
                    pairs.for_each(n, |idx, i, j| cg[idx] += (s[i] * s[j]) as f64);
                }
                counts[g] += 1;
            }
            energy += form.energy(s);
        }
        trace.push(energy / (reps.len() * n) as f64);
    })?;
    let scale = |v: &mut Vec<f64>, k: usize| v.iter_mut().for_each(|x| *x /= k as f64);
    for g in 0..2 {
        scale(&mut m[g], counts[g]);
        scale(&mut c[g], counts[g]);
    }
    let (wa, wb) = if n_rep == 1 { (0.5, 0.5) } else { (split as f64 / n_rep as f64, (n_rep - split) as f64 / n_rep as f64) };
    let full_m: Vec<f64> = m[0].iter().zip(&m[1]).map(|(a, b)| wa * a + wb * b).collect();
    let full_c: Vec<f64> = c[0].iter().zip(&c[1]).map(|(a, b)| wa * a + wb * b).collect();
    let bm = batch_means(&trace, opts.n_batches);
    let [m0, m1] = m;
    let [c0, c1] = c;
    Ok(Marginals {
        m: full_m,
        pairs: pairs.clone(),
        corr: full_c,
        halves: Some([(m0, c0), (m1, c1)]),
        log_z: None,
        method: Method::Mcmc,
        n_samples: trace.len() * n_rep,
        tau_int: bm.tau_int,
        mixing_warning: bm.tau_int > trace.len() as f64 / 50.0,
    })
}

pub struct Mcmc {
    pub options: McmcOptions,
}

impl GibbsMethod for Mcmc {
    fn name(&self) -> &'static str {
        "mcmc"
    }

    fn marginals(&self, inst: &Instance, pairs: &PairSet, seed: u64) -> Result<Marginals> {
        mcmc_marginals(inst, pairs, &self.options, seed)
    }

    fn gibbs(&self, inst: &Instance, f: &(dyn Fn(&[Spin]) -> f64 + Sync), seed: u64) -> Result<GibbsEstimate> {
        mcmc_gibbs(inst, f, &self.options, seed)
    }
}
