//! Posterior Gibbs averages: exact enumeration and heat-bath MCMC, multi-overlaps,
//! Nishimori checks and the perturbation diagnostics.

pub mod diagnostics;
pub mod exact;
pub mod mcmc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernel::ModelParams;
use crate::measures::AtomicMeasure;
use crate::model::{sample_instance, Instance, PerturbSpec, Spin};
use crate::registry::Registry;
use crate::rng::{child_seed, tag};

pub use diagnostics::*;
pub use exact::{exact_gibbs, exact_marginals, log_partition, ExactGibbs, DEFAULT_ENUMERATION_CAP};
pub use mcmc::{mcmc_gibbs, mcmc_gibbs_replicas, run_mcmc, Init, Mcmc, McmcOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Mcmc,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Mcmc => "mcmc",
        }
    }
}

/// A Gibbs or quenched average with its standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub method: Method,
    pub burn_in: usize,
    pub thinning: usize,
    pub tau_int: f64,
    pub mixing_warning: bool,
}

impl GibbsEstimate {
    pub fn exact(value: f64, n_samples: usize) -> Self {
        Self {
            value,
            std_error: 0.0,
            n_samples,
            method: Method::Exact,
            burn_in: 0,
            thinning: 1,
            tau_int: 0.0,
            mixing_warning: false,
        }
    }
}

/// Which two-point functions to accumulate.
#[derive(Clone, Debug, PartialEq)]
pub enum PairSet {
    None,
    /// The full N×N matrix, row-major, diagonal included.
    All,
    List(Vec<(u32, u32)>),
}

impl PairSet {
    pub fn len(&self, n: usize) -> usize {
        match self {
            PairSet::None => 0,
            PairSet::All => n * n,
            PairSet::List(v) => v.len(),
        }
    }

    pub fn is_empty(&self, n: usize) -> bool {
        self.len(n) == 0
    }

    pub(crate) fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            PairSet::None => {}
            PairSet::All => {
                for i in 0..n {
                    for j in 0..n {
                        f(i * n + j, i, j);
                    }
                }
            }
            PairSet::List(v) => {
                for (idx, &(i, j)) in v.iter().enumerate() {
                    f(idx, i as usize, j as usize);
                }
            }
        }
    }
}

/// One- and two-point Gibbs averages of one instance.
#[derive(Clone, Debug)]
pub struct Marginals {
    pub m: Vec<f64>,
    pub pairs: PairSet,
    pub corr: Vec<f64>,
    /// MCMC only: the same averages from two disjoint replica groups, so that
    /// products of brackets can be estimated without bias.
    pub halves: Option<[(Vec<f64>, Vec<f64>); 2]>,
    pub log_z: Option<f64>,
    pub method: Method,
    pub n_samples: usize,
    pub tau_int: f64,
    pub mixing_warning: bool,
}

impl Marginals {
    pub fn n(&self) -> usize {
        self.m.len()
    }

    /// Magnetizations from the two independent groups (both the full average for exact).
    pub fn m_halves(&self) -> (&[f64], &[f64]) {
        match &self.halves {
            Some(h) => (&h[0].0, &h[1].0),
            None => (&self.m, &self.m),
        }
    }

    pub fn corr_halves(&self) -> (&[f64], &[f64]) {
        match &self.halves {
            Some(h) => (&h[0].1, &h[1].1),
            None => (&self.corr, &self.corr),
        }
    }

    /// ⟨σ_iσ_j⟩ from a full matrix request.
    pub fn corr_full(&self, i: usize, j: usize) -> f64 {
        debug_assert!(matches!(self.pairs, PairSet::All));
        self.corr[i * self.n() + j]
    }

    /// Unbiased ⟨R_{1,2}⟩ = (1/N)Σ m_i².
    pub fn overlap12(&self) -> f64 {
        let (a, b) = self.m_halves();
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / self.n() as f64
    }

    /// ⟨R_{1,*}⟩ = (1/N)Σ m_i σ*_i.
    pub fn overlap_signal(&self, signal: &[Spin]) -> f64 {
        self.m.iter().zip(signal).map(|(m, s)| m * *s as f64).sum::<f64>() / self.n() as f64
    }

    /// Unbiased ⟨R_{1,2}²⟩ = (1/N²)Σ_{ij} ⟨σ_iσ_j⟩²; needs the full matrix.
    pub fn overlap12_sq(&self) -> f64 {
        let n = self.n() as f64;
        let (a, b) = self.corr_halves();
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (n * n)
    }
}

/// A posterior sampler or enumerator selectable by name.
pub trait GibbsMethod: Send + Sync {
    fn name(&self) -> &'static str;
    fn marginals(&self, inst: &Instance, pairs: &PairSet, seed: u64) -> Result<Marginals>;
    /// Gibbs average of a one-replica functional.
    fn gibbs(&self, inst: &Instance, f: &(dyn Fn(&[Spin]) -> f64 + Sync), seed: u64) -> Result<GibbsEstimate>;
}

pub fn gibbs_registry(cap: usize, mcmc: McmcOptions) -> Registry<dyn GibbsMethod> {
    let mut r: Registry<dyn GibbsMethod> = Registry::new();
    r.register("exact", Box::new(ExactGibbs { cap }));
    r.register("mcmc", Box::new(Mcmc { options: mcmc }));
    r
}

/// (1/N)Σ_i Π_ℓ σ_i^ℓ.
pub fn multi_overlap(replicas: &[&[Spin]]) -> f64 {
    assert!(!replicas.is_empty(), "multi-overlap needs at least one replica");
    let n = replicas[0].len();
    let mut acc = 0i64;
    for i in 0..n {
        acc += replicas.iter().map(|r| r[i] as i64).product::<i64>();
    }
    acc as f64 / n as f64
}

/// Disorder samples with their Gibbs marginals.
pub struct Ensemble {
    pub items: Vec<(Instance, Marginals)>,
}

#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub params: ModelParams,
    pub t: f64,
    pub mu: AtomicMeasure,
    pub perturb: Option<PerturbSpec>,
    pub n_disorder: usize,
    pub seed: u64,
}

/// Sample `n_disorder` instances in parallel and compute their marginals.
pub fn build_ensemble(spec: &EnsembleSpec, method: &dyn GibbsMethod, pairs: &PairSet) -> Result<Ensemble> {
    let items = (0..spec.n_disorder)
        .into_par_iter()
        .map(|k| {
            let s = child_seed(spec.seed, tag::DISORDER, k as u64);
            let inst = sample_instance(&spec.params, spec.t, &spec.mu, spec.perturb.as_ref(), s)?;
            let marg = method.marginals(&inst, pairs, child_seed(s, tag::MCMC, 0))?;
            Ok((inst, marg))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { items })
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn any_mixing_warning(&self) -> bool {
        self.items.iter().any(|(_, m)| m.mixing_warning)
    }
}
