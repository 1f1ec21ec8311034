//! Exact Gibbs averages by Gray-code enumeration of all 2^N configurations.

use crate::error::{Error, Result};
use crate::model::{Instance, IsingForm, Spin};

use super::{GibbsEstimate, GibbsMethod, Marginals, Method, PairSet};

pub const DEFAULT_ENUMERATION_CAP: usize = 22;

/// Steps between exact recomputations of the running log-weight.
const RESYNC: u64 = 4096;
/// Partial sums are flushed into the totals at this period.
const CHUNK: u64 = 4096;

/// H(σ) + log P*(σ) as one Ising form: the prior adds the field ½log(p/(1−p))
/// and the constant (N/2)log(p(1−p)).
pub fn posterior_form(inst: &Instance) -> Result<IsingForm> {
    let mut form = IsingForm::compile(inst)?;
    let p = inst.params.p;
    let hp = 0.5 * (p / (1.0 - p)).ln();
    for h in form.field.iter_mut() {
        *h += hp;
    }
    form.constant += 0.5 * inst.n() as f64 * (p * (1.0 - p)).ln();
    Ok(form)
}

fn check_cap(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        return Err(Error::EnumerationCap { n, cap });
    }
    Ok(())
}

/// Visit every configuration with its log-weight, in Gray-code order.
pub fn gray_walk<F: FnMut(&[Spin], f64)>(form: &IsingForm, mut visit: F) {
    let n = form.n;
    let mut sigma: Vec<Spin> = vec![-1; n];
    let mut local: Vec<f64> = (0..n).map(|i| form.local(i, &sigma)).collect();
    let mut w = form.energy(&sigma);
    visit(&sigma, w);
    let total: u64 = 1u64 << n;
    for step in 1..total {
        let i = step.trailing_zeros() as usize;
        let old = sigma[i] as f64;
        // flipping σ_i changes the weight by −2σ_i L_i
        w -= 2.0 * old * local[i];
        sigma[i] = -sigma[i];
        let row = &form.coupling[i * n..(i + 1) * n];
        let delta = -2.0 * old;
        for (l, j) in local.iter_mut().zip(row) {
            *l += j * delta;
        }
        if step % RESYNC == 0 {
            w = form.energy(&sigma);
            for (k, l) in local.iter_mut().enumerate() {
                *l = form.local(k, &sigma);
            }
        }
        visit(&sigma, w);
    }
}

fn max_weight(form: &IsingForm) -> f64 {
    let mut best = f64::NEG_INFINITY;
    gray_walk(form, |_, w| best = best.max(w));
    best
}

/// log Z with Z = Σ_σ exp(H(σ)) P*(σ).
pub fn log_partition(inst: &Instance, cap: usize) -> Result<f64> {
    check_cap(inst.n(), cap)?;
    let form = posterior_form(inst)?;
    let top = max_weight(&form);
    let (mut total, mut part, mut count) = (0.0, 0.0, 0u64);
    gray_walk(&form, |_, w| {
        part += (w - top).exp();
        count += 1;
        if count % CHUNK == 0 {
            total += part;
            part = 0.0;
        }
    });
    Ok(top + (total + part).ln())
}

/// Exact magnetizations, requested correlations and log Z.
pub fn exact_marginals(inst: &Instance, pairs: &PairSet, cap: usize) -> Result<Marginals> {
    let n = inst.n();
    check_cap(n, cap)?;
    let form = posterior_form(inst)?;
    let top = max_weight(&form);
    let np = pairs.len(n);
    let mut z = (0.0, 0.0);
    let mut m = (vec![0.0; n], vec![0.0; n]);
    let mut c = (vec![0.0; np], vec![0.0; np]);
    let mut count = 0u64;
    gray_walk(&form, |sigma, w| {
        let wt = (w - top).exp();
        z.1 += wt;
        for (acc, s) in m.1.iter_mut().zip(sigma) {
            *acc += wt * *s as f64;
        }
        if np > 0 {
            pairs.for_each(n, |idx, i, j| {
                c.1[idx] += wt * (sigma[i] * sigma[j]) as f64;
            });
        }
        count += 1;
        if count.is_multiple_of(CHUNK) {
            z.0 += z.1;
            z.1 = 0.0;
            for (a, b) in m.0.iter_mut().zip(m.1.iter_mut()) {
                *a += *b;
                *b = 0.0;
            }
            for (a, b) in c.0.iter_mut().zip(c.1.iter_mut()) {
                *a += *b;
                *b = 0.0;
            }
        }
    });
    let zt = z.0 + z.1;
    let mag: Vec<f64> = m.0.iter().zip(&m.1).map(|(a, b)| (a + b) / zt).collect();
    let corr: Vec<f64> = c.0.iter().zip(&c.1).map(|(a, b)| (a + b) / zt).collect();
    Ok(Marginals {
        m: mag,
        pairs: pairs.clone(),
        corr,
        halves: None,
        log_z: Some(top + zt.ln()),
        method: Method::Exact,
        n_samples: 1usize << n,
        tau_int: 0.0,
        mixing_warning: false,
    })
}

/// Exact ⟨f⟩ for a one-replica functional.
pub fn exact_gibbs(inst: &Instance, f: &dyn Fn(&[Spin]) -> f64, cap: usize) -> Result<GibbsEstimate> {
    let n = inst.n();
    check_cap(n, cap)?;
    let form = posterior_form(inst)?;
    let top = max_weight(&form);
    let (mut z, mut acc) = (0.0, 0.0);
    gray_walk(&form, |sigma, w| {
        let wt = (w - top).exp();
        z += wt;
        acc += wt * f(sigma);
    });
    Ok(GibbsEstimate::exact(acc / z, 1usize << n))
}

pub struct ExactGibbs {
    pub cap: usize,
}

impl Default for ExactGibbs {
    fn default() -> Self {
        Self { cap: DEFAULT_ENUMERATION_CAP }
    }
}

impl GibbsMethod for ExactGibbs {
    fn name(&self) -> &'static str {
        "exact"
    }

    fn marginals(&self, inst: &Instance, pairs: &PairSet, _seed: u64) -> Result<Marginals> {
        exact_marginals(inst, pairs, self.cap)
    }

    fn gibbs(&self, inst: &Instance, f: &(dyn Fn(&[Spin]) -> f64 + Sync), _seed: u64) -> Result<GibbsEstimate> {
        exact_gibbs(inst, f, self.cap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::ModelParams;
    use crate::measures::AtomicMeasure;
    use crate::model::{hamiltonian, log_prior, sample_instance};

    /// Plain loop over bit patterns, summing exp(H + log P*) directly.
    fn brute(inst: &Instance) -> (f64, Vec<f64>) {
        let n = inst.n();
        let mut ws = Vec::new();
        let mut cfgs = Vec::new();
        for bits in 0..(1u32 << n) {
            let s: Vec<Spin> = (0..n).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect();
            ws.push(hamiltonian(&s, inst).unwrap() + log_prior(&s, inst.params.p));
            cfgs.push(s);
        }
        let top = ws.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = ws.iter().map(|w| (w - top).exp()).sum();
        let m = (0..n)
            .map(|i| ws.iter().zip(&cfgs).map(|(w, s)| (w - top).exp() * s[i] as f64).sum::<f64>() / z)
            .collect();
        (top + z.ln(), m)
    }

    #[test]
    fn matches_brute_force() {
        let params = ModelParams::new(9, 3.0, -1.5, 0.7).unwrap();
        let mu = AtomicMeasure::new(vec![(0.5, 0.5)]).unwrap();
        let inst = sample_instance(&params, 1.0, &mu, None, 3).unwrap();
        let (lz, m) = brute(&inst);
        let marg = exact_marginals(&inst, &PairSet::All, 22).unwrap();
        assert!((marg.log_z.unwrap() - lz).abs() < 1e-10);
        assert!((log_partition(&inst, 22).unwrap() - lz).abs() < 1e-10);
        for i in 0..9 {
            assert!((marg.m[i] - m[i]).abs() < 1e-10);
            assert!((marg.corr_full(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_hamiltonian_gives_prior() {
        let params = ModelParams::new(6, 2.0, -1.0, 0.8).unwrap();
        let inst = sample_instance(&params, 0.0, &AtomicMeasure::zero(), None, 1).unwrap();
        let mbar = params.m_bar();
        let e = exact_gibbs(&inst, &|s| s[0] as f64, 22).unwrap();
        assert!((e.value - mbar).abs() < 1e-12);
        assert_eq!(e.std_error, 0.0);
        let marg = exact_marginals(&inst, &PairSet::All, 22).unwrap();
        assert!((marg.corr_full(0, 1) - mbar * mbar).abs() < 1e-12);
        assert!(marg.log_z.unwrap().abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let params = ModelParams::new(24, 2.0, -1.0, 0.5).unwrap();
        let inst = sample_instance(&params, 0.1, &AtomicMeasure::zero(), None, 1).unwrap();
        assert!(matches!(log_partition(&inst, 22), Err(Error::EnumerationCap { n: 24, cap: 22 })));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::inference::multi_overlap;
    use crate::kernel::ModelParams;
    use crate::measures::AtomicMeasure;
    use crate::model::{sample_instance, ChannelData, Edge, EdgeList, Signal};
    use proptest::prelude::*;

    /// Relabel site i as perm[i] in the signal, the edges and the channel.
    fn relabel(inst: &Instance, perm: &[usize]) -> Instance {
        let n = perm.len();
        let mut spins = vec![0 as Spin; n];
        for i in 0..n {
            spins[perm[i]] = inst.signal.spins[i];
        }
        let edges = inst
            .edges
            .edges
            .iter()
            .map(|e| Edge { i: perm[e.i as usize] as u32, j: perm[e.j as usize] as u32, observed: e.observed })
            .collect();
        let channel = inst.channel.as_ref().map(|ch| {
            let mut per_site = vec![Vec::new(); n];
            for i in 0..n {
                per_site[perm[i]] = ch.per_site[i].clone();
            }
            ChannelData { mass: ch.mass, types: ch.types.clone(), per_site }
        });
        Instance::assemble(
            inst.params,
            Signal { spins },
            EdgeList { mode: inst.edges.mode, t: inst.edges.t, edges },
            channel,
            None,
            inst.seed.clone(),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn exact_marginals_are_permutation_equivariant(
            seed in any::<u64>(),
            r in -0.9f64..0.9,
            x in -1.0f64..=1.0,
            perm in Just((0..7usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let params = ModelParams::new(7, 3.0, 3.0 * r, 0.6).unwrap();
            let inst = sample_instance(&params, 1.0, &AtomicMeasure::dirac(x, 0.5), None, seed).unwrap();
            let moved = relabel(&inst, &perm);
            let a = exact_marginals(&inst, &PairSet::All, 22).unwrap();
            let b = exact_marginals(&moved, &PairSet::All, 22).unwrap();
            prop_assert!((a.log_z.unwrap() - b.log_z.unwrap()).abs() <= 1e-10);
            for i in 0..7 {
                prop_assert!((a.m[i] - b.m[perm[i]]).abs() <= 1e-10);
                for j in 0..7 {
                    prop_assert!((a.corr_full(i, j) - b.corr_full(perm[i], perm[j])).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn multi_overlaps_are_bounded(reps in prop::collection::vec(prop::collection::vec(prop::bool::ANY, 9), 1..5)) {
            let spins: Vec<Vec<Spin>> = reps.iter().map(|r| r.iter().map(|&b| if b { 1 } else { -1 }).collect()).collect();
            let refs: Vec<&[Spin]> = spins.iter().map(|s| s.as_slice()).collect();
            prop_assert!(multi_overlap(&refs).abs() <= 1.0);
        }
    }
}
