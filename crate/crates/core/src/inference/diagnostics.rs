//! Nishimori residuals, overlap concentration against the Gaussian channel, the
//! Gaussian integration-by-parts identity and Franz–de Sanctis residuals.

use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Instance, Spin};
use crate::rng::{child_seed, stream, tag};
use crate::stats::{jackknife, mean, mean_se};

use super::{Ensemble, GibbsEstimate, GibbsMethod, Marginals, Method, PairSet};

/// Two sides of an identity estimated on the same disorder samples.
#[derive(Clone, Debug, Serialize)]
pub struct Residual {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// Standard error of lhs − rhs (paired over instances).
    pub se: f64,
}

impl Residual {
    pub fn within(&self, k_se: f64) -> bool {
        self.residual <= k_se * self.se || self.residual < 1e-12
    }
}

pub fn paired_residual(name: &str, lhs: &[f64], rhs: &[f64]) -> Residual {
    assert_eq!(lhs.len(), rhs.len());
    let diff: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
    let (d, se) = mean_se(&diff);
    Residual { name: name.to_string(), lhs: mean(lhs), rhs: mean(rhs), residual: d.abs(), se }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NishimoriObservable {
    /// E⟨R_{1,2}⟩ vs E⟨R_{1,*}⟩.
    Overlap,
    /// E⟨σ_i⟩ vs m̄.
    Magnetization(usize),
    /// E⟨R_{1,2,3}⟩ vs E⟨R_{1,2,*}⟩.
    ThreeReplica,
}

/// Per-instance values of both sides.
pub fn nishimori_sides(inst: &Instance, marg: &Marginals, obs: NishimoriObservable) -> Result<(f64, f64)> {
    let n = inst.n() as f64;
    let star = &inst.signal.spins;
    Ok(match obs {
        NishimoriObservable::Overlap => (marg.overlap12(), marg.overlap_signal(star)),
        NishimoriObservable::Magnetization(i) => (marg.m[i], inst.params.m_bar()),
        NishimoriObservable::ThreeReplica => {
            if marg.method != Method::Exact {
                return Err(Error::Unsupported("three-replica products need exact marginals".into()));
            }
            let lhs = marg.m.iter().map(|m| m * m * m).sum::<f64>() / n;
            let rhs = marg.m.iter().zip(star).map(|(m, s)| m * m * *s as f64).sum::<f64>() / n;
            (lhs, rhs)
        }
    })
}

pub fn nishimori_residual(ens: &Ensemble, obs: NishimoriObservable) -> Result<Residual> {
    let mut l = Vec::with_capacity(ens.len());
    let mut r = Vec::with_capacity(ens.len());
    for (inst, marg) in &ens.items {
        let (a, b) = nishimori_sides(inst, marg, obs)?;
        l.push(a);
        r.push(b);
    }
    let name = match obs {
        NishimoriObservable::Overlap => "R12 vs R1*".to_string(),
        NishimoriObservable::Magnetization(i) => format!("sigma_{} vs m_bar", i + 1),
        NishimoriObservable::ThreeReplica => "R123 vs R12*".to_string(),
    };
    Ok(paired_residual(&name, &l, &r))
}

/// An observable a_0 + Σ a_i σ_i.
#[derive(Clone, Debug)]
pub struct AffineObservable {
    pub constant: f64,
    pub coef: Vec<f64>,
}

impl AffineObservable {
    pub fn eval(&self, sigma: &[Spin]) -> f64 {
        self.constant + self.coef.iter().zip(sigma).map(|(a, s)| a * *s as f64).sum::<f64>()
    }

    pub fn mean(&self, marg: &Marginals) -> f64 {
        self.constant + self.coef.iter().zip(&marg.m).map(|(a, m)| a * m).sum::<f64>()
    }

    /// ⟨L²⟩ from the full correlation matrix.
    pub fn second_moment(&self, marg: &Marginals) -> Result<f64> {
        if !matches!(marg.pairs, PairSet::All) {
            return Err(Error::InvalidParams("second moments need the full correlation matrix".into()));
        }
        let n = marg.n();
        let mut quad = 0.0;
        for i in 0..n {
            let row = &marg.corr[i * n..(i + 1) * n];
            quad += self.coef[i] * row.iter().zip(&self.coef).map(|(c, a)| c * a).sum::<f64>();
        }
        let lin: f64 = self.coef.iter().zip(&marg.m).map(|(a, m)| a * m).sum();
        Ok(self.constant * self.constant + 2.0 * self.constant * lin + quad)
    }
}

/// L_0 = (1/N)Σ_i (σ*_i + Z_i/(2√λ_{0,N})) σ_i, the λ_0-derivative of the
/// Hamiltonian divided by Nε_N.
pub fn l0_observable(inst: &Instance) -> Result<AffineObservable> {
    let pert = inst.perturbation.as_ref().ok_or(Error::NoPerturbation)?;
    let n = inst.n() as f64;
    let root = pert.lambda0_n().sqrt();
    let coef = inst.signal.spins.iter().zip(&pert.z).map(|(s, z)| (*s as f64 + z / (2.0 * root)) / n).collect();
    Ok(AffineObservable { constant: 0.0, coef })
}

/// L_k = (1/s_N)Σ_j σ_{i_j}[1/(1 + λ_kσ_{i_j}) − e_j/(1 + λ_kσ*_{i_j})²], k ≥ 1.
/// On ±1 spins σ/(1 + λσ) = (σ − λ)/(1 − λ²), so L_k is affine.
pub fn lk_observable(inst: &Instance, k: usize) -> Result<AffineObservable> {
    let pert = inst.perturbation.as_ref().ok_or(Error::NoPerturbation)?;
    if k == 0 {
        return l0_observable(inst);
    }
    if k > pert.spec.k_plus() {
        return Err(Error::InvalidParams(format!("channel {k} > K_+ = {}", pert.spec.k_plus())));
    }
    let lambda = pert.spec.lambda[k];
    let one_m = 1.0 - lambda * lambda;
    let mut coef = vec![0.0; inst.n()];
    let mut constant = 0.0;
    for ob in &pert.channels[k - 1] {
        let i = ob.site as usize;
        let star = inst.signal.spins[i] as f64;
        coef[i] += 1.0 / one_m - ob.e / (1.0 + lambda * star).powi(2);
        constant -= lambda / one_m;
    }
    let s = pert.s_n;
    Ok(AffineObservable { constant: constant / s, coef: coef.into_iter().map(|a| a / s).collect() })
}

/// ⟨L_k⟩ on one instance through the method's functional route.
pub fn perturbation_l(inst: &Instance, k: usize, method: &dyn GibbsMethod, seed: u64) -> Result<GibbsEstimate> {
    let obs = lk_observable(inst, k)?;
    method.gibbs(inst, &move |s: &[Spin]| obs.eval(s), seed)
}

/// Quenched variance E⟨X²⟩ − (E⟨X⟩)² from per-instance ⟨X²⟩ and ⟨X⟩, with jackknife SE.
fn quenched_variance(second: &[f64], first: &[f64]) -> (f64, f64) {
    let n = second.len();
    jackknife(n, |skip| {
        let (mut s2, mut s1, mut cnt) = (0.0, 0.0, 0.0);
        for k in 0..n {
            if Some(k) == skip {
                continue;
            }
            s2 += second[k];
            s1 += first[k];
            cnt += 1.0;
        }
        s2 / cnt - (s1 / cnt).powi(2)
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OverlapReport {
    /// E⟨(R_{1,2} − E⟨R_{1,2}⟩)²⟩.
    pub overlap_var: f64,
    pub overlap_var_se: f64,
    /// E⟨(L_0 − E⟨L_0⟩)²⟩.
    pub l0_var: f64,
    pub l0_var_se: f64,
    /// 4 E⟨(L_0 − E⟨L_0⟩)²⟩.
    pub bound: f64,
    /// SE of overlap_var − bound.
    pub diff_se: f64,
    /// (E⟨L_k⟩, E⟨(L_k − E⟨L_k⟩)²⟩, SE) for k = 1..K_+.
    pub lk: Vec<(f64, f64, f64)>,
    pub ibp: Residual,
}

struct LStats {
    first: Vec<f64>,
    second: Vec<f64>,
}

fn l_stats(ens: &Ensemble, k: usize) -> Result<LStats> {
    let mut first = Vec::with_capacity(ens.len());
    let mut second = Vec::with_capacity(ens.len());
    for (inst, marg) in &ens.items {
        let obs = lk_observable(inst, k)?;
        first.push(obs.mean(marg));
        second.push(obs.second_moment(marg)?);
    }
    Ok(LStats { first, second })
}

/// Gaussian integration by parts: E⟨σ·Z⟩ = N√λ_{0,N}(1 − E⟨R_{1,*}⟩).
pub fn gaussian_ibp_residual(ens: &Ensemble) -> Result<Residual> {
    let mut l = Vec::new();
    let mut r = Vec::new();
    for (inst, marg) in &ens.items {
        let pert = inst.perturbation.as_ref().ok_or(Error::NoPerturbation)?;
        let n = inst.n() as f64;
        l.push(pert.z.iter().zip(&marg.m).map(|(z, m)| z * m).sum::<f64>());
        r.push(n * pert.lambda0_n().sqrt() * (1.0 - marg.overlap_signal(&inst.signal.spins)));
    }
    Ok(paired_residual("gaussian IBP", &l, &r))
}

/// Overlap concentration against L_0, the L_k fluctuations and the IBP identity.
/// Marginals must carry the full correlation matrix.
pub fn overlap_concentration_report(ens: &Ensemble) -> Result<OverlapReport> {
    if ens.len() < 2 {
        return Err(Error::InvalidParams("need at least two disorder samples".into()));
    }
    let mut r2 = Vec::new();
    let mut r1 = Vec::new();
    for (_, marg) in &ens.items {
        if !matches!(marg.pairs, PairSet::All) {
            return Err(Error::InvalidParams("overlap report needs full correlation matrices".into()));
        }
        r2.push(marg.overlap12_sq());
        r1.push(marg.overlap12());
    }
    let l0 = l_stats(ens, 0)?;
    let (overlap_var, overlap_var_se) = quenched_variance(&r2, &r1);
    let (l0_var, l0_var_se) = quenched_variance(&l0.second, &l0.first);
    let n = ens.len();
    let (_, diff_se) = jackknife(n, |skip| {
        let keep = |v: &[f64]| {
            let (mut s, mut c) = (0.0, 0.0);
            for (k, x) in v.iter().enumerate() {
                if Some(k) != skip {
                    s += x;
                    c += 1.0;
                }
            }
            s / c
        };
        let ov = keep(&r2) - keep(&r1).powi(2);
        let lv = keep(&l0.second) - keep(&l0.first).powi(2);
        ov - 4.0 * lv
    });
    let k_plus = ens.items[0].0.perturbation.as_ref().ok_or(Error::NoPerturbation)?.spec.k_plus();
    let mut lk = Vec::with_capacity(k_plus);
    for k in 1..=k_plus {
        let s = l_stats(ens, k)?;
        let (v, se) = quenched_variance(&s.second, &s.first);
        lk.push((mean(&s.first), v, se));
    }
    Ok(OverlapReport {
        overlap_var,
        overlap_var_se,
        l0_var,
        l0_var_se,
        bound: 4.0 * l0_var,
        diff_se,
        lk,
        ibp: gaussian_ibp_residual(ens)?,
    })
}

/// Test function f_n for the Franz–de Sanctis identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdsFunction {
    /// f_n ≡ 1.
    One,
    /// f_n = Π_{ℓ ≤ n} σ_j^ℓ.
    SpinProduct(usize),
}

#[derive(Clone, Debug)]
pub struct FdsSpec {
    pub k: usize,
    pub n_replicas: usize,
    pub f: FdsFunction,
    /// Exp(1) draws of e per instance; every site i is averaged exactly.
    pub n_e: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdsResult {
    /// E⟨f_n d¹ exp(Σ_ℓ θ^ℓ)⟩/⟨exp θ⟩ⁿ.
    pub coupled: f64,
    /// E⟨f_n⟩ · E⟨d exp θ⟩/⟨exp θ⟩.
    pub product: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    /// (2E⟨(L_k − E⟨L_k⟩)²⟩ + 16/s_N)^{1/2}.
    pub bound: f64,
    pub bound_se: f64,
}

impl FdsResult {
    pub fn combined_se(&self) -> f64 {
        (self.lhs_se.powi(2) + self.bound_se.powi(2)).sqrt()
    }
}

/// Affine coefficients (α, β) with a(s) = α + βs on s = ±1.
#[inline]
fn affine(ap: f64, am: f64) -> (f64, f64) {
    (0.5 * (ap + am), 0.5 * (ap - am))
}

/// Per-instance (coupled, ⟨f_n⟩, d-ratio), each averaged over sites and e draws.
fn fds_instance(inst: &Instance, marg: &Marginals, spec: &FdsSpec, idx: u64) -> Result<(f64, f64, f64)> {
    let pert = inst.perturbation.as_ref().ok_or(Error::NoPerturbation)?;
    if spec.k == 0 || spec.k > pert.spec.k_plus() {
        return Err(Error::InvalidParams(format!("channel {} outside 1..={}", spec.k, pert.spec.k_plus())));
    }
    let n_rep = spec.n_replicas;
    if n_rep == 0 || n_rep > 2 {
        return Err(Error::Unsupported("Franz–de Sanctis residuals are implemented for n ∈ {1, 2}".into()));
    }
    let lambda = pert.spec.lambda[spec.k];
    let n = inst.n();
    let (ma, mb) = marg.m_halves();
    let (ca, cb) = marg.corr_halves();
    let full = matches!(marg.pairs, PairSet::All);
    if matches!(spec.f, FdsFunction::SpinProduct(_)) && !full {
        return Err(Error::InvalidParams("spin-product test functions need the full correlation matrix".into()));
    }
    // replica ℓ uses group ℓ of the marginals, so products of brackets stay unbiased
    let groups: [(&[f64], &[f64]); 2] = [(ma, ca), (mb, cb)];
    let groups = if n_rep == 1 { [(&marg.m[..], &marg.corr[..]), (&marg.m[..], &marg.corr[..])] } else { groups };
    let mut rng = stream(child_seed(spec.seed, tag::FDS, idx), tag::FDS, spec.k as u64);
    let es: Vec<f64> = (0..spec.n_e).map(|_| Exp1.sample(&mut rng)).collect();
    let (mut coupled, mut dratio) = (0.0, 0.0);
    for i in 0..n {
        let star = inst.signal.spins[i] as f64;
        for &e in &es {
            let y = e / (1.0 + lambda * star);
            let theta = |s: f64| (1.0 + lambda * s).ln() - lambda * y * s;
            let (ep, em) = (theta(1.0).exp(), theta(-1.0).exp());
            let (de_p, de_m) = (y / (1.0 + lambda * star) * ep, -y / (1.0 + lambda * star) * em);
            let (ea, eb) = affine(ep, em);
            let (da, db) = affine(de_p, de_m);
            let mut num = 1.0;
            let mut den = 1.0;
            for (l, (m, c)) in groups.iter().take(n_rep).enumerate() {
                let (a0, a1) = if l == 0 { (da, db) } else { (ea, eb) };
                num *= match spec.f {
                    FdsFunction::One => a0 + a1 * m[i],
                    FdsFunction::SpinProduct(j) => a0 * m[j] + a1 * c[i * n + j],
                };
                den *= ea + eb * m[i];
            }
            coupled += num / den;
            dratio += (da + db * marg.m[i]) / (ea + eb * marg.m[i]);
        }
    }
    let norm = (n * spec.n_e) as f64;
    let fmean = match spec.f {
        FdsFunction::One => 1.0,
        FdsFunction::SpinProduct(j) => groups.iter().take(n_rep).map(|(m, _)| m[j]).product(),
    };
    Ok((coupled / norm, fmean, dratio / norm))
}

pub fn franz_de_sanctis_residual(ens: &Ensemble, spec: &FdsSpec) -> Result<FdsResult> {
    if ens.len() < 2 {
        return Err(Error::InvalidParams("need at least two disorder samples".into()));
    }
    let rows = ens
        .items
        .iter()
        .enumerate()
        .map(|(idx, (inst, marg))| fds_instance(inst, marg, spec, idx as u64))
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len();
    let avg = |skip: Option<usize>, pick: fn(&(f64, f64, f64)) -> f64| {
        let (mut s, mut c) = (0.0, 0.0);
        for (k, r) in rows.iter().enumerate() {
            if Some(k) != skip {
                s += pick(r);
                c += 1.0;
            }
        }
        s / c
    };
    let lhs_of = |skip| (avg(skip, |r| r.0) - avg(skip, |r| r.1) * avg(skip, |r| r.2)).abs();
    let (lhs, lhs_se) = jackknife(n, lhs_of);
    let l = l_stats(ens, spec.k)?;
    let s_n = ens.items[0].0.perturbation.as_ref().ok_or(Error::NoPerturbation)?.s_n;
    let (_, var_se) = quenched_variance(&l.second, &l.first);
    let (var, _) = quenched_variance(&l.second, &l.first);
    let bound = (2.0 * var + 16.0 / s_n).sqrt();
    // delta method for the square root
    let bound_se = var_se / bound;
    Ok(FdsResult { coupled: avg(None, |r| r.0), product: avg(None, |r| r.1) * avg(None, |r| r.2), lhs, lhs_se, bound, bound_se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{build_ensemble, EnsembleSpec, ExactGibbs};
    use crate::kernel::ModelParams;
    use crate::measures::AtomicMeasure;
    use crate::model::{hamiltonian, sample_instance, PerturbSpec};

    #[test]
    fn multi_overlap_examples() {
        use crate::inference::multi_overlap;
        let a: Vec<Spin> = vec![1, -1, 1, 1];
        assert_eq!(multi_overlap(&[&a, &a]), 1.0);
        assert_eq!(multi_overlap(&[&a, &a, &a, &a]), 1.0);
        let ones: Vec<Spin> = vec![1; 4];
        assert_eq!(multi_overlap(&[&ones]), 1.0);
    }

    #[test]
    fn l_observables_are_hamiltonian_derivatives() {
        let params = ModelParams::new(7, 3.0, -1.5, 0.6).unwrap();
        let spec = PerturbSpec::with_channels(3);
        let inst = sample_instance(&params, 0.5, &AtomicMeasure::zero(), Some(&spec), 8).unwrap();
        let sigma: Vec<Spin> = vec![1, -1, -1, 1, 1, -1, 1];
        let pert = inst.perturbation.as_ref().unwrap();
        let h = 1e-6;
        for k in 0..=3 {
            let obs = lk_observable(&inst, k).unwrap();
            let mut up = inst.clone();
            let mut dn = inst.clone();
            up.perturbation.as_mut().unwrap().spec.lambda[k] += h;
            dn.perturbation.as_mut().unwrap().spec.lambda[k] -= h;
            let fd = (hamiltonian(&sigma, &up).unwrap() - hamiltonian(&sigma, &dn).unwrap()) / (2.0 * h);
            let scale = if k == 0 { inst.n() as f64 * pert.eps_n } else { pert.s_n };
            assert!((fd / scale - obs.eval(&sigma)).abs() < 1e-6, "k={k}");
        }
    }

    #[test]
    fn fds_anchor_is_exact() {
        let params = ModelParams::new(8, 3.0, -1.5, 0.5).unwrap();
        let es = EnsembleSpec {
            params,
            t: 1.0,
            mu: AtomicMeasure::zero(),
            perturb: Some(PerturbSpec::with_channels(2)),
            n_disorder: 6,
            seed: 3,
        };
        let ens = build_ensemble(&es, &ExactGibbs::default(), &PairSet::All).unwrap();
        let r = franz_de_sanctis_residual(&ens, &FdsSpec { k: 1, n_replicas: 1, f: FdsFunction::One, n_e: 8, seed: 1 })
            .unwrap();
        assert!(r.lhs < 1e-12);
    }
}
