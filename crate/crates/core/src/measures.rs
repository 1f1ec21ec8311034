//! Finite non-negative measures on [-1, 1] and the dyadic machinery built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positions closer than this merge in normal form.
pub const MERGE_TOL: f64 = 1e-12;
const PROB_TOL: f64 = 1e-9;

/// Weighted atoms on [-1, 1]. Serializes as `{"atoms": [[position, weight], ...]}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    pub atoms: Vec<(f64, f64)>,
}

impl AtomicMeasure {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        for &(x, w) in &atoms {
            if !x.is_finite() || !(-1.0..=1.0).contains(&x) {
                return Err(Error::InvalidMeasure(format!("position {x} outside [-1, 1]")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidMeasure(format!("weight {w} is negative or not finite")));
            }
        }
        Ok(Self { atoms })
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn dirac(x: f64, mass: f64) -> Self {
        Self { atoms: vec![(x, mass)] }
    }

    /// Equal weights on `xs`, total mass `mass`.
    pub fn uniform_on(xs: &[f64], mass: f64) -> Self {
        let w = mass / xs.len() as f64;
        Self { atoms: xs.iter().map(|&x| (x, w)).collect() }
    }

    pub fn mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|a| a.1 == 0.0)
    }

    /// First moment ∫x dμ (not normalized).
    pub fn first_moment(&self) -> f64 {
        self.atoms.iter().map(|(x, w)| x * w).sum()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.atoms.iter().map(|&(x, w)| w * f(x)).sum()
    }

    pub fn is_probability(&self) -> bool {
        (self.mass() - 1.0).abs() <= PROB_TOL
    }

    /// Sorted, merged, zero weights dropped.
    pub fn normal_form(&self) -> Self {
        let mut atoms: Vec<(f64, f64)> = self.atoms.iter().copied().filter(|a| a.1 > 0.0).collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (x, w) in atoms {
            match out.last_mut() {
                Some(last) if (x - last.0).abs() <= MERGE_TOL => last.1 += w,
                _ => out.push((x, w)),
            }
        }
        Self { atoms: out }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { atoms: self.atoms.iter().map(|&(x, w)| (x, a * w)).collect() }
    }

    /// μ + a·ν, in normal form.
    pub fn plus_scaled(&self, a: f64, other: &AtomicMeasure) -> Self {
        let mut atoms = self.atoms.clone();
        atoms.extend(other.atoms.iter().map(|&(x, w)| (x, a * w)));
        Self { atoms }.normal_form()
    }
}

/// Total mass and the normalized measure; the zero measure maps to (0, 0).
pub fn normalize(mu: &AtomicMeasure) -> (f64, AtomicMeasure) {
    let mass = mu.mass();
    if mass <= 0.0 {
        return (0.0, AtomicMeasure::zero());
    }
    (mass, mu.scaled(1.0 / mass))
}

/// D_K = { i/2^K : -2^K <= i < 2^K }.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyadicGrid {
    pub k: u32,
}

impl DyadicGrid {
    pub fn new(k: u32) -> Self {
        Self { k }
    }

    /// |D_K| = 2^{K+1}.
    pub fn len(&self) -> usize {
        1usize << (self.k + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        (0.5f64).powi(self.k as i32)
    }

    pub fn point(&self, idx: usize) -> f64 {
        let half = (1usize << self.k) as f64;
        (idx as f64 - half) / half
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Index of the half-open cell [k, k + 2^{-K}) containing x; x = 1 joins the last cell.
    pub fn cell_of(&self, x: f64) -> usize {
        let half = (1usize << self.k) as f64;
        let idx = ((x + 1.0) * half).floor();
        (idx.max(0.0) as usize).min(self.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadicWeights {
    pub k: u32,
    pub x: Vec<f64>,
}

impl DyadicWeights {
    pub fn zeros(k: u32) -> Self {
        Self { k, x: vec![0.0; DyadicGrid::new(k).len()] }
    }

    pub fn grid(&self) -> DyadicGrid {
        DyadicGrid::new(self.k)
    }
}

/// x^{(K)}(μ)_k = |D_K| · μ[k, k + 2^{-K}).
pub fn project_to_dyadic(mu: &AtomicMeasure, k: u32) -> DyadicWeights {
    let grid = DyadicGrid::new(k);
    let d = grid.len() as f64;
    let mut out = DyadicWeights::zeros(k);
    for &(x, w) in &mu.atoms {
        out.x[grid.cell_of(x)] += d * w;
    }
    out
}

/// μ_x = (1/|D_K|) Σ x_k δ_k.
pub fn measure_from_weights(x: &DyadicWeights) -> AtomicMeasure {
    let grid = x.grid();
    let d = grid.len() as f64;
    AtomicMeasure {
        atoms: x
            .x
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, w)| (grid.point(i), w / d))
            .collect(),
    }
}

/// Bin a measure onto D_K (project, then reconstruct).
pub fn bin_to_grid(mu: &AtomicMeasure, k: u32) -> AtomicMeasure {
    measure_from_weights(&project_to_dyadic(mu, k))
}

/// ‖x‖₁ = (1/|D_K|) Σ |x_k|.
pub fn norm_l1(x: &DyadicWeights) -> f64 {
    x.x.iter().map(|v| v.abs()).sum::<f64>() / x.x.len() as f64
}

/// Dual norm max_k |D_K| · |y_k|; `y` has length |D_K|.
pub fn norm_l1_dual(y: &[f64]) -> f64 {
    let d = y.len() as f64;
    y.iter().fold(0.0f64, |m, v| m.max(d * v.abs()))
}

/// Merge the supports of two measures into (position, weight_mu, weight_nu) triples.
fn joint_support(mu: &AtomicMeasure, nu: &AtomicMeasure) -> Vec<(f64, f64, f64)> {
    let mut tagged: Vec<(f64, f64, f64)> = mu
        .atoms
        .iter()
        .map(|&(x, w)| (x, w, 0.0))
        .chain(nu.atoms.iter().map(|&(x, w)| (x, 0.0, w)))
        .collect();
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64, f64)> = Vec::with_capacity(tagged.len());
    for (x, a, b) in tagged {
        match out.last_mut() {
            Some(last) if (x - last.0).abs() <= MERGE_TOL => {
                last.1 += a;
                last.2 += b;
            }
            _ => out.push((x, a, b)),
        }
    }
    out
}

/// sup_A |μ(A) − ν(A)|, via the Hahn-Jordan split of μ − ν.
pub fn tv_distance(mu: &AtomicMeasure, nu: &AtomicMeasure) -> f64 {
    let (mut pos, mut neg) = (0.0, 0.0);
    for (_, a, b) in joint_support(mu, nu) {
        let d = a - b;
        if d > 0.0 {
            pos += d;
        } else {
            neg -= d;
        }
    }
    pos.max(neg)
}

/// W₁ between probability measures on [-1, 1]: ∫ |F_μ − F_ν|.
pub fn wasserstein(mu: &AtomicMeasure, nu: &AtomicMeasure) -> Result<f64> {
    for m in [mu, nu] {
        if !m.is_probability() {
            return Err(Error::NotProbability(m.mass()));
        }
    }
    let support = joint_support(mu, nu);
    let (mut fa, mut fb, mut total) = (0.0, 0.0, 0.0);
    for w in support.windows(2) {
        fa += w[0].1;
        fb += w[0].2;
        total += (fa - fb).abs() * (w[1].0 - w[0].0);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_dirac_at_zero() {
        let x = project_to_dyadic(&AtomicMeasure::dirac(0.0, 1.0), 0);
        assert_eq!(x.x, vec![0.0, 2.0]);
        assert_eq!(DyadicGrid::new(0).points(), vec![-1.0, 0.0]);
    }

    #[test]
    fn project_zero_measure() {
        let x = project_to_dyadic(&AtomicMeasure::zero(), 3);
        assert!(x.x.iter().all(|v| *v == 0.0));
        assert_eq!(x.x.len(), 16);
    }

    #[test]
    fn project_two_atoms_k2() {
        let mu = AtomicMeasure::new(vec![(-1.0, 0.5), (0.3, 0.5)]).unwrap();
        let x = project_to_dyadic(&mu, 2);
        let grid = DyadicGrid::new(2);
        for (i, v) in x.x.iter().enumerate() {
            let p = grid.point(i);
            // |D_2| = 8, so each half-mass atom contributes 8 · ½
            let expect = if p == -1.0 || p == 0.25 { 4.0 } else { 0.0 };
            assert_eq!(*v, expect, "cell at {p}");
        }
    }

    #[test]
    fn atom_at_one_joins_last_cell() {
        let x = project_to_dyadic(&AtomicMeasure::dirac(1.0, 0.7), 1);
        assert_eq!(x.x, vec![0.0, 0.0, 0.0, 4.0 * 0.7]);
    }

    #[test]
    fn weights_roundtrip() {
        let x = DyadicWeights { k: 0, x: vec![0.0, 2.0] };
        let mu = measure_from_weights(&x);
        assert_eq!(mu.atoms, vec![(0.0, 1.0)]);
        assert!(measure_from_weights(&DyadicWeights::zeros(2)).is_zero());
    }

    #[test]
    fn normalize_examples() {
        let (m, bar) = normalize(&AtomicMeasure::dirac(0.5, 2.0));
        assert_eq!((m, bar.atoms), (2.0, vec![(0.5, 1.0)]));
        let (m0, z) = normalize(&AtomicMeasure::zero());
        assert_eq!(m0, 0.0);
        assert!(z.is_zero());
        let (m, bar) = normalize(&AtomicMeasure::new(vec![(-1.0, 0.5), (1.0, 0.25)]).unwrap());
        assert!((m - 0.75).abs() < 1e-15);
        assert!((bar.atoms[0].1 - 2.0 / 3.0).abs() < 1e-15 && (bar.atoms[1].1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn norms() {
        assert_eq!(norm_l1(&DyadicWeights { k: 0, x: vec![0.0, 2.0] }), 1.0);
        assert_eq!(norm_l1_dual(&[0.5, 0.0]), 1.0);
        assert_eq!(norm_l1(&DyadicWeights { k: 3, x: vec![1.0; 16] }), 1.0);
    }

    #[test]
    fn distances() {
        let d0 = AtomicMeasure::dirac(0.0, 1.0);
        let d1 = AtomicMeasure::dirac(1.0, 1.0);
        assert_eq!(tv_distance(&d0, &d1), 1.0);
        assert!((wasserstein(&AtomicMeasure::dirac(-0.3, 1.0), &AtomicMeasure::dirac(0.6, 1.0)).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(tv_distance(&d0, &d0), 0.0);
        assert_eq!(wasserstein(&d1, &d1).unwrap(), 0.0);
        assert!(wasserstein(&AtomicMeasure::dirac(0.0, 2.0), &d0).is_err());
    }

    #[test]
    fn rejects_bad_atoms() {
        assert!(AtomicMeasure::new(vec![(1.5, 1.0)]).is_err());
        assert!(AtomicMeasure::new(vec![(0.0, -1.0)]).is_err());
    }

    #[test]
    fn json_shape() {
        let mu = AtomicMeasure::new(vec![(0.5, 0.25)]).unwrap();
        assert_eq!(serde_json::to_string(&mu).unwrap(), r#"{"atoms":[[0.5,0.25]]}"#);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn measure(max_atoms: usize) -> impl Strategy<Value = AtomicMeasure> {
        prop::collection::vec((-1.0f64..=1.0, 0.0f64..3.0), 1..max_atoms).prop_map(|atoms| AtomicMeasure { atoms })
    }

    fn probability(max_atoms: usize) -> impl Strategy<Value = AtomicMeasure> {
        prop::collection::vec((-1.0f64..=1.0, 0.01f64..1.0), 1..max_atoms).prop_map(|atoms| normalize(&AtomicMeasure { atoms }).1)
    }

    proptest! {
        #[test]
        fn projection_roundtrip_on_grid_measures(k in 0u32..=6, w in prop::collection::vec(0.0f64..2.0, 1..40)) {
            let grid = DyadicGrid::new(k);
            let atoms: Vec<(f64, f64)> = w.iter().enumerate().map(|(i, &w)| (grid.point(i % grid.len()), w)).collect();
            let mu = AtomicMeasure { atoms };
            let back = measure_from_weights(&project_to_dyadic(&mu, k));
            let again = project_to_dyadic(&back, k);
            let first = project_to_dyadic(&mu, k);
            for (a, b) in first.x.iter().zip(&again.x) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
            prop_assert!(tv_distance(&mu, &back) <= 1e-12 * (1.0 + mu.mass()));
        }

        #[test]
        fn projection_preserves_mass(k in 0u32..=6, mu in measure(12)) {
            let x = project_to_dyadic(&mu, k);
            prop_assert!((norm_l1(&x) - mu.mass()).abs() <= 1e-12 * (1.0 + mu.mass()));
        }

        #[test]
        fn binning_moves_probability_by_at_most_a_cell(k in 0u32..=6, mu in probability(12)) {
            let binned = bin_to_grid(&mu, k);
            let w = wasserstein(&mu, &normalize(&binned).1).unwrap();
            prop_assert!(w <= 0.5f64.powi(k as i32) + 1e-12, "W = {w}");
        }

        #[test]
        fn distances_are_metrics(a in probability(6), b in probability(6), c in probability(6)) {
            for d in [|x: &AtomicMeasure, y: &AtomicMeasure| tv_distance(x, y), |x: &AtomicMeasure, y: &AtomicMeasure| wasserstein(x, y).unwrap()] {
                let (ab, ba, bc, ac) = (d(&a, &b), d(&b, &a), d(&b, &c), d(&a, &c));
                prop_assert!(ab >= 0.0);
                prop_assert!((ab - ba).abs() <= 1e-12);
                prop_assert!(ac <= ab + bc + 1e-12);
                prop_assert!(d(&a, &a) <= 1e-12);
            }
        }
    }
}
