//! Limit objects: ψ and its Gateaux density, the Γ map and its fixed points,
//! the Parisi functional and the variational problems built on them.

pub mod gamma;
pub mod parisi;
pub mod psi;
pub mod simplex;

pub use gamma::{fixed_point, FixedPointOptions, FixedPointReport, FixedPointRun};
pub use parisi::{distance_to_dirac, hopf_lax, hopf_lax_objective, optimize_parisi, parisi, parisi_finite_n, OptimizerOptions, Problem, VariationalResult};
pub use psi::{gamma_map, psi, psi_gateaux_density, DLaw, EnumeratePsi, MonteCarloPsi, PsiEvaluator};

use crate::registry::Registry;

pub fn psi_registry(n_mc: usize, seed: u64) -> Registry<dyn PsiEvaluator> {
    let mut r: Registry<dyn PsiEvaluator> = Registry::new();
    r.register("mc", Box::new(MonteCarloPsi { n_mc, seed }));
    r.register("enumerate", Box::new(EnumeratePsi::default()));
    r
}
