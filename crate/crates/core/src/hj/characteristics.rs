//! Short-time solution along characteristics: every fixed point of
//! ν = Γ(μ + tν) gives a candidate ψ(μ + tν) − (t/2)∫G_ν dν.

use serde::Serialize;

use crate::error::Result;
use crate::kernel::ModelParams;
use crate::limit::{fixed_point, hopf_lax_objective, FixedPointOptions, PsiEvaluator};
use crate::measures::AtomicMeasure;
use crate::stats::Estimate;

#[derive(Clone, Debug, Serialize)]
pub struct Characteristic {
    pub start: String,
    pub nu: AtomicMeasure,
    pub value: Estimate,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CharacteristicsResult {
    pub t: f64,
    pub value: Estimate,
    pub nu: AtomicMeasure,
    /// One entry per distinct converged fixed point.
    pub characteristics: Vec<Characteristic>,
    /// Starts whose iteration did not converge.
    pub unconverged: Vec<String>,
    /// More than one distinct fixed point: characteristics cross.
    pub crossing: bool,
    pub label: String,
}

/// Maximize the value formula over the fixed points found from all starts.
/// If no start converges, the run with the smallest residual is used and the
/// result is labelled accordingly.
pub fn characteristics_solve(
    t: f64,
    mu: &AtomicMeasure,
    params: &ModelParams,
    opts: &FixedPointOptions,
    eval: &dyn PsiEvaluator,
) -> Result<CharacteristicsResult> {
    let rep = fixed_point(t, mu, params, opts)?;
    let unconverged: Vec<String> = rep.runs.iter().filter(|r| !r.converged).map(|r| r.start.clone()).collect();
    let mut picks = rep.distinct.clone();
    if picks.is_empty() {
        let best = (0..rep.runs.len()).min_by(|&a, &b| rep.runs[a].residual.total_cmp(&rep.runs[b].residual)).expect("at least one start");
        picks.push(best);
    }
    let mut chars = Vec::with_capacity(picks.len());
    for &i in &picks {
        let run = &rep.runs[i];
        let value = hopf_lax_objective(t, mu, &run.nu, params, eval)?;
        chars.push(Characteristic { start: run.start.clone(), nu: run.nu.clone(), value, residual: run.residual });
    }
    let best = chars.iter().max_by(|a, b| a.value.value.total_cmp(&b.value.value)).expect("non-empty");
    let label = if rep.distinct.is_empty() {
        "unconverged"
    } else if params.is_disassortative() {
        "proven"
    } else {
        "candidate value"
    };
    Ok(CharacteristicsResult {
        t,
        value: best.value,
        nu: best.nu.clone(),
        crossing: rep.distinct.len() > 1,
        characteristics: chars.clone(),
        unconverged,
        label: label.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limit::EnumeratePsi;

    #[test]
    fn time_zero_gives_psi() {
        let p = ModelParams::limit(3.0, -1.0, 0.5).unwrap();
        let mu = AtomicMeasure::dirac(0.5, 0.5);
        let opts = FixedPointOptions { n_samples: 2000, k: 4, ..Default::default() };
        let eval = EnumeratePsi::default();
        let r = characteristics_solve(0.0, &mu, &p, &opts, &eval).unwrap();
        let psi = eval.psi(&mu, &p).unwrap();
        assert!((r.value.value - psi.value).abs() < 1e-12);
        assert!(!r.crossing);
    }
}
