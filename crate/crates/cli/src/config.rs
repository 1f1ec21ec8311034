//! Experiment configuration: one JSON document with a block per subcommand.
//! Every field has a default, so `{}` is a valid config.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sbm_core::free_energy::EstimatorOptions;
use sbm_core::inference::McmcOptions;
use sbm_core::kernel::{choose_b, shifted_matrix};
use sbm_core::limit::{FixedPointOptions, OptimizerOptions};
use sbm_core::model::PerturbSpec;
use sbm_core::rng::child_seed;
use sbm_core::{AtomicMeasure, ModelParams};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub c: f64,
    pub delta: f64,
    pub p: f64,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self { c: 3.0, delta: -2.0, p: 0.5 }
    }
}

impl ModelBlock {
    pub fn params(&self, n: usize) -> ModelParams {
        ModelParams { n, c: self.c, delta: self.delta, p: self.p }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateMiBlock {
    pub ns: Vec<usize>,
    pub t: f64,
    /// Channel measure as [position, weight] pairs.
    pub mu: Vec<(f64, f64)>,
    /// Free-energy estimator: exact | thermo_integration.
    pub estimator: String,
    /// Gibbs method for thermo_integration: exact | mcmc.
    pub gibbs: String,
}

impl Default for EstimateMiBlock {
    fn default() -> Self {
        Self { ns: vec![8, 12], t: 1.0, mu: Vec::new(), estimator: "exact".into(), gibbs: "exact".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationalBlock {
    pub k: u32,
}

impl Default for VariationalBlock {
    fn default() -> Self {
        Self { k: 6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HopfLaxBlock {
    pub t: f64,
    pub mu: Vec<(f64, f64)>,
    /// One run per K; a sweep reports the K-dependence.
    pub ks: Vec<u32>,
}

impl Default for HopfLaxBlock {
    fn default() -> Self {
        Self { t: 1.0, mu: Vec::new(), ks: vec![6] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveHjBlock {
    pub k: u32,
    /// Defaults to choose_b.
    pub b: Option<f64>,
    /// Defaults to the admissibility threshold for b.
    pub r: Option<f64>,
    pub h: f64,
    pub x_max: f64,
    pub horizon: f64,
    /// Defaults to the largest stable step times `cfl`.
    pub tau: Option<f64>,
    pub cfl: f64,
    pub save_every: usize,
    /// Point at which f(t, μ) is assembled.
    pub mu: Vec<(f64, f64)>,
    /// Route for the assembled value: grid | hopf_lax | characteristics.
    pub route: String,
}

impl Default for SolveHjBlock {
    fn default() -> Self {
        Self {
            k: 0,
            b: None,
            r: None,
            h: 0.1,
            x_max: 4.0,
            horizon: 1.0,
            tau: None,
            cfl: 1.0,
            save_every: 100,
            mu: Vec::new(),
            route: "grid".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointBlock {
    pub t: f64,
    pub mu: Vec<(f64, f64)>,
    /// Draws for evaluating the value formula at each fixed point.
    pub n_mc: usize,
}

impl Default for FixedPointBlock {
    fn default() -> Self {
        Self { t: 1.0, mu: Vec::new(), n_mc: 200_000 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsBlock {
    pub n: usize,
    pub t: f64,
    pub mu: Vec<(f64, f64)>,
    /// Sizes for the Poisson/binomial gap.
    pub gap_ns: Vec<usize>,
    pub perturb: PerturbSpec,
    /// Exponential draws per instance in the Franz–de Sanctis residual.
    pub n_e: usize,
}

impl Default for DiagnosticsBlock {
    fn default() -> Self {
        Self { n: 10, t: 1.0, mu: vec![(0.5, 0.5)], gap_ns: vec![8, 12], perturb: PerturbSpec::with_channels(8), n_e: 16 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrosscheckBlock {
    pub n: usize,
    pub k: u32,
    /// Agreement tolerance on top of 3 combined standard errors.
    pub tolerance: f64,
}

impl Default for CrosscheckBlock {
    fn default() -> Self {
        Self { n: 300, k: 6, tolerance: 0.03 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelBlock,
    pub estimator: EstimatorOptions,
    pub mcmc: McmcOptions,
    pub optimizer: OptimizerOptions,
    pub fixed_point_options: FixedPointOptions,
    pub estimate_mi: EstimateMiBlock,
    pub variational: VariationalBlock,
    pub hopf_lax: HopfLaxBlock,
    pub solve_hj: SolveHjBlock,
    pub fixed_point: FixedPointBlock,
    pub diagnostics: DiagnosticsBlock,
    pub crosscheck: CrosscheckBlock,
}

const ESTIMATORS: [&str; 2] = ["exact", "thermo_integration"];
const GIBBS: [&str; 2] = ["exact", "mcmc"];
const ROUTES: [&str; 3] = ["grid", "hopf_lax", "characteristics"];

fn measure_violations(name: &str, atoms: &[(f64, f64)], out: &mut Vec<String>) {
    if let Err(e) = AtomicMeasure::new(atoms.to_vec()) {
        out.push(format!("{name}: {e}"));
    }
}

impl ExperimentConfig {
    /// Every violated constraint, for the given subcommand.
    pub fn violations(&self, command: &str) -> Vec<String> {
        let mut v: Vec<String> = self.model.params(0).violations().into_iter().map(|s| format!("model: {s}")).collect();
        let mut needs_mcmc = false;
        match command {
            "estimate-mi" => {
                let b = &self.estimate_mi;
                if b.ns.is_empty() {
                    v.push("estimate_mi.ns must not be empty".into());
                }
                if b.ns.iter().any(|n| *n < 2) {
                    v.push("estimate_mi.ns entries must be >= 2".into());
                }
                if !(b.t >= 0.0) {
                    v.push(format!("estimate_mi.t must be >= 0 (got {})", b.t));
                }
                measure_violations("estimate_mi.mu", &b.mu, &mut v);
                if !ESTIMATORS.contains(&b.estimator.as_str()) {
                    v.push(format!("estimate_mi.estimator `{}` not one of {ESTIMATORS:?}", b.estimator));
                }
                if !GIBBS.contains(&b.gibbs.as_str()) {
                    v.push(format!("estimate_mi.gibbs `{}` not one of {GIBBS:?}", b.gibbs));
                }
                if b.estimator == "exact" || b.gibbs == "exact" {
                    if let Some(n) = b.ns.iter().find(|n| **n > self.estimator.cap) {
                        v.push(format!("estimate_mi.ns contains N = {n} above the enumeration cap {}", self.estimator.cap));
                    }
                }
                needs_mcmc = b.gibbs == "mcmc";
            }
            "variational" => {
                if self.variational.k > 10 {
                    v.push("variational.k must be <= 10".into());
                }
            }
            "hopf-lax" => {
                let b = &self.hopf_lax;
                if !(b.t >= 0.0) {
                    v.push(format!("hopf_lax.t must be >= 0 (got {})", b.t));
                }
                if b.ks.is_empty() || b.ks.iter().any(|k| *k > 10) {
                    v.push("hopf_lax.ks must be non-empty with entries <= 10".into());
                }
                measure_violations("hopf_lax.mu", &b.mu, &mut v);
            }
            "solve-hj" => {
                let b = &self.solve_hj;
                if b.k > 1 {
                    v.push(format!("solve_hj.k must be <= 1 (got {})", b.k));
                }
                if self.model.delta > 0.0 {
                    v.push("solve_hj needs delta <= 0".into());
                } else if b.k <= 1 && self.model.params(0).violations().is_empty() {
                    let params = self.model.params(0);
                    let kb = shifted_matrix(b.k, b.b.unwrap_or_else(|| choose_b(&params)), &params);
                    if !kb.is_psd(1e-12) {
                        v.push(format!(
                            "solve_hj: shifted kernel at K = {} is not positive semidefinite (smallest eigenvalue {:.3e})",
                            b.k,
                            kb.min_eigenvalue()
                        ));
                    }
                }
                if !(b.h > 0.0 && b.x_max > 0.0 && b.horizon >= 0.0) {
                    v.push("solve_hj: h and x_max must be positive and the horizon non-negative".into());
                }
                if !(b.cfl > 0.0 && b.cfl <= 1.0) {
                    v.push(format!("solve_hj.cfl must lie in (0, 1] (got {})", b.cfl));
                }
                if b.save_every == 0 {
                    v.push("solve_hj.save_every must be positive".into());
                }
                if b.r.is_some_and(|r| !(r > 0.0)) {
                    v.push("solve_hj.r must be positive".into());
                }
                if b.tau.is_some_and(|t| !(t > 0.0)) {
                    v.push("solve_hj.tau must be positive".into());
                }
                measure_violations("solve_hj.mu", &b.mu, &mut v);
                if !ROUTES.contains(&b.route.as_str()) {
                    v.push(format!("solve_hj.route `{}` not one of {ROUTES:?}", b.route));
                }
            }
            "fixed-point" => {
                let b = &self.fixed_point;
                if !(b.t >= 0.0) {
                    v.push(format!("fixed_point.t must be >= 0 (got {})", b.t));
                }
                if b.n_mc < 2 {
                    v.push("fixed_point.n_mc must be >= 2".into());
                }
                let o = &self.fixed_point_options;
                if !(o.damping > 0.0 && o.damping <= 1.0) {
                    v.push(format!("fixed_point_options.damping must lie in (0, 1] (got {})", o.damping));
                }
                measure_violations("fixed_point.mu", &b.mu, &mut v);
            }
            "diagnostics" => {
                let b = &self.diagnostics;
                if b.n < 2 {
                    v.push("diagnostics.n must be >= 2".into());
                }
                if !(b.t >= 0.0) {
                    v.push(format!("diagnostics.t must be >= 0 (got {})", b.t));
                }
                measure_violations("diagnostics.mu", &b.mu, &mut v);
                v.extend(b.perturb.violations().into_iter().map(|s| format!("diagnostics.perturb: {s}")));
                if let Some(n) = b.gap_ns.iter().find(|n| **n > self.estimator.cap || **n < 2) {
                    v.push(format!("diagnostics.gap_ns entry {n} outside [2, {}]", self.estimator.cap));
                }
                if self.estimator.n_disorder < 2 {
                    v.push("estimator.n_disorder must be >= 2 for diagnostics".into());
                }
                needs_mcmc = b.n > self.estimator.cap;
            }
            "crosscheck" => {
                let b = &self.crosscheck;
                if b.n < 2 {
                    v.push("crosscheck.n must be >= 2".into());
                }
                if self.model.delta > 0.0 {
                    v.push("crosscheck is the disassortative comparison and needs delta <= 0".into());
                }
                if b.k > 10 {
                    v.push("crosscheck.k must be <= 10".into());
                }
                needs_mcmc = true;
            }
            _ => v.push(format!("unknown command `{command}`")),
        }
        if needs_mcmc {
            if let Err(e) = self.mcmc.validate() {
                v.push(format!("mcmc: {e}"));
            }
        }
        if self.estimator.n_disorder == 0 {
            v.push("estimator.n_disorder must be positive".into());
        }
        if self.optimizer.n_mc < 2 || self.optimizer.n_final < 2 {
            v.push("optimizer.n_mc and optimizer.n_final must be >= 2".into());
        }
        v
    }

    /// Applies the master seed: every component seed is derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.estimator.seed = child_seed(seed, 1, 0);
        self.optimizer.seed = child_seed(seed, 2, 0);
        self.fixed_point_options.seed = child_seed(seed, 3, 0);
        self
    }

    /// SHA-256 of the canonical JSON of the effective config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

pub fn measure(atoms: &[(f64, f64)]) -> AtomicMeasure {
    AtomicMeasure::new(atoms.to_vec()).expect("validated")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_valid_for_every_command() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        for cmd in ["estimate-mi", "variational", "hopf-lax", "fixed-point", "diagnostics", "crosscheck"] {
            let v = cfg.violations(cmd);
            assert!(v.is_empty(), "{cmd}: {v:?}");
        }
        // the default model has an indefinite shifted kernel at K = 0
        assert_eq!(cfg.violations("solve-hj").len(), 1);
    }

    #[test]
    fn lists_every_violation() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"model": {"c": 1.0, "delta": 2.0, "p": 1.5}, "diagnostics": {"perturb": {"gamma": 0.1, "eta": 0.5, "lambda": [1.0, 0.5]}}}"#,
        )
        .unwrap();
        let v = cfg.violations("diagnostics");
        assert!(v.iter().any(|s| s.contains("delta")));
        assert!(v.iter().any(|s| s.contains("p must")));
        assert!(v.iter().any(|s| s.contains("gamma")));
        assert!(v.iter().any(|s| s.contains("eta")));
    }

    #[test]
    fn hash_depends_on_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..Default::default() };
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
