//! The subcommands. Each writes its tables through a [`Run`] and returns
//! whether every check it performs passed.

use anyhow::Result;
use serde_json::json;

use sbm_core::free_energy::{poisson_gap, estimator_registry, free_energy_thermo, mutual_information};
use sbm_core::hj::assemble::{RouteOptions, ShiftSpec};
use sbm_core::hj::{
    assemble_f, characteristics_solve, f_route_registry, solve_grid, stable_tau, CharacteristicsRoute, GridRoute, HjGridSpec,
    HopfLaxRoute,
};
use sbm_core::inference::{
    build_ensemble, franz_de_sanctis_residual, gibbs_registry, nishimori_residual, overlap_concentration_report, EnsembleSpec,
    ExactGibbs, FdsFunction, FdsSpec, GibbsMethod, Mcmc, NishimoriObservable, PairSet, Residual,
};
use sbm_core::kernel::{choose_b, r_threshold};
use sbm_core::limit::{hopf_lax, optimize_parisi, parisi_finite_n, EnumeratePsi, MonteCarloPsi, VariationalResult};
use sbm_core::rng::child_seed;
use sbm_core::{AtomicMeasure, ModelParams};

use crate::config::{measure, ExperimentConfig};
use crate::output::{Run, Table};
use crate::row;

/// What a command reports back to the driver.
pub struct Outcome {
    pub all_passed: bool,
    pub summary: serde_json::Value,
}

pub fn run(command: &str, cfg: &ExperimentConfig, out: &mut Run) -> Result<Outcome> {
    match command {
        "estimate-mi" => estimate_mi(cfg, out),
        "variational" => variational(cfg, out),
        "hopf-lax" => hopf_lax_sweep(cfg, out),
        "solve-hj" => solve_hj(cfg, out),
        "fixed-point" => fixed_point(cfg, out),
        "diagnostics" => diagnostics(cfg, out),
        "crosscheck" => crosscheck(cfg, out),
        other => anyhow::bail!("unknown command `{other}`"),
    }
}

fn gibbs_method(name: &str, cfg: &ExperimentConfig) -> Box<dyn GibbsMethod> {
    match name {
        "mcmc" => Box::new(Mcmc { options: cfg.mcmc.clone() }),
        _ => Box::new(ExactGibbs { cap: cfg.estimator.cap }),
    }
}

fn limit_params(cfg: &ExperimentConfig) -> Result<ModelParams> {
    Ok(ModelParams::limit(cfg.model.c, cfg.model.delta, cfg.model.p)?)
}

fn estimate_mi(cfg: &ExperimentConfig, out: &mut Run) -> Result<Outcome> {
    let b = &cfg.estimate_mi;
    let mu = measure(&b.mu);
    let registry = estimator_registry(gibbs_method(&b.gibbs, cfg));
    let est = registry.get(&b.estimator)?;
    let mut t = out.table("sweep", &["N", "c", "delta", "p", "t", "mu_mass", "F", "F_se", "MI", "MI_se", "method"])?;
    let mut rows = Vec::new();
    for &n in &b.ns {
        let params = ModelParams::new(n, cfg.model.c, cfg.model.delta, cfg.model.p)?;
        let fe = est.estimate(&params, b.t, &mu, &cfg.estimator)?;
        let mi = mutual_information(&params, &fe, &mu);
        t.write(row![n, params.c, params.delta, params.p, b.t, mu.mass(), fe.value, fe.std_error, mi.value, mi.std_error, fe.method.clone()])?;
        out.plot("F", "N", n as f64, "F", fe.value, fe.std_error)?;
        out.plot("MI", "N", n as f64, "MI", mi.value, mi.std_error)?;
        rows.push(json!({ "N": n, "F": fe.value, "MI": mi.value, "mixing_warning": fe.mixing_warning }));
    }
    Ok(Outcome { all_passed: true, summary: json!({ "rows": rows }) })
}

fn write_optimizer(t: &mut Table, k: u32, nu: &AtomicMeasure) -> Result<()> {
    for &(x, w) in &nu.atoms {
        t.write(row![k, x, w])?;
    }
    Ok(())
}

fn variational_summary(r: &VariationalResult) -> serde_json::Value {
    json!({
        "k": r.k,
        "value": r.value.value,
        "se": r.value.se,
        "label": r.label,
        "critical_residual": r.critical_residual,
        "kkt_residual": r.kkt_residual,
    })
}

fn variational(cfg: &ExperimentConfig, out: &mut Run) -> Result<Outcome> {
    let params = limit_params(cfg)?;
    let k = cfg.variational.k;
    let r = optimize_parisi(&params, k, &cfg.optimizer)?;
    let mut res = out.table(
        "result",
        &["K", "value", "se", "label", "critical_residual", "kkt_residual", "mass_residual", "mean_residual"],
    )?;
    res.write(row![k, r.value.value, r.value.se, r.label.clone(), r.critical_residual, r.kkt_residual, r.mass_residual, r.mean_residual])?;
    let mut opt = out.table("optimizer", &["K", "x", "weight"])?;
    write_optimizer(&mut opt, k, &r.optimizer)?;
    let mut trace = out.table("trace", &["restart", "iteration", "value", "se", "constraint_residual", "step"])?;
    for row in &r.trace {
        trace.write(row![row.restart, row.iteration, row.value, row.se, row.constraint_residual, row.step])?;
        out.plot(&format!("restart {}", row.restart), "iteration", row.iteration as f64, "value", row.value, row.se)?;
    }
    let mut starts = out.table("restarts", &["start", "value", "iterations", "converged"])?;
    for s in &r.restarts {
        starts.write(row![s.start.clone(), s.value, s.iterations, s.converged])?;
    }
    Ok(Outcome { all_passed: true, summary: variational_summary(&r) })
}

fn hopf_lax_sweep(cfg: &ExperimentConfig, out: &mut Run) -> Result<Outcome> {
    let params = limit_params(cfg)?;
    let b = &cfg.hopf_lax;
    let mu = measure(&b.mu);
    let mut res = out.table("sweep", &["K", "t", "mu_mass", "value", "se", "label", "critical_residual", "kkt_residual"])?;
    let mut opt = out.table("optimizer", &["K", "x", "weight"])?;
    let mut rows = Vec::new();
    for &k in &b.ks {
        let r = hopf_lax(b.t, &mu, &params, k, &cfg.optimizer)?;
        res.write(row![k, b.t, mu.mass(), r.value.value, r.value.se, r.label.clone(), r.critical_residual, r.kkt_residual])?;
        write_optimizer(&mut opt, k, &r.optimizer)?;
        out.plot("hopf_lax", "K", k as f64, "value", r.value.value, r.value.se)?;
        rows.push(variational_summary(&r));
    }
    Ok(Outcome { all_passed: true, summary: json!({ "runs": rows }) })
}

fn solve_hj(cfg: &ExperimentConfig, out: &mut Run) -> Result<Outcome> {
    let params = limit_params(cfg)?;
    let b = &cfg.solve_hj;
    let shift_b = b.b.unwrap_or_else(|| choose_b(&params));
    let r = b.r.unwrap_or_else(|| r_threshold(&params, shift_b));
    let tau = match b.tau {
        Some(t) => t,
        None => stable_tau(b.k, shift_b, r, b.h, &params, b.cfl)?,
    };
    let spec = HjGridSpec { k: b.k, b: shift_b, r, x_max: b.x_max, h: b.h, tau, horizon: b.horizon, save_every: b.save_every };
    let sol = solve_grid(&spec, &params, &EnumeratePsi::default())?;
    out.json("spec", &json!({ "spec": sol.spec, "boundary": sol.boundary, "cfl_ratio": sol.cfl, "n_steps": spec.n_steps() }))?;

    let gi = sol.index();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..gi.dim).map(|i| format!("x{i}")));
    header.push("value".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut slices = out.table("slices", &header)?;
    for (s, (&time, vals)) in sol.times.iter().zip(&sol.slices).enumerate() {
        for (idx, &v) in vals.iter().enumerate() {
            let mut cells = row![time];
            cells.extend(gi.point(idx).into_iter().map(Into::into));
            cells.push(v.into());
            slices.write(cells)?;
        }
        out.plot("lipschitz", "t", time, "lipschitz", sol.lipschitz(s), 0.0)?;
    }

    let mu = measure(&b.mu);
    let routes = f_route_registry(RouteOptions {
        grid: GridRoute { h: b.h, x_max: b.x_max, cfl: b.cfl },
        hopf_lax: HopfLaxRoute { opts: cfg.optimizer.clone() },
        characteristics: CharacteristicsRoute {
            fixed_point: cfg.fixed_point_options.clone(),
            n_mc: cfg.fixed_point.n_mc,
            seed: child_seed(cfg.seed, 4, 0),
        },
    });
    let f = assemble_f(b.horizon, &mu, &params, routes.get(&b.route)?, ShiftSpec { b: shift_b, r, k: b.k })?;
    let mut ft = out.table("f", &["route", "t", "K", "b", "R", "shifted", "shift", "value", "se", "label"])?;
    ft.write(row![f.route.clone(), f.t, f.k, f.b, f.r, f.shifted, f.shift, f.value, f.se, f.label.clone()])?;
    Ok(Outcome { all_passed: true, summary: json!({ "f": f, "cfl_ratio": sol.cfl, "n_steps": spec.n_steps() }) })
}

fn fixed_point(cfg: &ExperimentConfig, out: &mut Run) -> Result<Outcome> {
    let params = limit_params(cfg)?;
    let b = &cfg.fixed_point;
    let mu = measure(&b.mu);
    let eval = MonteCarloPsi { n_mc: b.n_mc, seed: child_seed(cfg.seed, 5, 0) };
    let res = characteristics_solve(b.t, &mu, &params, &cfg.fixed_point_options, &eval)?;
    let mut t = out.table("characteristics", &["start", "converged", "residual", "mass", "mean", "value", "se", "selected"])?;
    for c in &res.characteristics {
        let selected = c.nu == res.nu;
        t.write(row![c.start.clone(), res.label != "unconverged", c.residual, c.nu.mass(), c.nu.first_moment(), c.value.value, c.value.se, selected])?;
    }
    for s in &res.unconverged {
        t.write(row![s.clone(), false, f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN, false])?;
    }
    let mut nu = out.table("nu", &["x", "weight"])?;
    for &(x, w) in &res.nu.atoms {
        nu.write(row![x, w])?;
        out.plot("nu", "x", x, "weight", w, 0.0)?;
    }
    Ok(Outcome {
        all_passed: true,
        summary: json!({ "value": res.value, "label": res.label, "crossing": res.crossing, "unconverged": res.unconverged.len() }),
    })
}

const DIAG_HEADER: [&str; 8] = ["observable", "N", "estimate", "se", "method", "residual", "bound", "status"];

fn status(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn residual_row(t: &mut Table, name: &str, n: usize, method: &str, r: &Residual) -> Result<bool> {
    let pass = r.within(3.0);
    t.write(row![name, n, r.lhs, r.se, method, r.residual, 3.0 * r.se, status(pass)])?;
    Ok(pass)
}

fn diagnostics(cfg: &ExperimentConfig, out: &mut Run) -> Result<Outcome> {
    let b = &cfg.diagnostics;
    let params = ModelParams::new(b.n, cfg.model.c, cfg.model.delta, cfg.model.p)?;
    let mu = measure(&b.mu);
    let methods = gibbs_registry(cfg.estimator.cap, cfg.mcmc.clone());
    let method = methods.get(if b.n <= cfg.estimator.cap { "exact" } else { "mcmc" })?;
    let mname = method.name();
    let mut t = out.table("identities", &DIAG_HEADER)?;
    let mut all = true;

    let plain = EnsembleSpec { params, t: b.t, mu: mu.clone(), perturb: None, n_disorder: cfg.estimator.n_disorder, seed: cfg.estimator.seed };
    let ens = build_ensemble(&plain, method, &PairSet::None)?;
    for (name, obs) in [
        ("nishimori_overlap", NishimoriObservable::Overlap),
        ("nishimori_magnetization", NishimoriObservable::Magnetization(0)),
        ("nishimori_three_replica", NishimoriObservable::ThreeReplica),
    ] {
        all &= residual_row(&mut t, name, b.n, mname, &nishimori_residual(&ens, obs)?)?;
    }

    let perturbed = EnsembleSpec { perturb: Some(b.perturb.clone()), seed: child_seed(cfg.estimator.seed, 6, 0), ..plain };
    let ens = build_ensemble(&perturbed, method, &PairSet::All)?;
    let oc = overlap_concentration_report(&ens)?;
    let pass = oc.overlap_var <= oc.bound + 3.0 * oc.diff_se;
    t.write(row!["overlap_concentration", b.n, oc.overlap_var, oc.overlap_var_se, mname, oc.overlap_var - oc.bound, 3.0 * oc.diff_se, status(pass)])?;
    all &= pass;
    all &= residual_row(&mut t, "gaussian_ibp", b.n, mname, &oc.ibp)?;
    for k in 1..=b.perturb.k_plus().min(3) {
        for n_rep in 1..=2 {
            let spec = FdsSpec { k, n_replicas: n_rep, f: FdsFunction::SpinProduct(1), n_e: b.n_e, seed: child_seed(cfg.estimator.seed, 7, (k * 4 + n_rep) as u64) };
            let r = franz_de_sanctis_residual(&ens, &spec)?;
            let bound = r.bound + 3.0 * r.combined_se();
            let pass = r.lhs <= bound;
            t.write(row![format!("franz_de_sanctis_k{k}_n{n_rep}"), b.n, r.lhs, r.lhs_se, mname, r.lhs, bound, status(pass)])?;
            all &= pass;
        }
    }

    let mut prev: Option<(f64, f64)> = None;
    for &n in &b.gap_ns {
        let g = poisson_gap(&params.with_n(n), &cfg.estimator)?;
        // nonincreasing in N up to two combined standard errors
        let bound = prev.map_or(f64::INFINITY, |(gap, se)| gap + 2.0 * (se * se + g.se * g.se).sqrt());
        let pass = g.gap <= bound;
        t.write(row!["poisson_gap", n, g.gap, g.se, "exact", g.signed, bound, status(pass)])?;
        out.plot("poisson_gap", "N", n as f64, "gap", g.gap, g.se)?;
        all &= pass;
        prev = Some((g.gap, g.se));
    }
    Ok(Outcome { all_passed: all, summary: json!({ "all_passed": all }) })
}

fn crosscheck(cfg: &ExperimentConfig, out: &mut Run) -> Result<Outcome> {
    let b = &cfg.crosscheck;
    let params = ModelParams::new(b.n, cfg.model.c, cfg.model.delta, cfg.model.p)?;
    let mut vals = out.table("values", &["quantity", "K", "value", "se", "label"])?;
    let fe = free_energy_thermo(&params, 1.0, &AtomicMeasure::zero(), &Mcmc { options: cfg.mcmc.clone() }, &cfg.estimator)?;
    vals.write(row!["thermo_integration", 0u32, fe.value, fe.std_error, if fe.mixing_warning { "mixing warning" } else { "" }])?;
    let par = optimize_parisi(&params, b.k, &cfg.optimizer)?;
    vals.write(row!["parisi", b.k, par.value.value, par.value.se, par.label.clone()])?;
    let hl = hopf_lax(1.0, &AtomicMeasure::zero(), &params, b.k, &cfg.optimizer)?;
    vals.write(row!["hopf_lax", b.k, hl.value.value, hl.value.se, hl.label.clone()])?;
    let popts = sbm_core::free_energy::EstimatorOptions { seed: child_seed(cfg.estimator.seed, 8, 0), ..cfg.estimator.clone() };
    let pn = parisi_finite_n(&par.optimizer, &params, &popts)?;
    vals.write(row!["parisi_finite_n", b.k, pn.value, pn.se, ""])?;

    let mut checks = out.table("checks", &["check", "lhs", "rhs", "difference", "tolerance", "status"])?;
    let named = [("thermo_integration", fe.value, fe.std_error), ("parisi", par.value.value, par.value.se), ("hopf_lax", hl.value.value, hl.value.se)];
    let mut all = true;
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let (a, c) = (named[i], named[j]);
        let d = (a.1 - c.1).abs();
        let tol = b.tolerance + 3.0 * (a.2 * a.2 + c.2 * c.2).sqrt();
        let pass = d <= tol;
        checks.write(row![format!("{} vs {}", a.0, c.0), a.1, c.1, d, tol, status(pass)])?;
        all &= pass;
    }
    let slack = 3.0 * (fe.std_error.powi(2) + pn.se.powi(2)).sqrt();
    let pass = fe.value >= pn.value - slack;
    checks.write(row!["interpolation_bound", fe.value, pn.value, fe.value - pn.value, -slack, status(pass)])?;
    all &= pass;
    for (i, (name, v, se)) in named.iter().enumerate() {
        out.plot(name, "route", i as f64, "value", *v, *se)?;
    }
    Ok(Outcome {
        all_passed: all,
        summary: json!({ "thermo_integration": fe.value, "parisi": par.value.value, "hopf_lax": hl.value.value, "all_passed": all }),
    })
}
