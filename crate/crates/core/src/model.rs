//! Disorder generation and Hamiltonian evaluation: Poissonized and binomial
//! edge data, site channels indexed by a measure, and the Gaussian and
//! exponential perturbations.

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::ModelParams;
use crate::measures::{normalize, AtomicMeasure};
use crate::rng::{stream, tag, Rng};

pub type Spin = i8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub spins: Vec<Spin>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeMode {
    Binomial,
    Poisson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub i: u32,
    pub j: u32,
    pub observed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeList {
    pub mode: EdgeMode,
    pub t: f64,
    pub edges: Vec<Edge>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelObs {
    pub x: f64,
    pub observed: bool,
}

/// Site channels: each site i has Poi(sN) candidate observations with types from μ̄.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelData {
    pub mass: f64,
    pub types: AtomicMeasure,
    pub per_site: Vec<Vec<ChannelObs>>,
}

/// Perturbation configuration: ε_N = N^γ, s_N = N^η, λ_k ∈ [2^{-k-1}, 2^{-k}].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub gamma: f64,
    pub eta: f64,
    /// λ_0, ..., λ_{K_+}.
    pub lambda: Vec<f64>,
}

impl PerturbSpec {
    /// γ = −1/16, η = 0.9 and λ_k at the midpoint of its box.
    pub fn with_channels(k_plus: usize) -> Self {
        Self { gamma: -1.0 / 16.0, eta: 0.9, lambda: (0..=k_plus).map(|k| 0.75 * 0.5f64.powi(k as i32)).collect() }
    }

    pub fn k_plus(&self) -> usize {
        self.lambda.len().saturating_sub(1)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.gamma > -0.125 && self.gamma < 0.0) {
            v.push(format!("gamma must lie in (-1/8, 0) (got {})", self.gamma));
        }
        if !(self.eta > 0.8 && self.eta < 1.0) {
            v.push(format!("eta must lie in (4/5, 1) (got {})", self.eta));
        }
        if self.lambda.len() < 2 {
            v.push("need at least one exponential channel (K_+ >= 1)".into());
        }
        for (k, l) in self.lambda.iter().enumerate() {
            let hi = 0.5f64.powi(k as i32);
            if !(*l >= 0.5 * hi && *l <= hi) {
                v.push(format!("lambda_{k} = {l} outside [{}, {}]", 0.5 * hi, hi));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(v.join("; ")))
        }
    }
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self::with_channels(8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpObs {
    pub site: u32,
    pub e: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationData {
    pub spec: PerturbSpec,
    pub eps_n: f64,
    pub s_n: f64,
    pub z: Vec<f64>,
    /// channels[k-1] holds the π_k observations of channel k.
    pub channels: Vec<Vec<ExpObs>>,
}

impl PerturbationData {
    /// λ_{0,N} = ε_N λ_0.
    pub fn lambda0_n(&self) -> f64 {
        self.eps_n * self.spec.lambda[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub t: f64,
    pub mu: AtomicMeasure,
    pub perturb: Option<PerturbSpec>,
    /// Superposition extensions applied after sampling, in order.
    pub extensions: Vec<Extension>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Extension {
    Time { dt: f64, index: u64 },
    Channel { x: f64, eps: f64, index: u64 },
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub params: ModelParams,
    pub signal: Signal,
    pub edges: EdgeList,
    pub channel: Option<ChannelData>,
    pub perturbation: Option<PerturbationData>,
    pub seed: SeedRecord,
    adjacency: Vec<Vec<u32>>,
    exp_by_site: Vec<Vec<(u32, u32)>>,
}

fn check_params(params: &ModelParams) -> Result<()> {
    params.validate()?;
    if params.n < 2 {
        return Err(Error::InvalidParams(format!("N must be at least 2 (got {})", params.n)));
    }
    if (params.n as f64) <= params.c + params.delta.abs() {
        return Err(Error::InvalidParams(format!(
            "N = {} must exceed c + |delta| = {} for the non-edge terms to be finite",
            params.n,
            params.c + params.delta.abs()
        )));
    }
    Ok(())
}

fn poisson(mean: f64, rng: &mut Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as usize
}

fn sample_signal(params: &ModelParams, rng: &mut Rng) -> Signal {
    Signal { spins: (0..params.n).map(|_| if rng.random::<f64>() < params.p { 1 } else { -1 }).collect() }
}

fn edge_prob(params: &ModelParams, s: f64) -> f64 {
    (params.c + params.delta * s) / params.n as f64
}

fn push_poisson_edges(params: &ModelParams, signal: &Signal, mean: f64, rng: &mut Rng, out: &mut Vec<Edge>) {
    let n = params.n;
    let count = poisson(mean, rng);
    out.reserve(count);
    for _ in 0..count {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let s = (signal.spins[i] * signal.spins[j]) as f64;
        let observed = rng.random::<f64>() < edge_prob(params, s);
        out.push(Edge { i: i as u32, j: j as u32, observed });
    }
}

/// Categorical sampler over the atoms of a probability measure.
struct TypeSampler {
    xs: Vec<f64>,
    cdf: Vec<f64>,
}

impl TypeSampler {
    fn new(mu_bar: &AtomicMeasure) -> Self {
        let mut acc = 0.0;
        let mut xs = Vec::new();
        let mut cdf = Vec::new();
        for &(x, w) in &mu_bar.atoms {
            acc += w;
            xs.push(x);
            cdf.push(acc);
        }
        Self { xs, cdf }
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        let u = rng.random::<f64>() * self.cdf.last().copied().unwrap_or(1.0);
        let idx = self.cdf.partition_point(|&c| c <= u).min(self.xs.len() - 1);
        self.xs[idx]
    }
}

fn push_channel_obs(
    params: &ModelParams,
    signal: &Signal,
    mass: f64,
    sampler: &TypeSampler,
    rng: &mut Rng,
    per_site: &mut [Vec<ChannelObs>],
) {
    let nf = params.n as f64;
    for (i, obs) in per_site.iter_mut().enumerate() {
        let count = poisson(mass * nf, rng);
        for _ in 0..count {
            let x = sampler.sample(rng);
            let prob = (params.c + params.delta * signal.spins[i] as f64 * x) / nf;
            obs.push(ChannelObs { x, observed: rng.random::<f64>() < prob });
        }
    }
}

fn sample_perturbation(params: &ModelParams, spec: &PerturbSpec, rng: &mut Rng) -> PerturbationData {
    let nf = params.n as f64;
    let eps_n = nf.powf(spec.gamma);
    let s_n = nf.powf(spec.eta);
    let z: Vec<f64> = (0..params.n).map(|_| rng.sample(StandardNormal)).collect();
    let channels = (1..=spec.k_plus())
        .map(|_| {
            let count = poisson(s_n, rng);
            (0..count)
                .map(|_| ExpObs { site: rng.random_range(0..params.n) as u32, e: rng.sample::<f64, _>(Exp1) })
                .collect()
        })
        .collect();
    PerturbationData { spec: spec.clone(), eps_n, s_n, z, channels }
}

/// Sample the enriched (optionally perturbed) model at time t with channel measure μ.
pub fn sample_instance(
    params: &ModelParams,
    t: f64,
    mu: &AtomicMeasure,
    perturb: Option<&PerturbSpec>,
    seed: u64,
) -> Result<Instance> {
    check_params(params)?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidParams(format!("t must be >= 0 (got {t})")));
    }
    let mu = AtomicMeasure::new(mu.atoms.clone())?;
    if let Some(spec) = perturb {
        spec.validate()?;
    }
    let n = params.n;
    let signal = sample_signal(params, &mut stream(seed, tag::SIGNAL, 0));
    let mut edges = Vec::new();
    let pairs = (n * (n - 1)) as f64 / 2.0;
    push_poisson_edges(params, &signal, t * pairs, &mut stream(seed, tag::EDGES, 0), &mut edges);
    let (mass, mu_bar) = normalize(&mu);
    let channel = if mass > 0.0 {
        let mut per_site = vec![Vec::new(); n];
        let sampler = TypeSampler::new(&mu_bar);
        push_channel_obs(params, &signal, mass, &sampler, &mut stream(seed, tag::CHANNEL, 0), &mut per_site);
        Some(ChannelData { mass, types: mu_bar, per_site })
    } else {
        None
    };
    let perturbation = perturb.map(|spec| sample_perturbation(params, spec, &mut stream(seed, tag::PERTURB, 0)));
    let seed_rec = SeedRecord { seed, t, mu, perturb: perturb.cloned(), extensions: Vec::new() };
    Ok(Instance::assemble(
        *params,
        signal,
        EdgeList { mode: EdgeMode::Poisson, t, edges },
        channel,
        perturbation,
        seed_rec,
    ))
}

/// Sample the original model: one observation per unordered pair i < j.
pub fn sample_binomial_instance(params: &ModelParams, seed: u64) -> Result<Instance> {
    check_params(params)?;
    let n = params.n;
    let signal = sample_signal(params, &mut stream(seed, tag::SIGNAL, 0));
    let mut rng = stream(seed, tag::BINOMIAL, 0);
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (signal.spins[i] * signal.spins[j]) as f64;
            edges.push(Edge { i: i as u32, j: j as u32, observed: rng.random::<f64>() < edge_prob(params, s) });
        }
    }
    let seed_rec = SeedRecord { seed, t: 1.0, mu: AtomicMeasure::zero(), perturb: None, extensions: Vec::new() };
    Ok(Instance::assemble(
        *params,
        signal,
        EdgeList { mode: EdgeMode::Binomial, t: 1.0, edges },
        None,
        None,
        seed_rec,
    ))
}

/// The Poissonized instance at time t together with the original binomial
/// instance, coupled on the same signal: for each unordered pair the first
/// Poisson observation reuses the binomial observation's uniform.
pub fn sample_coupled_pair(params: &ModelParams, t: f64, seed: u64) -> Result<(Instance, Instance)> {
    check_params(params)?;
    let n = params.n;
    let nf = n as f64;
    let signal = sample_signal(params, &mut stream(seed, tag::SIGNAL, 0));
    let mut rng = stream(seed, tag::BINOMIAL, 1);
    let mut bin = Vec::with_capacity(n * (n - 1) / 2);
    let mut pois = Vec::new();
    let pair_rate = t * (nf - 1.0) / nf;
    for i in 0..n {
        for j in (i + 1)..n {
            let prob = edge_prob(params, (signal.spins[i] * signal.spins[j]) as f64);
            let u = rng.random::<f64>();
            bin.push(Edge { i: i as u32, j: j as u32, observed: u < prob });
            let count = poisson(pair_rate, &mut rng);
            for k in 0..count {
                let v = if k == 0 { u } else { rng.random::<f64>() };
                pois.push(Edge { i: i as u32, j: j as u32, observed: v < prob });
            }
        }
    }
    let loop_prob = edge_prob(params, 1.0);
    for i in 0..n {
        for _ in 0..poisson(0.5 * pair_rate, &mut rng) {
            pois.push(Edge { i: i as u32, j: i as u32, observed: rng.random::<f64>() < loop_prob });
        }
    }
    let rec = |t: f64| SeedRecord { seed, t, mu: AtomicMeasure::zero(), perturb: None, extensions: Vec::new() };
    let p_inst = Instance::assemble(
        *params,
        signal.clone(),
        EdgeList { mode: EdgeMode::Poisson, t, edges: pois },
        None,
        None,
        rec(t),
    );
    let b_inst = Instance::assemble(
        *params,
        signal,
        EdgeList { mode: EdgeMode::Binomial, t: 1.0, edges: bin },
        None,
        None,
        rec(1.0),
    );
    Ok((p_inst, b_inst))
}

impl Instance {
    pub(crate) fn assemble(
        params: ModelParams,
        signal: Signal,
        edges: EdgeList,
        channel: Option<ChannelData>,
        perturbation: Option<PerturbationData>,
        seed: SeedRecord,
    ) -> Self {
        let mut inst = Self {
            params,
            signal,
            edges,
            channel,
            perturbation,
            seed,
            adjacency: Vec::new(),
            exp_by_site: Vec::new(),
        };
        inst.build_index();
        inst
    }

    fn build_index(&mut self) {
        let n = self.params.n;
        let mut adj = vec![Vec::new(); n];
        for (idx, e) in self.edges.edges.iter().enumerate() {
            adj[e.i as usize].push(idx as u32);
            if e.j != e.i {
                adj[e.j as usize].push(idx as u32);
            }
        }
        let mut exp_by_site = vec![Vec::new(); n];
        if let Some(pert) = &self.perturbation {
            for (k, ch) in pert.channels.iter().enumerate() {
                for (j, ob) in ch.iter().enumerate() {
                    exp_by_site[ob.site as usize].push((k as u32, j as u32));
                }
            }
        }
        self.adjacency = adj;
        self.exp_by_site = exp_by_site;
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn channel_mass(&self) -> f64 {
        self.channel.as_ref().map_or(0.0, |c| c.mass)
    }

    /// Superpose Poi(dt·N(N−1)/2) further edges: the instance at time t + dt,
    /// coupled to this one.
    pub fn extend_time(&self, dt: f64, index: u64) -> Result<Instance> {
        if self.edges.mode != EdgeMode::Poisson {
            return Err(Error::Unsupported("time extension of binomial edge data".into()));
        }
        if !(dt >= 0.0) {
            return Err(Error::InvalidParams(format!("dt must be >= 0 (got {dt})")));
        }
        let n = self.params.n;
        let mut out = self.clone();
        let mut rng = stream(self.seed.seed, tag::EXTEND_TIME, index);
        push_poisson_edges(&self.params, &self.signal, dt * (n * (n - 1)) as f64 / 2.0, &mut rng, &mut out.edges.edges);
        out.edges.t += dt;
        out.seed.extensions.push(Extension::Time { dt, index });
        out.build_index();
        Ok(out)
    }

    /// Superpose a channel of mass eps at type x: the instance for μ + eps·δ_x.
    pub fn extend_channel(&self, x: f64, eps: f64, index: u64) -> Result<Instance> {
        let extra = AtomicMeasure::new(vec![(x, eps)])?;
        let mut out = self.clone();
        let n = self.params.n;
        let (old_mass, old_types) = match &self.channel {
            Some(ch) => (ch.mass, ch.types.clone()),
            None => (0.0, AtomicMeasure::zero()),
        };
        let mut per_site = match out.channel.take() {
            Some(ch) => ch.per_site,
            None => vec![Vec::new(); n],
        };
        let sampler = TypeSampler::new(&AtomicMeasure::dirac(x, 1.0));
        let mut rng = stream(self.seed.seed, tag::EXTEND_CHANNEL, index);
        push_channel_obs(&self.params, &self.signal, eps, &sampler, &mut rng, &mut per_site);
        let total = old_types.scaled(old_mass).plus_scaled(1.0, &extra);
        let (mass, types) = normalize(&total);
        out.channel = Some(ChannelData { mass, types, per_site });
        out.seed.extensions.push(Extension::Channel { x, eps, index });
        Ok(out)
    }

    /// Edge indices incident to site i (self-loops listed once).
    pub fn incident_edges(&self, i: usize) -> &[u32] {
        &self.adjacency[i]
    }

    /// JSON envelope: enough to regenerate the disorder from its seed.
    pub fn envelope(&self) -> InstanceEnvelope {
        InstanceEnvelope {
            params: self.params,
            mode: self.edges.mode,
            seed: self.seed.clone(),
            counts: InstanceCounts {
                edges: self.edges.edges.len(),
                observed_edges: self.edges.edges.iter().filter(|e| e.observed).count(),
                channel_obs: self.channel.as_ref().map_or(0, |c| c.per_site.iter().map(Vec::len).sum()),
                exp_obs: self.perturbation.as_ref().map_or(0, |p| p.channels.iter().map(Vec::len).sum()),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceCounts {
    pub edges: usize,
    pub observed_edges: usize,
    pub channel_obs: usize,
    pub exp_obs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceEnvelope {
    pub params: ModelParams,
    pub mode: EdgeMode,
    pub seed: SeedRecord,
    pub counts: InstanceCounts,
}

impl InstanceEnvelope {
    pub fn regenerate(&self) -> Result<Instance> {
        let base = match self.mode {
            EdgeMode::Binomial => sample_binomial_instance(&self.params, self.seed.seed)?,
            EdgeMode::Poisson => {
                sample_instance(&self.params, self.seed.t, &self.seed.mu, self.seed.perturb.as_ref(), self.seed.seed)?
            }
        };
        self.seed.extensions.iter().try_fold(base, |inst, ext| match *ext {
            Extension::Time { dt, index } => inst.extend_time(dt, index),
            Extension::Channel { x, eps, index } => inst.extend_channel(x, eps, index),
        })
    }
}

/// log[(c + Δs)^G (1 − (c + Δs)/N)^{1−G}].
#[inline]
pub fn edge_term(s: f64, observed: bool, params: &ModelParams) -> f64 {
    let a = params.c + params.delta * s;
    if observed {
        a.ln()
    } else {
        (1.0 - a / params.n as f64).ln()
    }
}

#[inline]
fn exp_term(sigma: f64, sigma_star: f64, lambda: f64, e: f64) -> f64 {
    (1.0 + lambda * sigma).ln() - lambda * e * sigma / (1.0 + lambda * sigma_star)
}

fn check_config(sigma: &[Spin], inst: &Instance) -> Result<()> {
    if sigma.len() != inst.n() {
        return Err(Error::InvalidParams(format!("configuration has length {}, expected {}", sigma.len(), inst.n())));
    }
    Ok(())
}

/// Full Hamiltonian: edges, channel, and both perturbations when present.
pub fn hamiltonian(sigma: &[Spin], inst: &Instance) -> Result<f64> {
    check_config(sigma, inst)?;
    check_params(&inst.params)?;
    let params = &inst.params;
    let mut total = 0.0;
    for e in &inst.edges.edges {
        let s = (sigma[e.i as usize] * sigma[e.j as usize]) as f64;
        total += edge_term(s, e.observed, params);
    }
    if let Some(ch) = &inst.channel {
        for (i, obs) in ch.per_site.iter().enumerate() {
            for o in obs {
                total += edge_term(sigma[i] as f64 * o.x, o.observed, params);
            }
        }
    }
    if let Some(pert) = &inst.perturbation {
        let l0 = pert.lambda0_n();
        for i in 0..inst.n() {
            let s = sigma[i] as f64;
            total += l0 * inst.signal.spins[i] as f64 * s + l0.sqrt() * pert.z[i] * s;
        }
        for (k, ch) in pert.channels.iter().enumerate() {
            let lambda = pert.spec.lambda[k + 1];
            for ob in ch {
                let i = ob.site as usize;
                total += exp_term(sigma[i] as f64, inst.signal.spins[i] as f64, lambda, ob.e);
            }
        }
    }
    Ok(total)
}

/// Hamiltonian of the original model (one term per pair i < j).
pub fn hamiltonian_original(sigma: &[Spin], params: &ModelParams, edges: &EdgeList) -> Result<f64> {
    check_params(params)?;
    if edges.mode != EdgeMode::Binomial {
        return Err(Error::Unsupported("hamiltonian_original expects binomial edge data".into()));
    }
    if sigma.len() != params.n {
        return Err(Error::InvalidParams("configuration length does not match N".into()));
    }
    Ok(edges
        .edges
        .iter()
        .map(|e| edge_term((sigma[e.i as usize] * sigma[e.j as usize]) as f64, e.observed, params))
        .sum())
}

/// H(σ with σ_i = +1) − H(σ with σ_i = −1), from the terms touching i only.
pub fn local_field(i: usize, sigma: &[Spin], inst: &Instance) -> f64 {
    let params = &inst.params;
    let mut d = 0.0;
    for &idx in &inst.adjacency[i] {
        let e = inst.edges.edges[idx as usize];
        if e.i == e.j {
            continue;
        }
        let other = if e.i as usize == i { e.j } else { e.i } as usize;
        let so = sigma[other] as f64;
        d += edge_term(so, e.observed, params) - edge_term(-so, e.observed, params);
    }
    if let Some(ch) = &inst.channel {
        for o in &ch.per_site[i] {
            d += edge_term(o.x, o.observed, params) - edge_term(-o.x, o.observed, params);
        }
    }
    if let Some(pert) = &inst.perturbation {
        let l0 = pert.lambda0_n();
        d += 2.0 * (l0 * inst.signal.spins[i] as f64 + l0.sqrt() * pert.z[i]);
        let ss = inst.signal.spins[i] as f64;
        for &(k, j) in &inst.exp_by_site[i] {
            let lambda = pert.spec.lambda[k as usize + 1];
            let e = pert.channels[k as usize][j as usize].e;
            d += exp_term(1.0, ss, lambda, e) - exp_term(-1.0, ss, lambda, e);
        }
    }
    d
}

/// H(σ) = constant + Σ h_i σ_i + Σ_{i<j} J_ij σ_i σ_j. Every Hamiltonian in the
/// model has this form because spins take two values.
#[derive(Clone, Debug)]
pub struct IsingForm {
    pub n: usize,
    pub constant: f64,
    pub field: Vec<f64>,
    /// Dense symmetric couplings, row-major n×n, zero diagonal.
    pub coupling: Vec<f64>,
}

impl IsingForm {
    pub fn compile(inst: &Instance) -> Result<Self> {
        check_params(&inst.params)?;
        let params = &inst.params;
        let n = inst.n();
        let mut form = IsingForm { n, constant: 0.0, field: vec![0.0; n], coupling: vec![0.0; n * n] };
        let (ep, em) = (edge_term(1.0, true, params), edge_term(-1.0, true, params));
        let (np, nm) = (edge_term(1.0, false, params), edge_term(-1.0, false, params));
        for e in &inst.edges.edges {
            let (tp, tm) = if e.observed { (ep, em) } else { (np, nm) };
            if e.i == e.j {
                form.constant += tp;
                continue;
            }
            form.constant += 0.5 * (tp + tm);
            let half = 0.5 * (tp - tm);
            let (i, j) = (e.i as usize, e.j as usize);
            form.coupling[i * n + j] += half;
            form.coupling[j * n + i] += half;
        }
        if let Some(ch) = &inst.channel {
            for (i, obs) in ch.per_site.iter().enumerate() {
                for o in obs {
                    let tp = edge_term(o.x, o.observed, params);
                    let tm = edge_term(-o.x, o.observed, params);
                    form.constant += 0.5 * (tp + tm);
                    form.field[i] += 0.5 * (tp - tm);
                }
            }
        }
        if let Some(pert) = &inst.perturbation {
            let l0 = pert.lambda0_n();
            for i in 0..n {
                form.field[i] += l0 * inst.signal.spins[i] as f64 + l0.sqrt() * pert.z[i];
            }
            for (k, ch) in pert.channels.iter().enumerate() {
                let lambda = pert.spec.lambda[k + 1];
                for ob in ch {
                    let i = ob.site as usize;
                    let ss = inst.signal.spins[i] as f64;
                    let tp = exp_term(1.0, ss, lambda, ob.e);
                    let tm = exp_term(-1.0, ss, lambda, ob.e);
                    form.constant += 0.5 * (tp + tm);
                    form.field[i] += 0.5 * (tp - tm);
                }
            }
        }
        Ok(form)
    }

    pub fn energy(&self, sigma: &[Spin]) -> f64 {
        let n = self.n;
        let mut e = self.constant;
        for i in 0..n {
            let si = sigma[i] as f64;
            e += self.field[i] * si;
            let row = &self.coupling[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in (i + 1)..n {
                acc += row[j] * sigma[j] as f64;
            }
            e += si * acc;
        }
        e
    }

    /// Σ_j J_ij σ_j + h_i, half the energy change of flipping σ_i from −1 to +1.
    pub fn local(&self, i: usize, sigma: &[Spin]) -> f64 {
        let row = &self.coupling[i * self.n..(i + 1) * self.n];
        self.field[i] + row.iter().zip(sigma).map(|(j, s)| j * *s as f64).sum::<f64>()
    }
}

/// log P*(σ) = Σ_i [(1+σ_i)/2 log p + (1−σ_i)/2 log(1−p)].
pub fn log_prior(sigma: &[Spin], p: f64) -> f64 {
    sigma.iter().map(|&s| if s > 0 { p.ln() } else { (1.0 - p).ln() }).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize) -> ModelParams {
        ModelParams::new(n, 3.0, -1.5, 0.6).unwrap()
    }

    fn random_config(n: usize, seed: u64) -> Vec<Spin> {
        let mut rng = stream(seed, 99, 0);
        (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()
    }

    #[test]
    fn empty_instance_has_zero_hamiltonian() {
        let inst = sample_instance(&params(6), 0.0, &AtomicMeasure::zero(), None, 1).unwrap();
        assert!(inst.edges.edges.is_empty() && inst.channel.is_none());
        assert_eq!(hamiltonian(&random_config(6, 2), &inst).unwrap(), 0.0);
    }

    #[test]
    fn single_edge_term() {
        let mut inst = sample_instance(&params(6), 0.0, &AtomicMeasure::zero(), None, 1).unwrap();
        inst.edges.edges.push(Edge { i: 1, j: 4, observed: true });
        inst.build_index();
        let sigma = random_config(6, 5);
        let s = (sigma[1] * sigma[4]) as f64;
        let expect = (3.0 - 1.5 * s).ln();
        assert!((hamiltonian(&sigma, &inst).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn compiled_form_matches_hamiltonian() {
        let mu = AtomicMeasure::new(vec![(0.5, 0.3), (-0.25, 0.4)]).unwrap();
        let spec = PerturbSpec::with_channels(3);
        let inst = sample_instance(&params(9), 1.3, &mu, Some(&spec), 11).unwrap();
        let form = IsingForm::compile(&inst).unwrap();
        for s in 0..20 {
            let sigma = random_config(9, s);
            let a = hamiltonian(&sigma, &inst).unwrap();
            let b = form.energy(&sigma);
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn local_field_matches_full_difference() {
        let mu = AtomicMeasure::new(vec![(0.5, 0.5)]).unwrap();
        let spec = PerturbSpec::with_channels(2);
        let inst = sample_instance(&params(8), 1.0, &mu, Some(&spec), 21).unwrap();
        let form = IsingForm::compile(&inst).unwrap();
        let mut sigma = random_config(8, 3);
        for i in 0..8 {
            sigma[i] = 1;
            let hp = hamiltonian(&sigma, &inst).unwrap();
            sigma[i] = -1;
            let hm = hamiltonian(&sigma, &inst).unwrap();
            let lf = local_field(i, &sigma, &inst);
            assert!((lf - (hp - hm)).abs() < 1e-10);
            assert!((2.0 * form.local(i, &sigma) - (hp - hm)).abs() < 1e-10);
        }
    }

    #[test]
    fn gaussian_only_local_field() {
        let spec = PerturbSpec::with_channels(1);
        let mut inst = sample_instance(&params(5), 0.0, &AtomicMeasure::zero(), Some(&spec), 4).unwrap();
        inst.perturbation.as_mut().unwrap().channels[0].clear();
        inst.build_index();
        let pert = inst.perturbation.as_ref().unwrap();
        let l0 = pert.lambda0_n();
        let sigma = random_config(5, 8);
        for i in 0..5 {
            let expect = 2.0 * (l0 * inst.signal.spins[i] as f64 + l0.sqrt() * pert.z[i]);
            assert!((local_field(i, &sigma, &inst) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_small_n_and_negative_weights() {
        let p = ModelParams::new(1, 3.0, -1.0, 0.5).unwrap();
        assert!(sample_instance(&p, 1.0, &AtomicMeasure::zero(), None, 0).is_err());
        let bad = AtomicMeasure { atoms: vec![(0.0, -1.0)] };
        assert!(sample_instance(&params(5), 1.0, &bad, None, 0).is_err());
        let tiny = ModelParams::new(4, 3.0, -1.5, 0.5).unwrap();
        assert!(sample_instance(&tiny, 1.0, &AtomicMeasure::zero(), None, 0).is_err());
    }

    #[test]
    fn binomial_all_unobserved_delta_zero() {
        let p = ModelParams::new(7, 2.0, 0.0, 0.5).unwrap();
        let mut inst = sample_binomial_instance(&p, 3).unwrap();
        for e in inst.edges.edges.iter_mut() {
            e.observed = false;
        }
        let sigma = random_config(7, 1);
        let expect = 21.0 * (1.0 - 2.0 / 7.0f64).ln();
        assert!((hamiltonian_original(&sigma, &p, &inst.edges).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn binomial_three_site_hand_sum() {
        let p = ModelParams::new(3, 1.0, -0.5, 0.5).unwrap();
        let edges = EdgeList {
            mode: EdgeMode::Binomial,
            t: 1.0,
            edges: vec![
                Edge { i: 0, j: 1, observed: true },
                Edge { i: 0, j: 2, observed: false },
                Edge { i: 1, j: 2, observed: true },
            ],
        };
        let sigma = [1, -1, -1];
        // pairs: (0,1) s=-1 observed, (0,2) s=-1 unobserved, (1,2) s=+1 observed
        let expect = (1.5f64).ln() + (1.0 - 1.5 / 3.0f64).ln() + (0.5f64).ln();
        assert!((hamiltonian_original(&sigma, &p, &edges).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn seeded_determinism_and_regeneration() {
        let mu = AtomicMeasure::new(vec![(0.5, 0.5)]).unwrap();
        let a = sample_instance(&params(10), 1.0, &mu, Some(&PerturbSpec::default()), 77).unwrap();
        let b = sample_instance(&params(10), 1.0, &mu, Some(&PerturbSpec::default()), 77).unwrap();
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.channel, b.channel);
        assert_eq!(a.perturbation, b.perturbation);
        let ext = a.extend_time(0.3, 1).unwrap().extend_channel(0.25, 0.1, 2).unwrap();
        let env = ext.envelope();
        let json = serde_json::to_string(&env).unwrap();
        let back: InstanceEnvelope = serde_json::from_str(&json).unwrap();
        let regen = back.regenerate().unwrap();
        assert_eq!(regen.edges, ext.edges);
        assert_eq!(regen.channel, ext.channel);
    }

    #[test]
    fn delta_zero_hamiltonian_is_sigma_independent() {
        let p = ModelParams::new(8, 2.0, 0.0, 0.3).unwrap();
        let inst = sample_instance(&p, 1.0, &AtomicMeasure::dirac(0.7, 0.5), None, 5).unwrap();
        let vals: Vec<f64> = (0..30).map(|s| hamiltonian(&random_config(8, s), &inst).unwrap()).collect();
        assert!(vals.iter().all(|v| *v == vals[0]));
    }
}
