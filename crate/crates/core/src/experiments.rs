//! Seeded simulation studies producing long-format result tables.
//!
//! Every study is driven by a [`StudySpec`] and its master seed. Dataset
//! replicate r uses the seed `derive_seed(master, [DATASET, r])` (size sweeps
//! add n to the path); that seed is written on every row, and the `*_cell`
//! functions regenerate the rows of one replicate from it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::car::{mean_outcome, CarSpectrum, HeteroCarParams, NoiseModel, OutcomeSampler};
use crate::criterion::{gap_diagnostics_with, Criterion, GapBoundCalculator};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::graph::{
    generate_bernoulli_network, generate_bernoulli_raw, generate_pm1_covariates, load_dataset,
    repair_isolated, subsample_network, CovariateMatrix, CovariateOptions, Covariates,
    EdgeListOptions, IsolationStrategy, Network,
};
use crate::optimizer::{
    random_balanced_design, random_iid_design, solve, DesignProblem, MethodChoice,
    SolveOptions, SolveReport,
};
use crate::rng::{derive_seed, seeded_rng, stream};
use crate::stats::median;

/// Which study a spec describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    AlphaSweep,
    RhoRobustness,
    NetworkComparison,
    SizeSweep,
    PseudoExperiment,
    GapHistogram,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::AlphaSweep => "alpha_sweep",
            StudyKind::RhoRobustness => "rho_robustness",
            StudyKind::NetworkComparison => "network_comparison",
            StudyKind::SizeSweep => "size_sweep",
            StudyKind::PseudoExperiment => "pseudo_experiment",
            StudyKind::GapHistogram => "gap_histogram",
        }
    }
}

/// Solver settings of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub method: MethodChoice,
    pub restarts: usize,
    /// Per-solve wall-clock budget in seconds. Results then depend on timing.
    pub time_budget_secs: Option<f64>,
    pub relax: bool,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            method: MethodChoice::Auto,
            restarts: 32,
            time_budget_secs: None,
            relax: true,
        }
    }
}

impl SolverSpec {
    fn options(&self, seed: u64) -> SolveOptions {
        SolveOptions {
            method: self.method,
            restarts: self.restarts,
            seed,
            time_budget: self.time_budget_secs.map(Duration::from_secs_f64),
            relax: self.relax,
            ..Default::default()
        }
    }
}

/// Settings of the pseudo-experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoSpec {
    /// Synthetic population size (ignored when `edges` is given).
    pub population: usize,
    pub population_density: f64,
    /// Raw 0/1 covariate columns of the synthetic population.
    pub raw_covariates: usize,
    /// Nodes sampled per replicate before isolated nodes are removed.
    pub subsample: usize,
    pub random_designs: usize,
    /// Outcome draws per replicate.
    pub replications: usize,
    pub theta: f64,
    pub sigma2: f64,
    /// Optional real data set (edge list and covariate CSV).
    pub edges: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    pub one_based: bool,
    pub skip_header: bool,
}

impl Default for PseudoSpec {
    fn default() -> Self {
        PseudoSpec {
            population: 2000,
            population_density: 0.00174,
            raw_covariates: 20,
            subsample: 400,
            random_designs: 10,
            replications: 50,
            theta: 1.0,
            sigma2: 1.0,
            edges: None,
            covariates: None,
            one_based: false,
            skip_header: false,
        }
    }
}

/// Settings of the surrogate-gap study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapSpec {
    pub covariate_sd: f64,
    pub designs: usize,
    /// Prior draws, taken as antithetic pairs (u, 1 − u).
    pub prior_draws: usize,
    /// α of the probabilistic bound.
    pub bound_alpha: f64,
}

impl Default for GapSpec {
    fn default() -> Self {
        GapSpec {
            covariate_sd: 10.0,
            designs: 400,
            prior_draws: 200,
            bound_alpha: 0.05,
        }
    }
}

/// A study description, read from TOML. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySpec {
    pub kind: StudyKind,
    pub master_seed: u64,
    pub replicates: usize,
    pub n: usize,
    pub p: usize,
    pub density: f64,
    /// Network sizes of a size sweep.
    pub sizes: Vec<usize>,
    pub rho0: f64,
    pub rho_t: Vec<f64>,
    /// α grid of an α sweep.
    pub alphas: Vec<f64>,
    /// α of every other study.
    pub alpha: f64,
    pub solver: SolverSpec,
    pub pseudo: PseudoSpec,
    pub gap: GapSpec,
    /// Record per-replicate wall time in the rows.
    pub timing: bool,
}

impl Default for StudySpec {
    fn default() -> Self {
        StudySpec {
            kind: StudyKind::AlphaSweep,
            master_seed: 20_240_501,
            replicates: 10,
            n: 50,
            p: 10,
            density: 0.08,
            sizes: vec![50, 100, 500],
            rho0: 0.5,
            rho_t: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            alphas: vec![0.1, 0.01, 0.001, 0.0001],
            alpha: 0.001,
            solver: SolverSpec::default(),
            pseudo: PseudoSpec::default(),
            gap: GapSpec::default(),
            timing: false,
        }
    }
}

const BUNDLED: &[(&str, &str)] = &[
    ("alpha_sweep_small", include_str!("../studies/alpha_sweep_small.toml")),
    ("rho_robustness_small", include_str!("../studies/rho_robustness_small.toml")),
    ("network_comparison_small", include_str!("../studies/network_comparison_small.toml")),
    ("size_sweep_small", include_str!("../studies/size_sweep_small.toml")),
    ("pseudo_experiment_small", include_str!("../studies/pseudo_experiment_small.toml")),
    ("gap_histogram_small", include_str!("../studies/gap_histogram_small.toml")),
];

impl StudySpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: StudySpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Names of the specs shipped with the crate.
    pub fn bundled_names() -> Vec<&'static str> {
        BUNDLED.iter().map(|(name, _)| *name).collect()
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("no bundled study named {name:?}")))?;
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Scale the desk-sized defaults up to the original study sizes.
    pub fn full_scale(mut self) -> Self {
        match self.kind {
            StudyKind::PseudoExperiment => {
                self.replicates = self.replicates.max(25);
                self.pseudo.population = 10_000;
                // Same mean population degree as the desk default, so about half of
                // each 2000-node sample survives isolated-node removal.
                self.pseudo.population_density = 0.00035;
                self.pseudo.subsample = 2000;
                self.pseudo.replications = 100;
            }
            StudyKind::SizeSweep => {
                for n in [1000, 2000] {
                    if !self.sizes.contains(&n) {
                        self.sizes.push(n);
                    }
                }
            }
            _ => self.replicates = self.replicates.max(10),
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if !(self.density > 0.0 && self.density < 1.0) {
            return bad(format!("density must lie in (0, 1), got {}", self.density));
        }
        if self.p == 0 || self.p + 2 > self.n {
            return bad(format!("need 1 ≤ p ≤ n − 2, got p = {} with n = {}", self.p, self.n));
        }
        if !(self.rho0 >= 0.0 && self.rho0 < 1.0) {
            return bad(format!("rho0 must lie in [0, 1), got {}", self.rho0));
        }
        if self.rho_t.is_empty() {
            return bad("rho_t grid is empty".into());
        }
        if let Some(r) = self.rho_t.iter().find(|r| !(**r >= 0.0 && **r < 1.0)) {
            return bad(format!("rho_t value {r} outside [0, 1)"));
        }
        let alpha_ok = |a: f64| a > 0.0 && a < 1.0;
        if !alpha_ok(self.alpha) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        match self.kind {
            StudyKind::AlphaSweep if self.alphas.is_empty() => return bad("alphas grid is empty".into()),
            StudyKind::AlphaSweep => {
                if let Some(a) = self.alphas.iter().find(|a| !alpha_ok(**a)) {
                    return bad(format!("alphas value {a} outside (0, 1)"));
                }
            }
            StudyKind::SizeSweep => {
                if self.sizes.is_empty() {
                    return bad("sizes grid is empty".into());
                }
                if let Some(n) = self.sizes.iter().find(|n| self.p + 2 > **n) {
                    return bad(format!("size {n} too small for p = {}", self.p));
                }
            }
            StudyKind::PseudoExperiment => {
                let ps = &self.pseudo;
                if ps.replications == 0 || ps.random_designs == 0 {
                    return bad("pseudo.replications and pseudo.random_designs must be positive".into());
                }
                if ps.edges.is_some() != ps.covariates.is_some() {
                    return bad("pseudo.edges and pseudo.covariates must be given together".into());
                }
                if !(ps.sigma2 > 0.0) {
                    return bad("pseudo.sigma2 must be positive".into());
                }
            }
            StudyKind::GapHistogram => {
                let g = &self.gap;
                if g.designs == 0 || g.prior_draws < 2 || g.prior_draws % 2 == 1 {
                    return bad("gap.designs must be positive and gap.prior_draws even and ≥ 2".into());
                }
                if !(self.rho0 > 0.0) || !alpha_ok(g.bound_alpha) {
                    return bad("gap study needs rho0 in (0, 1) and bound_alpha in (0, 1)".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One long-format result row. Columns not used by a study are left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub study: String,
    pub replicate: usize,
    /// Dataset seed that regenerates this row.
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub design: String,
    pub rho0: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha_used: Option<f64>,
    pub feasible: Option<bool>,
    pub rho_t: Option<f64>,
    pub t: Option<f64>,
    pub t1: Option<f64>,
    pub t2: Option<f64>,
    pub pip: Option<f64>,
    /// PIP at ρ_t of the design optimized at ρ_t.
    pub pip_rho_t_design: Option<f64>,
    pub pip_difference: Option<f64>,
    pub t1_improvement: Option<f64>,
    pub t2_improvement: Option<f64>,
    pub mse: Option<f64>,
    pub mse_percentile: Option<f64>,
    pub draws: Option<usize>,
    pub fit_failures: Option<usize>,
    pub t_rho0: Option<f64>,
    pub gap: Option<f64>,
    pub second_derivative: Option<f64>,
    pub bound_a: Option<f64>,
    pub bound_b: Option<f64>,
    pub error: Option<String>,
    pub wall_time_secs: Option<f64>,
}

/// Column order of the CSV output.
pub const CSV_HEADER: &[&str] = &[
    "study",
    "replicate",
    "seed",
    "n",
    "m",
    "p",
    "design",
    "rho0",
    "alpha",
    "alpha_used",
    "feasible",
    "rho_t",
    "t",
    "t1",
    "t2",
    "pip",
    "pip_rho_t_design",
    "pip_difference",
    "t1_improvement",
    "t2_improvement",
    "mse",
    "mse_percentile",
    "draws",
    "fit_failures",
    "t_rho0",
    "gap",
    "second_derivative",
    "bound_a",
    "bound_b",
    "error",
    "wall_time_secs",
];

/// Rows of a study plus the spec that produced them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyResult {
    pub spec: StudySpec,
    pub rows: Vec<StudyRow>,
}

#[derive(Serialize)]
struct Metadata<'a> {
    study: &'a str,
    software: &'a str,
    version: &'a str,
    master_seed: u64,
    rows: usize,
    columns: &'a [&'a str],
    spec: &'a StudySpec,
}

impl StudyResult {
    pub fn to_csv(&self) -> Result<String> {
        write_rows_csv(&self.rows)
    }

    /// Sidecar metadata: spec echo, software version and master seed.
    pub fn metadata_json(&self) -> String {
        let meta = Metadata {
            study: self.spec.kind.name(),
            software: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            master_seed: self.spec.master_seed,
            rows: self.rows.len(),
            columns: CSV_HEADER,
            spec: &self.spec,
        };
        serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n"
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes") + "\n"
    }

    /// Write `<path>` (CSV) and `<path>.meta.json`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))?;
        let meta = metadata_path(path);
        std::fs::write(&meta, self.metadata_json()).map_err(|e| Error::io(&meta, e))
    }
}

pub fn metadata_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_rows_csv(rows: &[StudyRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_HEADER).map_err(csv_err)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_rows_csv(text: &str) -> Result<Vec<StudyRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<StudyRow>, _>>()
        .map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Median of `value` over rows grouped by `key`, skipping missing values.
pub fn group_medians(
    rows: &[StudyRow],
    key: impl Fn(&StudyRow) -> Option<String>,
    value: impl Fn(&StudyRow) -> Option<f64>,
) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in rows {
        if let (Some(k), Some(v)) = (key(row), value(row)) {
            groups.entry(k).or_default().push(v);
        }
    }
    groups.into_iter().map(|(k, v)| (k, median(&v))).collect()
}

/// Run the study described by `spec`.
pub fn run_study(spec: &StudySpec) -> Result<StudyResult> {
    spec.validate()?;
    match spec.kind {
        StudyKind::AlphaSweep => run_alpha_sweep(spec),
        StudyKind::RhoRobustness => run_rho_robustness(spec),
        StudyKind::NetworkComparison => run_network_comparison(spec),
        StudyKind::SizeSweep => run_size_sweep(spec),
        StudyKind::PseudoExperiment => run_pseudo_experiment(spec),
        StudyKind::GapHistogram => run_gap_histogram(spec),
    }
}

/// Seed of dataset replicate `replicate`.
pub fn dataset_seed(master: u64, replicate: usize) -> u64 {
    derive_seed(master, &[stream::DATASET, replicate as u64])
}

/// Seed of replicate `replicate` of a size-sweep cell with n nodes.
pub fn size_sweep_seed(master: u64, n: usize, replicate: usize) -> u64 {
    derive_seed(master, &[stream::DATASET, n as u64, replicate as u64])
}

fn run_replicates(
    spec: &StudySpec,
    cell: impl Fn(usize, u64) -> Result<Vec<StudyRow>> + Sync,
) -> Result<StudyResult> {
    let blocks = (0..spec.replicates)
        .into_par_iter()
        .map(|r| timed(spec, || cell(r, dataset_seed(spec.master_seed, r))))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult {
        spec: spec.clone(),
        rows: blocks.into_iter().flatten().collect(),
    })
}

fn timed(spec: &StudySpec, f: impl FnOnce() -> Result<Vec<StudyRow>>) -> Result<Vec<StudyRow>> {
    let start = Instant::now();
    let mut rows = f()?;
    if spec.timing {
        let secs = start.elapsed().as_secs_f64();
        for row in &mut rows {
            row.wall_time_secs = Some(secs);
        }
    }
    Ok(rows)
}

/// Bernoulli network with ±1 covariates, as used by the synthetic studies.
pub fn synthetic_dataset(
    n: usize,
    p: usize,
    density: f64,
    seed: u64,
) -> Result<(Network, CovariateMatrix)> {
    let mut rng = seeded_rng(seed);
    let net = generate_bernoulli_network(n, density, &mut rng)?;
    let f = generate_pm1_covariates(n, p, &mut rng)?;
    Ok((net, f))
}

/// The 20-node bipartite illustration: left nodes 0..9, right nodes 10..19,
/// left i adjacent to right 10 + (i + k) mod 10 for k ∈ {0, 1, 3}. The ±1
/// covariate takes +1 on the first five nodes of each side.
pub fn bipartite_instance() -> (Network, CovariateMatrix) {
    let edges = (0..10).flat_map(|i| [0, 1, 3].map(|k| (i, 10 + (i + k) % 10)));
    let net = Network::from_edges(20, edges).expect("valid edges");
    let z = DMatrix::from_fn(20, 1, |i, _| if i % 10 < 5 { 1.0 } else { -1.0 });
    let f = CovariateMatrix::from_covariates(&z).expect("full rank");
    (net, f)
}

fn base_row(spec: &StudySpec, replicate: usize, seed: u64, net: &Network, p: usize) -> StudyRow {
    StudyRow {
        study: spec.kind.name().to_string(),
        replicate,
        seed,
        n: net.n(),
        m: net.total_degree(),
        p,
        ..Default::default()
    }
}

fn solver_seed(seed: u64) -> u64 {
    derive_seed(seed, &[stream::SOLVER])
}

fn solve_hybrid(
    spec: &StudySpec,
    net: &Network,
    f: &CovariateMatrix,
    rho0: f64,
    alpha: f64,
    seed: u64,
) -> Result<SolveReport> {
    let problem = DesignProblem::hybrid(net, f, rho0, alpha)?;
    solve(&problem, &spec.solver.options(solver_seed(seed)))
}

fn solve_baseline(spec: &StudySpec, f: &CovariateMatrix, seed: u64) -> Result<SolveReport> {
    let problem = DesignProblem::no_network(f)?;
    solve(&problem, &spec.solver.options(solver_seed(seed)))
}

/// Record criterion values and PIP of `x` at correlation `crit.rho()`.
fn fill_criterion(row: &mut StudyRow, crit: &Criterion<'_>, x: &Design) {
    match crit.evaluate(x) {
        Ok(b) => {
            row.t = Some(b.t);
            row.t1 = Some(b.t1);
            row.t2 = Some(b.t2);
            row.t1_improvement = Some(crit.expected_t1() - b.t1);
            row.t2_improvement = Some(crit.expected_t2() - b.t2);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    match crit.pip(x) {
        Ok(v) => row.pip = Some(v),
        Err(e) => row.error = Some(e.to_string()),
    }
}

fn fill_report(row: &mut StudyRow, report: &SolveReport) {
    row.alpha_used = report.alpha_used;
    row.feasible = Some(report.feasible);
}

fn error_row(mut row: StudyRow, e: &Error) -> StudyRow {
    row.error = Some(e.to_string());
    row
}

/// Rows of one α-sweep replicate: for every α the locally optimal design at
/// ρ0 and its criterion values and PIP at every ρ_t.
pub fn alpha_sweep_cell(spec: &StudySpec, replicate: usize, seed: u64) -> Result<Vec<StudyRow>> {
    let (net, f) = synthetic_dataset(spec.n, spec.p, spec.density, seed)?;
    let crits = spec
        .rho_t
        .iter()
        .map(|&r| Criterion::new(&net, &f, r))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &alpha in &spec.alphas {
        let mut base = base_row(spec, replicate, seed, &net, spec.p);
        base.design = "local_opt".into();
        base.rho0 = Some(spec.rho0);
        base.alpha = Some(alpha);
        let report = solve_hybrid(spec, &net, &f, spec.rho0, alpha, seed);
        for crit in &crits {
            let mut row = base.clone();
            row.rho_t = Some(crit.rho());
            match &report {
                Ok(rep) => {
                    fill_report(&mut row, rep);
                    fill_criterion(&mut row, crit, &rep.design);
                }
                Err(e) => row = error_row(row, e),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn run_alpha_sweep(spec: &StudySpec) -> Result<StudyResult> {
    run_replicates(spec, |r, seed| alpha_sweep_cell(spec, r, seed))
}

/// Rows of one robustness replicate: PIP at ρ_t of the design optimized at
/// ρ0 and of the design optimized at ρ_t. Both solves share one solver seed.
pub fn rho_robustness_cell(spec: &StudySpec, replicate: usize, seed: u64) -> Result<Vec<StudyRow>> {
    let (net, f) = synthetic_dataset(spec.n, spec.p, spec.density, seed)?;
    let local = solve_hybrid(spec, &net, &f, spec.rho0, spec.alpha, seed);
    let mut rows = Vec::new();
    for &rho_t in &spec.rho_t {
        let mut row = base_row(spec, replicate, seed, &net, spec.p);
        row.design = "local_opt".into();
        row.rho0 = Some(spec.rho0);
        row.alpha = Some(spec.alpha);
        row.rho_t = Some(rho_t);
        let crit = Criterion::new(&net, &f, rho_t)?;
        let at_rho_t = solve_hybrid(spec, &net, &f, rho_t, spec.alpha, seed);
        match (&local, &at_rho_t) {
            (Ok(a), Ok(b)) => {
                fill_report(&mut row, a);
                fill_criterion(&mut row, &crit, &a.design);
                match crit.pip(&b.design) {
                    Ok(v) => {
                        row.pip_rho_t_design = Some(v);
                        row.pip_difference = row.pip.map(|p| p - v);
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
            }
            (Err(e), _) | (_, Err(e)) => row = error_row(row, e),
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn run_rho_robustness(spec: &StudySpec) -> Result<StudyResult> {
    run_replicates(spec, |r, seed| rho_robustness_cell(spec, r, seed))
}

fn comparison_rows(
    spec: &StudySpec,
    replicate: usize,
    seed: u64,
    net: &Network,
    f: &CovariateMatrix,
) -> Result<Vec<StudyRow>> {
    let designs = [
        ("network", solve_hybrid(spec, net, f, spec.rho0, spec.alpha, seed)),
        ("no_network", solve_baseline(spec, f, seed)),
    ];
    let mut rows = Vec::new();
    for &rho_t in &spec.rho_t {
        let crit = Criterion::new(net, f, rho_t)?;
        for (label, report) in &designs {
            let mut row = base_row(spec, replicate, seed, net, spec.p);
            row.design = (*label).into();
            row.rho0 = Some(spec.rho0);
            row.alpha = (*label == "network").then_some(spec.alpha);
            row.rho_t = Some(rho_t);
            match report {
                Ok(rep) => {
                    fill_report(&mut row, rep);
                    fill_criterion(&mut row, &crit, &rep.design);
                }
                Err(e) => row = error_row(row, e),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Rows of one comparison replicate: the hybrid and the no-network design,
/// each evaluated at every ρ_t, with T1/T2 improvements over the
/// random-balanced-design expectations.
pub fn network_comparison_cell(
    spec: &StudySpec,
    replicate: usize,
    seed: u64,
) -> Result<Vec<StudyRow>> {
    let (net, f) = synthetic_dataset(spec.n, spec.p, spec.density, seed)?;
    comparison_rows(spec, replicate, seed, &net, &f)
}

pub fn run_network_comparison(spec: &StudySpec) -> Result<StudyResult> {
    run_replicates(spec, |r, seed| network_comparison_cell(spec, r, seed))
}

/// Network comparison at network size n.
pub fn size_sweep_cell(
    spec: &StudySpec,
    n: usize,
    replicate: usize,
    seed: u64,
) -> Result<Vec<StudyRow>> {
    let (net, f) = synthetic_dataset(n, spec.p, spec.density, seed)?;
    comparison_rows(spec, replicate, seed, &net, &f)
}

pub fn run_size_sweep(spec: &StudySpec) -> Result<StudyResult> {
    let cells: Vec<(usize, usize)> = spec
        .sizes
        .iter()
        .flat_map(|&n| (0..spec.replicates).map(move |r| (n, r)))
        .collect();
    let blocks = cells
        .into_par_iter()
        .map(|(n, r)| {
            timed(spec, || size_sweep_cell(spec, n, r, size_sweep_seed(spec.master_seed, n, r)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult {
        spec: spec.clone(),
        rows: blocks.into_iter().flatten().collect(),
    })
}

/// Synthetic stand-in for a large social network: a sparse Bernoulli graph
/// (isolated nodes allowed) and 0/1 covariates whose proportions are spread
/// over [0.05, 0.85].
pub fn synthetic_population(spec: &PseudoSpec, seed: u64) -> Result<(Network, Covariates)> {
    let mut rng = seeded_rng(seed);
    let net = generate_bernoulli_raw(spec.population, spec.population_density, &mut rng)?;
    let k = spec.raw_covariates.max(1);
    let props: Vec<f64> = (0..k)
        .map(|j| 0.05 + 0.8 * j as f64 / (k.max(2) - 1) as f64)
        .collect();
    let z = DMatrix::from_fn(spec.population, k, |_, j| {
        if rng.random_bool(props[j]) { 1.0 } else { 0.0 }
    });
    Ok((net, Covariates::new(z)))
}

/// The population a pseudo-experiment samples from: loaded data when given,
/// else the synthetic stand-in (seeded from the master seed).
pub fn pseudo_population(spec: &StudySpec) -> Result<(Network, Covariates)> {
    let ps = &spec.pseudo;
    match (&ps.edges, &ps.covariates) {
        (Some(e), Some(c)) => load_dataset(
            e,
            c,
            EdgeListOptions {
                one_based: ps.one_based,
                num_nodes: None,
            },
            CovariateOptions {
                skip_header: ps.skip_header,
                keep_first: None,
            },
        ),
        _ => synthetic_population(ps, derive_seed(spec.master_seed, &[stream::DATASET])),
    }
}

/// Seed of pseudo-experiment replicate r.
pub fn pseudo_seed(master: u64, replicate: usize) -> u64 {
    derive_seed(master, &[stream::SUBSAMPLE, replicate as u64])
}

/// MSE percentile of `target` among `reference`: (#{<} + ½·#{=}) / len.
pub fn mse_percentile(target: f64, reference: &[f64]) -> f64 {
    let below = reference.iter().filter(|&&v| v < target).count() as f64;
    let ties = reference.iter().filter(|&&v| v == target).count() as f64;
    (below + 0.5 * ties) / reference.len() as f64
}

/// Rows of one pseudo-experiment replicate: sub-network sampling, isolated
/// node removal, the two optimal designs plus random balanced designs, and
/// the MSE of θ̂ from profile-ML fits under heterogeneous-ρ outcomes.
pub fn pseudo_experiment_cell(
    spec: &StudySpec,
    population: &(Network, Covariates),
    replicate: usize,
    seed: u64,
) -> Result<Vec<StudyRow>> {
    let ps = &spec.pseudo;
    let mut rng = seeded_rng(derive_seed(seed, &[stream::SUBSAMPLE]));
    let k = ps.subsample.min(population.0.n());
    let (sub, cov) = subsample_network(&population.0, &population.1, k, &mut rng)?;
    let repaired = repair_isolated(&sub, IsolationStrategy::Remove, &mut rng)?;
    let net = repaired.network;
    let cov = match &repaired.kept {
        Some(kept) => cov.select_rows(kept),
        None => cov,
    };
    let f = CovariateMatrix::prepare(&cov, Some(spec.p))?.matrix;
    let p = f.ncols() - 1;
    let n = net.n();

    let mut labelled: Vec<(String, Result<Design>)> = vec![
        (
            "local_opt".into(),
            solve_hybrid(spec, &net, &f, spec.rho0, spec.alpha, seed).map(|r| r.design),
        ),
        ("no_network".into(), solve_baseline(spec, &f, seed).map(|r| r.design)),
    ];
    let mut design_rng = seeded_rng(derive_seed(seed, &[stream::RANDOM_DESIGNS]));
    for j in 0..ps.random_designs {
        labelled.push((format!("random_{}", j + 1), Ok(random_balanced_design(n, &mut design_rng))));
    }

    let mut rho_rng = seeded_rng(derive_seed(seed, &[stream::HETERO_RHO]));
    let rhos: Vec<f64> = (0..n).map(|_| rho_rng.random::<f64>()).collect();
    let sampler = OutcomeSampler::new(
        &net,
        &NoiseModel::Heterogeneous(HeteroCarParams::new(rhos, ps.sigma2)?),
    )?;
    let spectrum = CarSpectrum::new(&net)?;
    let beta = vec![1.0; f.ncols()];
    let means: Vec<Option<DVector<f64>>> = labelled
        .iter()
        .map(|(_, d)| d.as_ref().ok().and_then(|x| mean_outcome(&f, x, ps.theta, &beta).ok()))
        .collect();

    let mut sq_err = vec![0.0; labelled.len()];
    let mut ok = vec![0usize; labelled.len()];
    for r in 0..ps.replications {
        let delta = sampler.sample_noise(&mut seeded_rng(derive_seed(seed, &[stream::OUTCOMES, r as u64])));
        for (d, ((_, design), mu)) in labelled.iter().zip(&means).enumerate() {
            let (Ok(x), Some(mu)) = (design, mu) else { continue };
            let y = mu + &delta;
            if let Ok(fit) = spectrum.fit_profile_ml(&net, &f, x, &y) {
                sq_err[d] += (fit.theta_hat - ps.theta).powi(2);
                ok[d] += 1;
            }
        }
    }
    let mse: Vec<Option<f64>> = sq_err
        .iter()
        .zip(&ok)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let random_mse: Vec<f64> = mse[2..].iter().flatten().copied().collect();

    let mut rows = Vec::new();
    for (d, (label, design)) in labelled.iter().enumerate() {
        let mut row = base_row(spec, replicate, seed, &net, p);
        row.design = label.clone();
        row.rho0 = Some(spec.rho0);
        row.alpha = (d == 0).then_some(spec.alpha);
        row.draws = Some(ps.replications);
        row.fit_failures = Some(ps.replications - ok[d]);
        row.mse = mse[d];
        if d < 2 && !random_mse.is_empty() {
            row.mse_percentile = mse[d].map(|v| mse_percentile(v, &random_mse));
        }
        if let Err(e) = design {
            row.error = Some(e.to_string());
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn run_pseudo_experiment(spec: &StudySpec) -> Result<StudyResult> {
    let population = pseudo_population(spec)?;
    let blocks = (0..spec.replicates)
        .into_par_iter()
        .map(|r| {
            timed(spec, || {
                pseudo_experiment_cell(spec, &population, r, pseudo_seed(spec.master_seed, r))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult {
        spec: spec.clone(),
        rows: blocks.into_iter().flatten().collect(),
    })
}

/// Network with a scalar Gaussian covariate, as in the gap study.
pub fn gaussian_covariate_dataset(
    n: usize,
    density: f64,
    sd: f64,
    seed: u64,
) -> Result<(Network, CovariateMatrix)> {
    let mut rng = seeded_rng(seed);
    let net = generate_bernoulli_network(n, density, &mut rng)?;
    let normal = Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()))?;
    let z = DMatrix::from_fn(n, 1, |_, _| normal.sample(&mut rng));
    Ok((net, CovariateMatrix::from_covariates(&z)?))
}

/// `count` prior draws from U(0, 1) as antithetic pairs (u, 1 − u), so their
/// sample mean is ½ up to rounding.
pub fn antithetic_uniform_draws<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count / 2 {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        out.push(u);
        out.push(1.0 - u);
    }
    out
}

/// Rows of one gap-study replicate: per random design, T(x, ρ0), the gap to
/// the prior average, the second-derivative term and both bounds.
pub fn gap_histogram_cell(spec: &StudySpec, replicate: usize, seed: u64) -> Result<Vec<StudyRow>> {
    let g = &spec.gap;
    let (net, f) = gaussian_covariate_dataset(spec.n, spec.density, g.covariate_sd, seed)?;
    let draws = antithetic_uniform_draws(g.prior_draws, &mut seeded_rng(derive_seed(seed, &[stream::PRIOR])));
    let bounds = GapBoundCalculator::new(&net, spec.rho0)?;
    let at_rho0 = Criterion::new(&net, &f, spec.rho0)?;
    let at_samples = draws
        .iter()
        .map(|&r| Criterion::new(&net, &f, r))
        .collect::<Result<Vec<_>>>()?;
    let mut design_rng = seeded_rng(derive_seed(seed, &[stream::RANDOM_DESIGNS]));
    let mut rows = Vec::with_capacity(g.designs);
    for j in 0..g.designs {
        let x = random_iid_design(net.n(), &mut design_rng);
        let d = gap_diagnostics_with(&bounds, &at_rho0, &at_samples, &x, g.bound_alpha)?;
        let mut row = base_row(spec, replicate, seed, &net, 1);
        row.design = format!("random_{}", j + 1);
        row.rho0 = Some(spec.rho0);
        row.alpha = Some(g.bound_alpha);
        row.t_rho0 = Some(d.t_rho0);
        row.gap = Some(d.gap_estimate);
        row.second_derivative = Some(d.second_derivative_term);
        row.bound_a = Some(d.bound_a);
        row.bound_b = Some(d.bound_b);
        rows.push(row);
    }
    Ok(rows)
}

pub fn run_gap_histogram(spec: &StudySpec) -> Result<StudyResult> {
    run_replicates(spec, |r, seed| gap_histogram_cell(spec, r, seed))
}
