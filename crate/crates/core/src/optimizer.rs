//! Balanced ±1 designs minimizing a projection form, optionally subject to the
//! connection constraint xᵀWx ≤ q.
//!
//! The hybrid problem minimizes T2(x, ρ0) = xᵀB A⁻¹Bᵀx with B = (D − ρ0W)F,
//! A = FᵀB, subject to xᵀWx ≤ q = √m·Φ⁻¹(α) and |Σx_i| ≤ 1. The no-network
//! baseline minimizes xᵀF(FᵀF)⁻¹Fᵀx under the balance constraint only.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criterion::{Criterion, ProjectionForm};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::graph::{CovariateMatrix, Network};
use crate::rng::{derive_seed, seeded_rng, stream};
use crate::stats::normal_quantile;

/// Slack allowed when checking xᵀWx ≤ q.
pub const FEASIBILITY_TOL: f64 = 1e-9;
/// Relaxation ladder tried when the requested α admits no feasible design.
pub const ALPHA_LADDER: [f64; 6] = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5];
/// Largest n accepted by the exact solver.
pub const EXACT_MAX_N: usize = 30;
/// Up to this n the exact solver enumerates without objective bounds.
pub const ENUMERATION_MAX_N: usize = 16;
pub const DEFAULT_RESTARTS: usize = 32;
/// Above this n the default dispatch switches from local search to annealing.
pub const LOCAL_MAX_N: usize = 2000;

const DENSE_SWAP_TABLE_MAX_N: usize = 3000;
const REFRESH_EVERY: u64 = 256;

/// q = √m · Φ⁻¹(α).
pub fn quantile_cap(net: &Network, alpha: f64) -> Result<f64> {
    Ok((net.total_degree() as f64).sqrt() * normal_quantile(alpha)?)
}

/// A design problem: projection-form objective plus optional connection cap.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    net: Network,
    form: ProjectionForm,
    rho0: Option<f64>,
    alpha: Option<f64>,
    q: Option<f64>,
}

/// The hybrid formulation is the constrained case of [`DesignProblem`].
pub type HybridProblem = DesignProblem;

impl DesignProblem {
    /// min T2(x, ρ0) s.t. xᵀWx ≤ √m·Φ⁻¹(α), |Σx| ≤ 1.
    pub fn hybrid(net: &Network, f: &CovariateMatrix, rho0: f64, alpha: f64) -> Result<Self> {
        let crit = Criterion::new(net, f, rho0)?;
        let q = quantile_cap(net, alpha)?;
        Ok(DesignProblem {
            net: net.clone(),
            form: crit.form().clone(),
            rho0: Some(rho0),
            alpha: Some(alpha),
            q: Some(q),
        })
    }

    /// min xᵀF(FᵀF)⁻¹Fᵀx s.t. |Σx| ≤ 1.
    pub fn no_network(f: &CovariateMatrix) -> Result<Self> {
        Ok(DesignProblem {
            net: Network::empty(f.n()),
            form: ProjectionForm::ordinary(f)?,
            rho0: None,
            alpha: None,
            q: None,
        })
    }

    /// Same objective with the cap recomputed for another α.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if self.q.is_none() {
            return Err(Error::invalid("problem has no connection constraint"));
        }
        Ok(DesignProblem {
            q: Some(quantile_cap(&self.net, alpha)?),
            alpha: Some(alpha),
            ..self.clone()
        })
    }

    pub fn n(&self) -> usize {
        self.net.n()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn form(&self) -> &ProjectionForm {
        &self.form
    }

    pub fn rho0(&self) -> Option<f64> {
        self.rho0
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn q(&self) -> Option<f64> {
        self.q
    }

    pub fn objective(&self, x: &Design) -> f64 {
        self.form.value(x)
    }

    /// xᵀWx.
    pub fn constraint_value(&self, x: &Design) -> i64 {
        self.net.pm1_quad_form(x.as_slice())
    }

    fn cap_allows(&self, c: i64) -> bool {
        self.q.is_none_or(|q| c as f64 <= q + FEASIBILITY_TOL)
    }

    pub fn is_feasible(&self, x: &Design) -> bool {
        x.len() == self.n() && x.is_balanced() && self.cap_allows(self.constraint_value(x))
    }
}

/// Solver that produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Exact,
    LocalSearch,
    Annealing,
}

/// Solver selection, `Auto` dispatching on n.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    #[default]
    Auto,
    Exact,
    Local,
    Annealing,
}

impl MethodChoice {
    /// Exact for n ≤ 16, local search up to n = 2000, annealing above.
    pub fn resolve(self, n: usize) -> MethodChoice {
        match self {
            MethodChoice::Auto if n <= ENUMERATION_MAX_N => MethodChoice::Exact,
            MethodChoice::Auto if n <= LOCAL_MAX_N => MethodChoice::Local,
            MethodChoice::Auto => MethodChoice::Annealing,
            other => other,
        }
    }
}

/// Outcome of one solve. Objective and constraint values are recomputed from
/// the returned design, not taken from solver bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub design: Design,
    pub objective_t2: f64,
    /// xᵀWx of the returned design.
    pub constraint_value: f64,
    pub q: Option<f64>,
    pub alpha_used: Option<f64>,
    pub feasible: bool,
    /// The search ran to completion: optimality (or infeasibility) is proven.
    /// Only the exact solver sets this.
    pub optimal: bool,
    pub method: Method,
    pub iterations: u64,
    pub restarts: usize,
    pub seed: u64,
    /// Every α attempted, the requested one first.
    pub relaxations_applied: Vec<f64>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl SolveReport {
    fn new(problem: &DesignProblem, x: Vec<i8>, method: Method, start: Instant) -> Self {
        let design = Design::from_raw(x).canonical();
        SolveReport {
            objective_t2: problem.objective(&design),
            constraint_value: problem.constraint_value(&design) as f64,
            feasible: problem.is_feasible(&design),
            design,
            q: problem.q(),
            alpha_used: problem.alpha(),
            optimal: false,
            method,
            iterations: 0,
            restarts: 1,
            seed: 0,
            relaxations_applied: problem.alpha().into_iter().collect(),
            wall_time: start.elapsed(),
        }
    }
}

/// Simulated-annealing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealingSchedule {
    /// Starting temperature; `None` calibrates it from random swaps at the start.
    pub initial_temperature: Option<f64>,
    pub cooling: f64,
    pub temperatures: usize,
    /// Proposals per temperature; `None` means 20·n.
    pub moves_per_temperature: Option<usize>,
    pub reheats: usize,
    /// Initial weight μ of the squared constraint violation.
    pub penalty: f64,
    /// Factor applied to μ after a cycle that ends infeasible.
    pub penalty_growth: f64,
}

impl Default for AnnealingSchedule {
    fn default() -> Self {
        AnnealingSchedule {
            initial_temperature: None,
            cooling: 0.9,
            temperatures: 60,
            moves_per_temperature: None,
            reheats: 3,
            penalty: 1.0,
            penalty_growth: 10.0,
        }
    }
}

impl AnnealingSchedule {
    /// Greedy randomized descent: only non-worsening moves are accepted.
    pub fn zero_temperature() -> Self {
        AnnealingSchedule {
            initial_temperature: Some(0.0),
            ..Default::default()
        }
    }
}

/// Options shared by the solver entry points.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub method: MethodChoice,
    pub restarts: usize,
    pub seed: u64,
    pub time_budget: Option<Duration>,
    /// Walk up [`ALPHA_LADDER`] when no feasible design exists.
    pub relax: bool,
    pub schedule: AnnealingSchedule,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            method: MethodChoice::Auto,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
            time_budget: None,
            relax: true,
            schedule: AnnealingSchedule::default(),
        }
    }
}

/// Uniform balanced design with ⌊n/2⌋ / ⌈n/2⌉ arms; for odd n the sign of the
/// extra node is uniform.
pub fn random_balanced_design<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Design {
    let mut x: Vec<i8> = Vec::with_capacity(n);
    x.extend(std::iter::repeat_n(1, n / 2));
    x.extend(std::iter::repeat_n(-1, n / 2));
    if n % 2 == 1 {
        x.push(if rng.random_bool(0.5) { 1 } else { -1 });
    }
    x.shuffle(rng);
    Design::from_raw(x)
}

/// Independent ±1 entries with probability ½ each.
pub fn random_iid_design<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Design {
    Design::from_raw((0..n).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect())
}

/// Per-node quantities for O(1) swap evaluation.
struct SwapTables {
    /// Rows u_i = A⁻¹b_i.
    u: DMatrix<f64>,
    /// b_iᵀA⁻¹b_i.
    d: Vec<f64>,
    /// M = BA⁻¹Bᵀ when small enough to hold densely.
    m: Option<DMatrix<f64>>,
}

impl SwapTables {
    fn new(form: &ProjectionForm) -> Self {
        let b = form.b();
        let u = form.solve_matrix(&b.transpose()).transpose();
        let d = (0..b.nrows()).map(|i| u.row(i).dot(&b.row(i))).collect();
        let m = (b.nrows() <= DENSE_SWAP_TABLE_MAX_N).then(|| &u * b.transpose());
        SwapTables { u, d, m }
    }

    fn m_ij(&self, b: &DMatrix<f64>, i: usize, j: usize) -> f64 {
        match &self.m {
            Some(m) => m[(i, j)],
            None => self.u.row(i).dot(&b.row(j)),
        }
    }
}

/// Design under balanced swaps with incrementally maintained g = Bᵀx,
/// h = A⁻¹g, p = Bh, c = xᵀWx and neighbor sums s.
struct SwapState<'a> {
    problem: &'a DesignProblem,
    tables: &'a SwapTables,
    x: Vec<i8>,
    g: DVector<f64>,
    h: DVector<f64>,
    p: DVector<f64>,
    t2: f64,
    c: i64,
    s: Vec<i64>,
    applied: u64,
}

impl<'a> SwapState<'a> {
    fn new(problem: &'a DesignProblem, tables: &'a SwapTables, x: Vec<i8>) -> Self {
        let net = problem.network();
        let s: Vec<i64> = (0..x.len())
            .map(|i| net.neighbors(i).iter().map(|&j| i64::from(x[j])).sum())
            .collect();
        let c = x.iter().zip(&s).map(|(&xi, &si)| i64::from(xi) * si).sum();
        let mut st = SwapState {
            problem,
            tables,
            x,
            g: DVector::zeros(0),
            h: DVector::zeros(0),
            p: DVector::zeros(0),
            t2: 0.0,
            c,
            s,
            applied: 0,
        };
        st.refresh();
        st
    }

    fn refresh(&mut self) {
        let form = self.problem.form();
        let xv = DVector::from_iterator(self.x.len(), self.x.iter().map(|&v| f64::from(v)));
        self.g = form.b().tr_mul(&xv);
        self.h = form.solve(&self.g);
        self.p = form.b() * &self.h;
        self.t2 = self.g.dot(&self.h).max(0.0);
    }

    fn feasible(&self) -> bool {
        self.problem.cap_allows(self.c)
    }

    fn violation(&self, c: i64) -> f64 {
        self.problem.q().map_or(0.0, |q| (c as f64 - q).max(0.0))
    }

    /// Change of T2 when swapping i and j (x_i ≠ x_j).
    fn delta_t2(&self, i: usize, j: usize) -> f64 {
        let (xi, xj) = (f64::from(self.x[i]), f64::from(self.x[j]));
        let t = self.tables;
        let mij = t.m_ij(self.problem.form().b(), i, j);
        -4.0 * (xi * self.p[i] + xj * self.p[j]) + 4.0 * (t.d[i] + t.d[j] - 2.0 * mij)
    }

    /// Change of xᵀWx when swapping i and j (x_i ≠ x_j).
    fn delta_c(&self, i: usize, j: usize) -> i64 {
        let w = i64::from(self.problem.network().has_edge(i, j));
        -4 * (i64::from(self.x[i]) * self.s[i] + i64::from(self.x[j]) * self.s[j]) - 8 * w
    }

    fn apply(&mut self, i: usize, j: usize) {
        self.c += self.delta_c(i, j);
        let form = self.problem.form();
        let b = form.b();
        let mut dh = DVector::zeros(self.g.len());
        for node in [i, j] {
            let old = f64::from(self.x[node]);
            self.g.axpy(-2.0 * old, &b.row(node).transpose(), 1.0);
            dh.axpy(-2.0 * old, &self.tables.u.row(node).transpose(), 1.0);
            self.x[node] = -self.x[node];
            let new = i64::from(self.x[node]);
            for &k in self.problem.network().neighbors(node) {
                self.s[k] += 2 * new;
            }
        }
        self.applied += 1;
        if self.applied.is_multiple_of(REFRESH_EVERY) {
            self.refresh();
        } else {
            self.h += &dh;
            self.p += b * &dh;
            self.t2 = self.g.dot(&self.h).max(0.0);
        }
    }

    fn arms(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.x.len()).partition(|&i| self.x[i] == 1)
    }

    /// Greedy swaps that most reduce xᵀWx until the cap holds.
    fn repair(&mut self, deadline: Option<Instant>) -> bool {
        while !self.feasible() {
            if expired(deadline) {
                return false;
            }
            let (plus, minus) = self.arms();
            let mut best: Option<(i64, usize, usize)> = None;
            for &i in &plus {
                for &j in &minus {
                    let dc = self.delta_c(i, j);
                    if dc < 0 && best.is_none_or(|b| dc < b.0) {
                        best = Some((dc, i, j));
                    }
                }
            }
            match best {
                Some((_, i, j)) => self.apply(i, j),
                None => return false,
            }
        }
        true
    }

    /// Best-improvement descent on T2 over cap-respecting swaps.
    fn descend(&mut self, deadline: Option<Instant>, mut trace: Option<&mut Vec<f64>>) -> u64 {
        let mut steps = 0;
        loop {
            if expired(deadline) {
                break;
            }
            let tol = 1e-12 * self.t2.max(1.0);
            let (plus, minus) = self.arms();
            let mut best: Option<(f64, usize, usize)> = None;
            for &i in &plus {
                for &j in &minus {
                    let dt = self.delta_t2(i, j);
                    if dt < -tol
                        && best.is_none_or(|b| dt < b.0)
                        && self.problem.cap_allows(self.c + self.delta_c(i, j))
                    {
                        best = Some((dt, i, j));
                    }
                }
            }
            let Some((_, i, j)) = best else { break };
            self.apply(i, j);
            steps += 1;
            if let Some(t) = trace.as_deref_mut() {
                t.push(self.t2);
            }
        }
        steps
    }
}

fn expired(deadline: Option<Instant>) -> bool {
    deadline.is_some_and(|d| Instant::now() >= d)
}

fn check_size(problem: &DesignProblem) -> Result<()> {
    if problem.n() < 2 {
        return Err(Error::invalid("need at least two nodes"));
    }
    Ok(())
}

struct RestartOutcome {
    x: Vec<i8>,
    t2: f64,
    c: i64,
    feasible: bool,
    iterations: u64,
}

/// Lowest T2 among feasible outcomes (earliest on exact ties), else the
/// outcome with the smallest xᵀWx.
fn pick_best(outcomes: Vec<RestartOutcome>) -> Option<RestartOutcome> {
    let mut best: Option<RestartOutcome> = None;
    for o in outcomes {
        let better = match &best {
            None => true,
            Some(b) => match (o.feasible, b.feasible) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => o.t2 < b.t2,
                (false, false) => o.c < b.c,
            },
        };
        if better {
            best = Some(o);
        }
    }
    best
}

/// Multi-start balanced-swap descent: each restart draws a random balanced
/// design, repairs it into the cap region and descends on T2.
pub fn solve_local(
    problem: &DesignProblem,
    restarts: usize,
    seed: u64,
    time_budget: Option<Duration>,
) -> Result<SolveReport> {
    check_size(problem)?;
    let start = Instant::now();
    let deadline = time_budget.map(|b| start + b);
    let tables = SwapTables::new(problem.form());
    let restarts = restarts.max(1);
    let outcomes: Vec<Option<RestartOutcome>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            if r > 0 && expired(deadline) {
                return None;
            }
            let mut rng = seeded_rng(derive_seed(seed, &[stream::RESTART, r as u64]));
            let x0 = random_balanced_design(problem.n(), &mut rng);
            let mut st = SwapState::new(problem, &tables, x0.into());
            let repaired = st.repair(deadline);
            let iterations = if repaired { st.descend(deadline, None) } else { 0 };
            Some(RestartOutcome {
                feasible: repaired && st.feasible(),
                t2: st.t2,
                c: st.c,
                iterations,
                x: st.x,
            })
        })
        .collect();
    let ran = outcomes.iter().filter(|o| o.is_some()).count();
    let iterations = outcomes.iter().flatten().map(|o| o.iterations).sum();
    let best = pick_best(outcomes.into_iter().flatten().collect()).expect("first restart runs");
    let mut report = SolveReport::new(problem, best.x, Method::LocalSearch, start);
    report.iterations = iterations;
    report.restarts = ran;
    report.seed = seed;
    report.wall_time = start.elapsed();
    Ok(report)
}

struct AnnealOutcome {
    best_feasible: Option<(f64, Vec<i8>)>,
    last: Vec<i8>,
    accepted: u64,
    #[cfg_attr(not(test), allow(dead_code))]
    energies: Vec<f64>,
}

fn anneal(
    problem: &DesignProblem,
    tables: &SwapTables,
    schedule: &AnnealingSchedule,
    rng: &mut impl Rng,
    deadline: Option<Instant>,
    record: bool,
) -> AnnealOutcome {
    let n = problem.n();
    let x0 = random_balanced_design(n, rng);
    let mut st = SwapState::new(problem, tables, x0.into());
    let (mut plus, mut minus) = st.arms();
    let mut mu = schedule.penalty;
    let energy = |st: &SwapState, c: i64, t2: f64, mu: f64| t2 + mu * st.violation(c).powi(2);

    let t0 = match schedule.initial_temperature {
        Some(t) => t,
        None => {
            let mut total = 0.0;
            let probes = 200;
            for _ in 0..probes {
                let i = plus[rng.random_range(0..plus.len())];
                let j = minus[rng.random_range(0..minus.len())];
                total += st.delta_t2(i, j).abs();
            }
            (total / probes as f64).max(1e-9)
        }
    };
    let moves = schedule.moves_per_temperature.unwrap_or(20 * n).max(1);
    let mut best_feasible: Option<(f64, Vec<i8>)> = None;
    let mut accepted = 0;
    let mut energies = Vec::new();
    if st.feasible() {
        best_feasible = Some((st.t2, st.x.clone()));
    }
    'cycles: for _cycle in 0..=schedule.reheats {
        let mut temp = t0;
        if record {
            energies.push(energy(&st, st.c, st.t2, mu));
        }
        for _ in 0..schedule.temperatures {
            for _ in 0..moves {
                let a = rng.random_range(0..plus.len());
                let b = rng.random_range(0..minus.len());
                let (i, j) = (plus[a], minus[b]);
                let dc = st.delta_c(i, j);
                let dt = st.delta_t2(i, j);
                let de = dt + mu * (st.violation(st.c + dc).powi(2) - st.violation(st.c).powi(2));
                let accept = de <= 0.0 || (temp > 0.0 && rng.random::<f64>() < (-de / temp).exp());
                if !accept {
                    continue;
                }
                st.apply(i, j);
                plus[a] = j;
                minus[b] = i;
                accepted += 1;
                if record {
                    energies.push(energy(&st, st.c, st.t2, mu));
                }
                if st.feasible() && best_feasible.as_ref().is_none_or(|(t, _)| st.t2 < *t) {
                    best_feasible = Some((st.t2, st.x.clone()));
                }
            }
            temp *= schedule.cooling;
            if expired(deadline) {
                break 'cycles;
            }
        }
        if !st.feasible() {
            mu *= schedule.penalty_growth;
        }
        if let Some((_, x)) = &best_feasible {
            st = SwapState::new(problem, tables, x.clone());
            (plus, minus) = st.arms();
        }
    }
    AnnealOutcome {
        best_feasible,
        last: st.x,
        accepted,
        energies,
    }
}

/// Simulated annealing over balanced swaps on T2 + μ·max(0, xᵀWx − q)², then
/// a local-search polish from the best feasible state visited.
pub fn solve_annealing(
    problem: &DesignProblem,
    schedule: &AnnealingSchedule,
    seed: u64,
    time_budget: Option<Duration>,
) -> Result<SolveReport> {
    check_size(problem)?;
    if !(schedule.cooling > 0.0 && schedule.cooling <= 1.0) || schedule.temperatures == 0 {
        return Err(Error::invalid("cooling must lie in (0, 1] with at least one temperature"));
    }
    let start = Instant::now();
    let deadline = time_budget.map(|b| start + b);
    let tables = SwapTables::new(problem.form());
    let mut rng = seeded_rng(derive_seed(seed, &[stream::RESTART, 0]));
    let run = anneal(problem, &tables, schedule, &mut rng, deadline, false);
    let polish_from = run.best_feasible.map(|(_, x)| x).unwrap_or(run.last);
    let mut st = SwapState::new(problem, &tables, polish_from);
    let repaired = st.repair(deadline);
    let polish_steps = if repaired { st.descend(deadline, None) } else { 0 };
    let mut report = SolveReport::new(problem, st.x, Method::Annealing, start);
    report.iterations = run.accepted + polish_steps;
    report.restarts = schedule.reheats + 1;
    report.seed = seed;
    report.wall_time = start.elapsed();
    Ok(report)
}

/// Depth-first search over x with x_0 = +1, children −1 before +1 so that the
/// first design found among ties is lexicographically smallest.
struct ExactSearch<'a> {
    problem: &'a DesignProblem,
    n: usize,
    bounded: bool,
    /// Columns v_i = L⁻¹b_i.
    v: DMatrix<f64>,
    /// Σ_{i ≥ d} |v_i| componentwise, one column per depth.
    abs_suffix: DMatrix<f64>,
    /// Edges with both endpoints ≥ d.
    free_edges: Vec<i64>,
    x: Vec<i8>,
    /// L⁻¹ times the partial g.
    a: DVector<f64>,
    /// xᵀWx restricted to assigned nodes.
    c_fixed: i64,
    /// Σ over assigned neighbors of x, for every node.
    t: Vec<i64>,
    imbalance: i64,
    best: Option<(f64, i64, Vec<i8>)>,
    nodes: u64,
    deadline: Option<Instant>,
    timed_out: bool,
}

impl<'a> ExactSearch<'a> {
    fn new(problem: &'a DesignProblem, deadline: Option<Instant>) -> Self {
        let n = problem.n();
        let form = problem.form();
        let l = form.cholesky_l();
        let v = l
            .solve_lower_triangular(&form.b().transpose())
            .expect("Cholesky factor is nonsingular");
        let k = v.nrows();
        let mut abs_suffix = DMatrix::zeros(k, n + 1);
        for d in (0..n).rev() {
            for r in 0..k {
                abs_suffix[(r, d)] = abs_suffix[(r, d + 1)] + v[(r, d)].abs();
            }
        }
        let net = problem.network();
        let mut free_edges = vec![0i64; n + 1];
        for d in (0..n).rev() {
            let later = net.neighbors(d).iter().filter(|&&j| j > d).count() as i64;
            free_edges[d] = free_edges[d + 1] + later;
        }
        ExactSearch {
            problem,
            n,
            bounded: n > ENUMERATION_MAX_N,
            v,
            abs_suffix,
            free_edges,
            x: vec![0; n],
            a: DVector::zeros(k),
            c_fixed: 0,
            t: vec![0; n],
            imbalance: 0,
            best: None,
            nodes: 0,
            deadline,
            timed_out: false,
        }
    }

    fn tol(best: f64) -> f64 {
        1e-11 * best.max(1.0)
    }

    fn is_better(&self, t2: f64, c: i64) -> bool {
        match &self.best {
            None => true,
            Some((bt, bc, _)) => t2 < bt - Self::tol(*bt) || (t2 <= bt + Self::tol(*bt) && c < *bc),
        }
    }

    /// Lower bound on ‖a + Σ_{i≥d} x_i v_i‖² over free signs.
    fn t2_lower_bound(&self, d: usize) -> f64 {
        let k = self.a.len();
        let coord: f64 = (0..k)
            .map(|r| (self.a[r].abs() - self.abs_suffix[(r, d)]).max(0.0).powi(2))
            .sum();
        let norm = self.a.norm();
        if norm == 0.0 {
            return coord;
        }
        let e = &self.a / norm;
        let spread: f64 = (d..self.n).map(|i| e.dot(&self.v.column(i)).abs()).sum();
        coord.max((norm - spread).max(0.0).powi(2))
    }

    fn c_lower_bound(&self, d: usize) -> i64 {
        let cross: i64 = (d..self.n).map(|j| self.t[j].abs()).sum();
        self.c_fixed - 2 * cross - 2 * self.free_edges[d]
    }

    fn assign(&mut self, d: usize, val: i8) {
        self.x[d] = val;
        let vf = f64::from(val);
        self.a.axpy(vf, &self.v.column(d), 1.0);
        self.c_fixed += 2 * i64::from(val) * self.t[d];
        for &j in self.problem.network().neighbors(d) {
            self.t[j] += i64::from(val);
        }
        self.imbalance += i64::from(val);
    }

    fn unassign(&mut self, d: usize) {
        let val = self.x[d];
        let vf = f64::from(val);
        self.a.axpy(-vf, &self.v.column(d), 1.0);
        for &j in self.problem.network().neighbors(d) {
            self.t[j] -= i64::from(val);
        }
        self.c_fixed -= 2 * i64::from(val) * self.t[d];
        self.imbalance -= i64::from(val);
        self.x[d] = 0;
    }

    fn visit(&mut self, d: usize) {
        if self.timed_out {
            return;
        }
        self.nodes += 1;
        if self.nodes.is_multiple_of(4096) && expired(self.deadline) {
            self.timed_out = true;
            return;
        }
        let remaining = (self.n - d) as i64;
        if self.imbalance.abs() > remaining + 1 {
            return;
        }
        if self.problem.q().is_some() && !self.problem.cap_allows(self.c_lower_bound(d)) {
            return;
        }
        if d == self.n {
            let t2 = self.a.norm_squared();
            if self.is_better(t2, self.c_fixed) {
                self.best = Some((t2, self.c_fixed, self.x.clone()));
            }
            return;
        }
        if self.bounded {
            if let Some((bt, bc, _)) = &self.best {
                let lb = self.t2_lower_bound(d);
                let tol = Self::tol(*bt);
                if lb > bt + tol || (lb >= bt - tol && self.c_lower_bound(d) >= *bc) {
                    return;
                }
            }
        }
        let choices: &[i8] = if d == 0 { &[1] } else { &[-1, 1] };
        for &val in choices {
            self.assign(d, val);
            self.visit(d + 1);
            self.unassign(d);
        }
    }
}

/// Globally optimal design by exhaustive search (n ≤ 16) or branch and bound
/// (n ≤ 30). Among designs with equal T2 (within 1e-11 relative) the one with
/// smaller xᵀWx wins, then the lexicographically smallest with x_0 = +1.
pub fn solve_exact(problem: &DesignProblem, time_budget: Option<Duration>) -> Result<SolveReport> {
    check_size(problem)?;
    if problem.n() > EXACT_MAX_N {
        return Err(Error::invalid(format!(
            "exact solver is limited to n ≤ {EXACT_MAX_N}, got {}",
            problem.n()
        )));
    }
    let start = Instant::now();
    let mut search = ExactSearch::new(problem, time_budget.map(|b| start + b));
    search.visit(0);
    let timed_out = search.timed_out;
    let nodes = search.nodes;
    let x = match search.best.take() {
        Some((_, _, x)) => x,
        None => {
            // No feasible design: report the design the repair heuristic reaches.
            let tables = SwapTables::new(problem.form());
            let mut rng = seeded_rng(derive_seed(0, &[stream::RESTART, 0]));
            let mut st = SwapState::new(problem, &tables, random_balanced_design(problem.n(), &mut rng).into());
            st.repair(None);
            st.x
        }
    };
    let mut report = SolveReport::new(problem, x, Method::Exact, start);
    report.optimal = !timed_out;
    report.iterations = nodes;
    report.wall_time = start.elapsed();
    Ok(report)
}

fn solve_once(problem: &DesignProblem, opts: &SolveOptions) -> Result<SolveReport> {
    let mut report = match opts.method.resolve(problem.n()) {
        MethodChoice::Exact => solve_exact(problem, opts.time_budget)?,
        MethodChoice::Local | MethodChoice::Auto => {
            solve_local(problem, opts.restarts, opts.seed, opts.time_budget)?
        }
        MethodChoice::Annealing => {
            solve_annealing(problem, &opts.schedule, opts.seed, opts.time_budget)?
        }
    };
    report.seed = opts.seed;
    Ok(report)
}

/// Solve with the configured method; when nothing feasible is found and
/// `relax` is set, retry at each larger α of [`ALPHA_LADDER`].
pub fn solve(problem: &DesignProblem, opts: &SolveOptions) -> Result<SolveReport> {
    let mut report = solve_once(problem, opts)?;
    let Some(requested) = problem.alpha() else {
        return Ok(report);
    };
    let mut tried = vec![requested];
    if opts.relax {
        for &alpha in ALPHA_LADDER.iter().filter(|&&a| a > requested) {
            if report.feasible {
                break;
            }
            log::info!("no feasible design at α = {}, relaxing to {alpha}", tried[tried.len() - 1]);
            report = solve_once(&problem.with_alpha(alpha)?, opts)?;
            tried.push(alpha);
        }
    }
    report.relaxations_applied = tried;
    Ok(report)
}

/// The no-network baseline min xᵀF(FᵀF)⁻¹Fᵀx over balanced designs.
pub fn solve_no_network(
    f: &CovariateMatrix,
    method: MethodChoice,
    seed: u64,
    time_budget: Option<Duration>,
) -> Result<SolveReport> {
    let problem = DesignProblem::no_network(f)?;
    solve_once(
        &problem,
        &SolveOptions {
            method,
            seed,
            time_budget,
            ..Default::default()
        },
    )
}
