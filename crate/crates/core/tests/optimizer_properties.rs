use netab::criterion::Criterion;
use netab::experiments::bipartite_instance;
use netab::graph::{generate_bernoulli_network, generate_pm1_covariates, CovariateMatrix};
use netab::optimizer::{
    solve, solve_annealing, solve_exact, solve_local, solve_no_network, AnnealingSchedule,
    DesignProblem, MethodChoice, SolveOptions, ALPHA_LADDER,
};
use netab::rng::{derive_seed, seeded_rng};
use netab::{Design, Network};
use proptest::prelude::*;

fn instance(n: usize, p: usize, density: f64, seed: u64) -> (Network, CovariateMatrix) {
    let mut rng = seeded_rng(seed);
    let net = generate_bernoulli_network(n, density, &mut rng).unwrap();
    (net, generate_pm1_covariates(n, p, &mut rng).unwrap())
}

#[test]
fn local_search_misses_are_close() {
    let mut hits = 0;
    for i in 0..100u64 {
        let (net, f) = instance(8 + (i as usize % 5), 1 + (i as usize % 2), 0.3, derive_seed(1, &[i]));
        let problem = DesignProblem::hybrid(&net, &f, 0.5, 0.1).unwrap();
        let exact = solve_exact(&problem, None).unwrap();
        let local = solve_local(&problem, 32, derive_seed(2, &[i]), None).unwrap();
        assert_eq!(exact.feasible, local.feasible);
        if !exact.feasible {
            hits += 1;
            continue;
        }
        let gap = local.objective_t2 - exact.objective_t2;
        assert!(gap >= -1e-10 * exact.objective_t2.max(1.0));
        if gap <= 1e-10 * exact.objective_t2.max(1.0) {
            hits += 1;
        } else {
            assert!(gap <= 0.05 * exact.objective_t2, "instance {i}: gap {gap}");
        }
    }
    assert!(hits >= 90);
}

#[test]
fn bipartite_exact_solution_as_alpha_shrinks() {
    let (net, f) = bipartite_instance();
    let crit = Criterion::new(&net, &f, 0.5).unwrap();
    let mut previous: Option<(f64, f64)> = None;
    for &alpha in ALPHA_LADDER.iter().rev() {
        let problem = DesignProblem::hybrid(&net, &f, 0.5, alpha).unwrap();
        let report = solve_exact(&problem, None).unwrap();
        assert!(report.feasible && report.optimal);
        let t = crit.t(&report.design).unwrap();
        if let Some((t2_prev, t_prev)) = previous {
            // A smaller feasible set cannot lower the optimal T2.
            assert!(report.objective_t2 >= t2_prev - 1e-10);
            assert!(t <= t_prev + 1e-9, "α = {alpha}: T {t} after {t_prev}");
        }
        previous = Some((report.objective_t2, t));
    }
}

#[test]
fn heavy_penalty_annealing_reaches_the_cap_on_the_bipartite_instance() {
    let (net, f) = bipartite_instance();
    let problem = DesignProblem::hybrid(&net, &f, 0.5, 0.001).unwrap();
    let schedule = AnnealingSchedule {
        penalty: 1e6,
        ..Default::default()
    };
    let report = solve_annealing(&problem, &schedule, 7, None).unwrap();
    assert!(report.feasible);
}

#[test]
fn no_network_baseline_matches_enumeration() {
    let mut rng = seeded_rng(9);
    let f = generate_pm1_covariates(8, 2, &mut rng).unwrap();
    let m = f.matrix();
    let proj = m * (m.transpose() * m).try_inverse().unwrap() * m.transpose();
    let best = (0..256u32)
        .filter(|b| b.count_ones() == 4)
        .map(|b| {
            let x = nalgebra::DVector::from_fn(8, |i, _| if b >> i & 1 == 1 { 1.0 } else { -1.0 });
            (x.transpose() * &proj * &x)[(0, 0)]
        })
        .fold(f64::INFINITY, f64::min);
    let report = solve_no_network(&f, MethodChoice::Exact, 0, None).unwrap();
    assert!((report.objective_t2 - best).abs() < 1e-10);
    assert!(report.feasible);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Reported feasibility is re-verified independently, and negating the
    /// design leaves objective and cap value unchanged.
    #[test]
    fn reports_are_consistent(seed in any::<u64>(), n in 10usize..40, method in 0usize..3) {
        let (net, f) = instance(n, 2, 0.2, seed);
        let problem = DesignProblem::hybrid(&net, &f, 0.5, 0.05).unwrap();
        let choice = [MethodChoice::Exact, MethodChoice::Local, MethodChoice::Annealing][method];
        let choice = if n > 24 && choice == MethodChoice::Exact { MethodChoice::Local } else { choice };
        let report = solve(&problem, &SolveOptions { method: choice, seed, ..Default::default() }).unwrap();
        let x: &Design = &report.design;
        let cap = net.pm1_quad_form(x.as_slice()) as f64;
        prop_assert_eq!(report.constraint_value, cap);
        if report.feasible {
            let q = problem.with_alpha(report.alpha_used.unwrap()).unwrap().q().unwrap();
            prop_assert!(cap <= q + 1e-9);
            prop_assert!(x.is_balanced());
        }
        let neg = x.negated();
        prop_assert!((problem.objective(&neg) - report.objective_t2).abs() <= 1e-10 * report.objective_t2.max(1.0));
        prop_assert_eq!(problem.constraint_value(&neg) as f64, cap);
        let c = Criterion::new(&net, &f, 0.5).unwrap();
        prop_assert!(c.t2(x).unwrap() >= -1e-10 && c.t(x).unwrap() >= -1e-10);
    }
}
