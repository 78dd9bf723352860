use netab::experiments::{
    alpha_sweep_cell, dataset_seed, gap_histogram_cell, group_medians, network_comparison_cell,
    pseudo_experiment_cell, pseudo_population, pseudo_seed, read_rows_csv, rho_robustness_cell,
    run_study, size_sweep_cell, size_sweep_seed, StudyKind, StudySpec, CSV_HEADER,
};
use netab::stats::median;
use proptest::prelude::*;

fn medians_by_alpha(rows: &[netab::experiments::StudyRow], rho: f64) -> Vec<f64> {
    let spec = StudySpec::bundled("alpha_sweep_small").unwrap();
    spec.alphas
        .iter()
        .map(|&a| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.alpha == Some(a) && r.rho_t == Some(rho))
                .map(|r| r.pip.unwrap())
                .collect();
            median(&v)
        })
        .collect()
}

#[test]
fn alpha_sweep_small_meets_its_thresholds() {
    let spec = StudySpec::bundled("alpha_sweep_small").unwrap();
    let result = run_study(&spec).unwrap();
    let rows = &result.rows;
    assert_eq!(rows.len(), spec.replicates * spec.alphas.len() * spec.rho_t.len());
    assert!(rows.iter().all(|r| r.error.is_none() && r.feasible == Some(true)));
    for &rho in &spec.rho_t {
        // The grid runs from the largest α to the smallest.
        let m = medians_by_alpha(rows, rho);
        for w in m.windows(2) {
            assert!(w[1] >= w[0] - 0.01, "ρ_t = {rho}: medians {m:?}");
        }
        // The gain flattens out: the last step adds no more than the first.
        let (first, last) = (m[1] - m[0], m[3] - m[2]);
        assert!(last <= first.max(0.01), "no plateau at ρ_t = {rho}: {m:?}");
    }
}

#[test]
fn identical_specs_give_identical_results() {
    let spec = StudySpec {
        kind: StudyKind::NetworkComparison,
        n: 30,
        p: 3,
        replicates: 3,
        ..Default::default()
    };
    let a = run_study(&spec).unwrap();
    let b = run_study(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert_eq!(a.metadata_json(), b.metadata_json());
}

#[test]
fn csv_has_documented_header_and_round_trips() {
    let spec = StudySpec {
        kind: StudyKind::RhoRobustness,
        n: 24,
        p: 2,
        replicates: 2,
        rho_t: vec![0.3, 0.5],
        ..Default::default()
    };
    let result = run_study(&spec).unwrap();
    let csv = result.to_csv().unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').collect::<Vec<_>>(), CSV_HEADER);
    assert_eq!(read_rows_csv(&csv).unwrap(), result.rows);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    result.write(&path).unwrap();
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out.csv.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["master_seed"], spec.master_seed);
    assert_eq!(meta["spec"]["kind"], "rho_robustness");
}

#[test]
fn robustness_differences_are_small() {
    let spec = StudySpec {
        kind: StudyKind::RhoRobustness,
        n: 50,
        p: 5,
        density: 0.08,
        replicates: 10,
        rho_t: (1..=9).map(|k| k as f64 / 10.0).collect(),
        ..Default::default()
    };
    let rows = run_study(&spec).unwrap().rows;
    let diffs: Vec<f64> = rows.iter().map(|r| r.pip_difference.unwrap().abs()).collect();
    assert!(median(&diffs) < 0.03);
    for r in rows.iter().filter(|r| r.rho_t == Some(0.5)) {
        assert_eq!(r.pip_difference, Some(0.0));
    }
}

#[test]
fn network_pip_falls_with_size() {
    let spec = StudySpec {
        kind: StudyKind::SizeSweep,
        sizes: vec![50, 100, 500],
        p: 10,
        density: 0.02,
        replicates: 5,
        rho_t: vec![0.5],
        ..Default::default()
    };
    let rows = run_study(&spec).unwrap().rows;
    assert_eq!(rows.len(), 3 * 5 * 2);
    let med = group_medians(
        &rows,
        |r| (r.design == "network").then(|| format!("{:04}", r.n)),
        |r| r.pip,
    );
    let values: Vec<f64> = med.values().copied().collect();
    assert_eq!(values.len(), 3);
    assert!(values[0] > values[1] && values[1] > values[2], "{med:?}");
}

#[test]
fn gap_study_gaps_are_small_against_criterion_range() {
    let rows = run_study(&StudySpec::bundled("gap_histogram_small").unwrap()).unwrap().rows;
    let t: Vec<f64> = rows.iter().map(|r| r.t_rho0.unwrap()).collect();
    let range = t.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - t.iter().copied().fold(f64::INFINITY, f64::min);
    let max_gap = rows.iter().map(|r| r.gap.unwrap()).fold(f64::NEG_INFINITY, f64::max);
    assert!(max_gap / range < 0.2);
}

#[test]
fn single_draw_pseudo_experiment_still_ranks() {
    let mut spec = StudySpec::bundled("pseudo_experiment_small").unwrap();
    spec.replicates = 1;
    spec.pseudo.replications = 1;
    let rows = run_study(&spec).unwrap().rows;
    assert_eq!(rows.len(), 12);
    for r in rows.iter().take(2) {
        let p = r.mse_percentile.unwrap();
        assert!((0.0..=1.0).contains(&p) && (p * 20.0).fract() == 0.0);
    }
    assert!(rows.iter().all(|r| r.fit_failures == Some(0) && r.draws == Some(1)));
}

#[test]
fn pseudo_rows_regenerate_from_their_seed() {
    let mut spec = StudySpec::bundled("pseudo_experiment_small").unwrap();
    spec.replicates = 2;
    spec.pseudo.replications = 3;
    let rows = run_study(&spec).unwrap().rows;
    let population = pseudo_population(&spec).unwrap();
    let seed = pseudo_seed(spec.master_seed, 1);
    assert_eq!(rows[12].seed, seed);
    assert_eq!(pseudo_experiment_cell(&spec, &population, 1, seed).unwrap(), rows[12..].to_vec());
}

fn small(kind: StudyKind) -> StudySpec {
    StudySpec {
        kind,
        n: 20,
        p: 2,
        density: 0.2,
        replicates: 4,
        sizes: vec![20, 24],
        alphas: vec![0.1, 0.01],
        rho_t: vec![0.2, 0.7],
        gap: netab::experiments::GapSpec {
            designs: 5,
            prior_draws: 10,
            ..Default::default()
        },
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Any row can be rebuilt from its seed and factor levels alone.
    #[test]
    fn rows_regenerate_in_isolation(kind in 0usize..5, pick in 0usize..1000) {
        let kinds = [
            StudyKind::AlphaSweep,
            StudyKind::RhoRobustness,
            StudyKind::NetworkComparison,
            StudyKind::SizeSweep,
            StudyKind::GapHistogram,
        ];
        let spec = small(kinds[kind]);
        let rows = run_study(&spec).unwrap().rows;
        let row = &rows[pick % rows.len()];
        let cell = match spec.kind {
            StudyKind::AlphaSweep => alpha_sweep_cell(&spec, row.replicate, row.seed),
            StudyKind::RhoRobustness => rho_robustness_cell(&spec, row.replicate, row.seed),
            StudyKind::NetworkComparison => network_comparison_cell(&spec, row.replicate, row.seed),
            StudyKind::SizeSweep => {
                prop_assert_eq!(row.seed, size_sweep_seed(spec.master_seed, row.n, row.replicate));
                size_sweep_cell(&spec, row.n, row.replicate, row.seed)
            }
            _ => gap_histogram_cell(&spec, row.replicate, row.seed),
        }
        .unwrap();
        if spec.kind != StudyKind::SizeSweep {
            prop_assert_eq!(row.seed, dataset_seed(spec.master_seed, row.replicate));
        }
        prop_assert!(cell.contains(row));
    }
}
