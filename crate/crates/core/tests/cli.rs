use std::path::Path;
use std::process::{Command, Output};

use netab::criterion::Criterion;
use netab::experiments::{bipartite_instance, read_rows_csv, run_study, StudySpec};
use netab::graph::{
    generate_bernoulli_network, generate_pm1_covariates, load_covariates, load_edge_list,
    write_covariates, write_edge_list, CovariateOptions, EdgeListOptions,
};
use netab::optimizer::{solve, DesignProblem, SolveOptions};
use netab::rng::{derive_seed, seeded_rng, stream};
use netab::Design;
use serde_json::Value;

const DEFAULT_SEED: u64 = 20_240_501;

fn netab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netab")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn generate(dir: &Path, n: &str, p: &str, density: &str) -> (String, String) {
    let prefix = s(&dir.join("d"));
    let out = netab(&["generate", "--n", n, "--p", p, "--density", density, "--out-prefix", &prefix]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (format!("{prefix}.edges"), format!("{prefix}.covariates.csv"))
}

#[test]
fn generate_matches_library_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (edges, covs) = generate(dir.path(), "50", "10", "0.08");
    let mut rng = seeded_rng(derive_seed(DEFAULT_SEED, &[stream::DATASET]));
    let net = generate_bernoulli_network(50, 0.08, &mut rng).unwrap();
    let f = generate_pm1_covariates(50, 10, &mut rng).unwrap();
    let loaded = load_edge_list(&edges, EdgeListOptions { one_based: false, num_nodes: Some(50) }).unwrap();
    assert_eq!(loaded, net);
    let prepared = load_covariates(&covs, CovariateOptions::default()).unwrap();
    assert_eq!(prepared.matrix.matrix(), f.matrix());

    // Library writers produce the same bytes.
    write_edge_list(&net, dir.path().join("lib.edges")).unwrap();
    write_covariates(&f, dir.path().join("lib.csv")).unwrap();
    assert_eq!(std::fs::read(&edges).unwrap(), std::fs::read(dir.path().join("lib.edges")).unwrap());
    assert_eq!(std::fs::read(&covs).unwrap(), std::fs::read(dir.path().join("lib.csv")).unwrap());
}

#[test]
fn design_and_evaluate_match_library_calls() {
    let dir = tempfile::tempdir().unwrap();
    let (edges, covs) = generate(dir.path(), "40", "4", "0.1");
    let xfile = s(&dir.path().join("x.txt"));
    let out = netab(&[
        "design", "--edges", &edges, "--covariates", &covs, "--format", "json", "--design-out", &xfile,
    ]);
    assert!(out.status.success());
    let record: Value = serde_json::from_slice(&out.stdout).unwrap();

    let net = load_edge_list(&edges, EdgeListOptions { one_based: false, num_nodes: Some(40) }).unwrap();
    let f = load_covariates(&covs, CovariateOptions::default()).unwrap().matrix;
    let problem = DesignProblem::hybrid(&net, &f, 0.5, 0.001).unwrap();
    let opts = SolveOptions {
        seed: derive_seed(DEFAULT_SEED, &[stream::SOLVER]),
        ..Default::default()
    };
    let report = solve(&problem, &opts).unwrap();
    assert_eq!(record["design"], report.design.to_string());
    assert_eq!(record["objective_t2"].as_f64().unwrap(), report.objective_t2);
    assert_eq!(record["connection_value"].as_f64().unwrap(), report.constraint_value);
    assert_eq!(record["feasible"], report.feasible);

    // Evaluating the returned design reproduces the solver's scalars.
    let out = netab(&[
        "evaluate", "--edges", &edges, "--covariates", &covs, "--design", &xfile, "--rho-t", "0.1,0.5,0.9",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<Vec<f64>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    let at_half = &rows[1];
    assert_eq!(at_half[0], 0.5);
    assert!((at_half[3] - report.objective_t2).abs() <= 1e-12 * report.objective_t2.max(1.0));
    assert_eq!(at_half[2], 0.5 * report.constraint_value);
    let crit = Criterion::new(&net, &f, 0.9).unwrap();
    assert_eq!(rows[2][7], crit.pip(&report.design).unwrap());

    // A JSON design record is accepted as well.
    let json_file = dir.path().join("x.json");
    std::fs::write(&json_file, serde_json::to_string(&record).unwrap()).unwrap();
    let again = netab(&[
        "evaluate", "--edges", &edges, "--covariates", &covs, "--design", &s(&json_file), "--rho-t", "0.1,0.5,0.9",
    ]);
    assert_eq!(again.stdout, text.as_bytes());
}

#[test]
fn bipartite_design_reports_full_connection_balance() {
    let dir = tempfile::tempdir().unwrap();
    let (net, f) = bipartite_instance();
    let edges = dir.path().join("b.edges");
    let covs = dir.path().join("b.csv");
    write_edge_list(&net, &edges).unwrap();
    write_covariates(&f, &covs).unwrap();
    let out = netab(&[
        "design", "--edges", &s(&edges), "--covariates", &s(&covs), "--method", "exact", "--format", "json",
    ]);
    assert!(out.status.success());
    let record: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(record["t1"].as_f64().unwrap(), -0.5 * net.total_degree() as f64);
    assert_eq!(record["optimal"], true);
}

#[test]
fn study_output_matches_library_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gap.csv");
    let out = netab(&["study", "--bundled", "gap_histogram_small", "--output", &s(&path)]);
    assert!(out.status.success());
    let rows = read_rows_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let lib = run_study(&StudySpec::bundled("gap_histogram_small").unwrap()).unwrap();
    assert_eq!(rows, lib.rows);
    assert!(dir.path().join("gap.csv.meta.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (edges, covs) = generate(dir.path(), "12", "2", "0.3");
    let code = |o: Output| o.status.code().unwrap();

    assert_eq!(code(netab(&["generate", "--n", "10", "--p", "2", "--density", "1.5", "--out-prefix", "x"])), 1);
    assert_eq!(code(netab(&["design", "--unknown-flag"])), 1);
    let missing = s(&dir.path().join("missing.csv"));
    assert_eq!(code(netab(&["design", "--edges", &edges, "--covariates", &missing])), 2);

    let ones = dir.path().join("ones.txt");
    std::fs::write(&ones, Design::ones(12).to_string()).unwrap();
    let out = netab(&["evaluate", "--edges", &edges, "--covariates", &covs, "--design", &s(&ones)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));

    // A triangle cannot reach xᵀWx ≤ √6·Φ⁻¹(0.001) ≈ −7.6.
    let tri_edges = dir.path().join("t.edges");
    let tri_covs = dir.path().join("t.csv");
    std::fs::write(&tri_edges, "0 1\n1 2\n0 2\n").unwrap();
    std::fs::write(&tri_covs, "1\n-1\n1\n").unwrap();
    let out = netab(&[
        "design", "--edges", &s(&tri_edges), "--covariates", &s(&tri_covs), "--method", "exact", "--no-relax",
    ]);
    assert_eq!(out.status.code(), Some(3));

    let spec = dir.path().join("bad.toml");
    std::fs::write(&spec, "kind = \"alpha_sweep\"\nreplicats = 2\n").unwrap();
    let out = netab(&["study", "--spec", &s(&spec)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replicats"));
}
