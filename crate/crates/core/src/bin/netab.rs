//! Command-line front end: generate data, compute designs, evaluate and
//! diagnose them, and run simulation studies.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 infeasible,
//! 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use netab::criterion::{
    concavity_probe, quadform_correlation, robustness_scatter, surrogate_gap_diagnostics,
    Criterion,
};
use netab::experiments::{antithetic_uniform_draws, write_rows_csv, StudyResult, StudySpec};
use netab::graph::{
    generate_bernoulli_network, generate_pm1_covariates, load_covariates, load_edge_list,
    write_covariates, write_edge_list, CovariateMatrix, CovariateOptions, EdgeListOptions,
};
use netab::optimizer::{solve, DesignProblem, MethodChoice, SolveOptions, SolveReport};
use netab::rng::{derive_seed, seeded_rng, stream};
use netab::{Design, Error, Network};

/// Seed used when `--seed` is not given.
const DEFAULT_SEED: u64 = 20_240_501;

#[derive(Parser, Debug)]
#[command(name = "netab", version, about = "Treatment allocation for A/B tests on networks")]
struct Cli {
    /// Master seed for every random quantity.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file (stdout when omitted).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic Bernoulli network and ±1 covariates.
    Generate(GenerateArgs),
    /// Compute a design for a network and covariates.
    Design(DesignArgs),
    /// Criterion values and PIP of a given design.
    Evaluate(EvaluateArgs),
    /// Robustness, surrogate-gap and concavity diagnostics.
    Diagnose(DiagnoseArgs),
    /// Run a simulation study.
    Study(StudyArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    density: f64,
    /// Writes `<prefix>.edges` and `<prefix>.covariates.csv`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Whitespace-separated edge list.
    #[arg(long)]
    edges: PathBuf,
    /// Comma-separated covariates, one row per node.
    #[arg(long)]
    covariates: PathBuf,
    /// Node ids in the edge list start at 1.
    #[arg(long)]
    one_based: bool,
    /// The covariate file has a header row.
    #[arg(long)]
    skip_header: bool,
    /// Keep only the first k non-constant covariate columns.
    #[arg(long)]
    keep_first: Option<usize>,
}

impl DataArgs {
    fn load(&self) -> netab::Result<(Network, CovariateMatrix)> {
        let prepared = load_covariates(
            &self.covariates,
            CovariateOptions {
                skip_header: self.skip_header,
                keep_first: self.keep_first,
            },
        )?;
        for j in &prepared.dropped_constant {
            log::warn!("dropped constant covariate column {j}");
        }
        let net = load_edge_list(
            &self.edges,
            EdgeListOptions {
                one_based: self.one_based,
                num_nodes: Some(prepared.matrix.n()),
            },
        )?;
        Ok((net, prepared.matrix))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Auto,
    Exact,
    Local,
    Annealing,
}

impl From<MethodArg> for MethodChoice {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Auto => MethodChoice::Auto,
            MethodArg::Exact => MethodChoice::Exact,
            MethodArg::Local => MethodChoice::Local,
            MethodArg::Annealing => MethodChoice::Annealing,
        }
    }
}

#[derive(Args, Debug)]
struct DesignArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.5)]
    rho0: f64,
    #[arg(long, default_value_t = 0.001)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
    method: MethodArg,
    /// Local-search restarts.
    #[arg(long, default_value_t = 32)]
    restarts: usize,
    /// Wall-clock budget per solve, in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    /// Do not relax α when no feasible design exists.
    #[arg(long)]
    no_relax: bool,
    /// Ignore the network (covariate balance only).
    #[arg(long)]
    no_network: bool,
    /// Also write the design as plain ±1 text.
    #[arg(long)]
    design_out: Option<PathBuf>,
    /// Include wall time in the output.
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// ±1 text, a JSON array, or a JSON design record.
    #[arg(long)]
    design: PathBuf,
    /// Correlations at which to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    rho_t: Vec<f64>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.5)]
    rho0: f64,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
    rho_grid: Vec<f64>,
    /// Random designs for the robustness scatter.
    #[arg(long, default_value_t = 1000)]
    designs: usize,
    /// Design for the gap and concavity diagnostics; a random balanced
    /// design when omitted.
    #[arg(long)]
    design: Option<PathBuf>,
    /// Antithetic U(0, 1) prior draws for the gap.
    #[arg(long, default_value_t = 200)]
    prior_draws: usize,
    /// α of the probabilistic gap bound.
    #[arg(long, default_value_t = 0.05)]
    gap_alpha: f64,
}

#[derive(Args, Debug)]
struct StudyArgs {
    /// Study spec file (TOML).
    #[arg(long, conflicts_with = "bundled")]
    spec: Option<PathBuf>,
    /// Name of a bundled spec.
    #[arg(long)]
    bundled: Option<String>,
    /// List the bundled specs and exit.
    #[arg(long)]
    list: bool,
    /// Scale up to the full study sizes.
    #[arg(long)]
    full: bool,
    /// Record wall time per replicate.
    #[arg(long)]
    timing: bool,
    /// Override the spec's master seed with `--seed`.
    #[arg(long)]
    use_global_seed: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 1,
        Error::Parse { .. }
        | Error::Io { .. }
        | Error::DimensionMismatch(_)
        | Error::RankDeficient(_)
        | Error::DegenerateDesign(_)
        | Error::NotPositiveDefinite(_) => 2,
        Error::Infeasible(_) => 3,
        Error::EigenNotConverged(_) => 4,
    }
}

/// Serialize records as CSV (with header) or a pretty JSON array/object.
fn render<T: Serialize>(records: &[T], format: Format, single: bool) -> netab::Result<String> {
    match format {
        Format::Json if single && records.len() == 1 => {
            Ok(serde_json::to_string_pretty(&records[0]).expect("serializable") + "\n")
        }
        Format::Json => Ok(serde_json::to_string_pretty(records).expect("serializable") + "\n"),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in records {
                w.serialize(r).map_err(|e| Error::Config(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("utf-8"))
        }
    }
}

fn emit(cli: &Cli, text: &str) -> netab::Result<()> {
    match &cli.output {
        Some(path) => std::fs::write(path, text).map_err(|e| io_err(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

#[derive(Serialize)]
struct GenerateRecord {
    n: usize,
    m: usize,
    p: usize,
    density: f64,
    seed: u64,
    edges: String,
    covariates: String,
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> netab::Result<()> {
    let mut rng = seeded_rng(derive_seed(cli.seed, &[stream::DATASET]));
    let net = generate_bernoulli_network(args.n, args.density, &mut rng)?;
    let f = generate_pm1_covariates(args.n, args.p, &mut rng)?;
    let prefix = args.out_prefix.display().to_string();
    let edges = format!("{prefix}.edges");
    let covariates = format!("{prefix}.covariates.csv");
    write_edge_list(&net, &edges)?;
    write_covariates(&f, &covariates)?;
    let record = GenerateRecord {
        n: net.n(),
        m: net.total_degree(),
        p: args.p,
        density: args.density,
        seed: cli.seed,
        edges,
        covariates,
    };
    emit(cli, &render(&[record], cli.format, true)?)
}

/// Solver report plus T1 at ρ0, flattened for output.
#[derive(Serialize)]
struct DesignRecord {
    method: String,
    n: usize,
    m: usize,
    rho0: Option<f64>,
    alpha: Option<f64>,
    alpha_used: Option<f64>,
    relaxations_applied: String,
    q: Option<f64>,
    connection_value: f64,
    t1: Option<f64>,
    objective_t2: f64,
    feasible: bool,
    optimal: bool,
    iterations: u64,
    restarts: usize,
    seed: u64,
    wall_time_secs: Option<f64>,
    design: String,
}

fn cmd_design(cli: &Cli, args: &DesignArgs) -> netab::Result<bool> {
    let (net, f) = args.data.load()?;
    let problem = if args.no_network {
        DesignProblem::no_network(&f)?
    } else {
        DesignProblem::hybrid(&net, &f, args.rho0, args.alpha)?
    };
    let opts = SolveOptions {
        method: args.method.into(),
        restarts: args.restarts,
        seed: derive_seed(cli.seed, &[stream::SOLVER]),
        time_budget: args.time_budget.map(Duration::from_secs_f64),
        relax: !args.no_relax,
        ..Default::default()
    };
    let report: SolveReport = solve(&problem, &opts)?;
    let t1 = if args.no_network {
        None
    } else {
        Some(Criterion::new(&net, &f, args.rho0)?.t1(&report.design)?)
    };
    if let Some(path) = &args.design_out {
        std::fs::write(path, format!("{}\n", report.design)).map_err(|e| io_err(path, e))?;
    }
    let method = serde_json::to_value(report.method).expect("serializable");
    let record = DesignRecord {
        method: method.as_str().unwrap_or_default().to_string(),
        n: net.n(),
        m: net.total_degree(),
        rho0: (!args.no_network).then_some(args.rho0),
        alpha: (!args.no_network).then_some(args.alpha),
        alpha_used: report.alpha_used,
        relaxations_applied: report
            .relaxations_applied
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(" "),
        q: report.q,
        connection_value: report.constraint_value,
        t1,
        objective_t2: report.objective_t2,
        feasible: report.feasible,
        optimal: report.optimal,
        iterations: report.iterations,
        restarts: report.restarts,
        seed: report.seed,
        wall_time_secs: args.timing.then_some(report.wall_time.as_secs_f64()),
        design: report.design.to_string(),
    };
    emit(cli, &render(&[record], cli.format, true)?)?;
    Ok(report.feasible)
}

fn read_design(path: &Path) -> netab::Result<Design> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let value: serde_json::Value =
            serde_json::from_str(trimmed).map_err(|e| parse_err(e.to_string()))?;
        match value.get("design") {
            Some(serde_json::Value::String(s)) => s.parse(),
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| parse_err(e.to_string())),
            None => Err(parse_err("JSON record has no \"design\" field".into())),
        }
    } else if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| parse_err(e.to_string()))
    } else {
        trimmed.parse().map_err(|e: Error| parse_err(e.to_string()))
    }
}

#[derive(Serialize)]
struct EvaluateRecord {
    rho_t: f64,
    t: f64,
    t1: f64,
    t2: f64,
    m: f64,
    variance: f64,
    expected_precision: f64,
    pip: f64,
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> netab::Result<()> {
    let (net, f) = args.data.load()?;
    let x = read_design(&args.design)?;
    let mut records = Vec::with_capacity(args.rho_t.len());
    for &rho in &args.rho_t {
        let crit = Criterion::new(&net, &f, rho)?;
        let b = crit.evaluate(&x)?;
        records.push(EvaluateRecord {
            rho_t: rho,
            t: b.t,
            t1: b.t1,
            t2: b.t2,
            m: b.m,
            variance: b.variance,
            expected_precision: crit.expected_precision(),
            pip: crit.pip(&x)?,
        });
    }
    emit(cli, &render(&records, cli.format, false)?)
}

#[derive(Serialize, Default)]
struct DiagnoseRecord {
    diagnostic: &'static str,
    rho0: f64,
    rho: Option<f64>,
    exact_correlation: Option<f64>,
    sample_correlation: Option<f64>,
    t_rho0: Option<f64>,
    gap: Option<f64>,
    second_derivative: Option<f64>,
    bound_a: Option<f64>,
    bound_b: Option<f64>,
    max_second_difference: Option<f64>,
}

fn cmd_diagnose(cli: &Cli, args: &DiagnoseArgs) -> netab::Result<()> {
    let (net, f) = args.data.load()?;
    let k0 = Criterion::new(&net, &f, args.rho0)?.k_matrix();
    let mut records = Vec::new();
    for (i, &rho) in args.rho_grid.iter().enumerate() {
        let k = Criterion::new(&net, &f, rho)?.k_matrix();
        let mut rng = seeded_rng(derive_seed(cli.seed, &[stream::RANDOM_DESIGNS, i as u64]));
        let scatter = robustness_scatter(&net, &f, args.rho0, rho, args.designs, &mut rng)?;
        records.push(DiagnoseRecord {
            diagnostic: "robustness",
            rho0: args.rho0,
            rho: Some(rho),
            exact_correlation: Some(quadform_correlation(&k0, &k)?),
            sample_correlation: Some(scatter.sample_correlation),
            ..Default::default()
        });
    }
    let x = match &args.design {
        Some(path) => read_design(path)?,
        None => netab::optimizer::random_balanced_design(
            net.n(),
            &mut seeded_rng(derive_seed(cli.seed, &[stream::RANDOM_DESIGNS])),
        ),
    };
    let draws = antithetic_uniform_draws(
        args.prior_draws,
        &mut seeded_rng(derive_seed(cli.seed, &[stream::PRIOR])),
    );
    let gap = surrogate_gap_diagnostics(&net, &f, &x, args.rho0, &draws, args.gap_alpha)?;
    records.push(DiagnoseRecord {
        diagnostic: "gap",
        rho0: args.rho0,
        t_rho0: Some(gap.t_rho0),
        gap: Some(gap.gap_estimate),
        second_derivative: Some(gap.second_derivative_term),
        bound_a: Some(gap.bound_a),
        bound_b: Some(gap.bound_b),
        ..Default::default()
    });
    let grid: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
    let diffs = concavity_probe(&net, &f, &x, &grid)?;
    records.push(DiagnoseRecord {
        diagnostic: "concavity",
        rho0: args.rho0,
        max_second_difference: Some(diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        ..Default::default()
    });
    emit(cli, &render(&records, cli.format, false)?)
}

fn cmd_study(cli: &Cli, args: &StudyArgs) -> netab::Result<()> {
    if args.list {
        return emit(cli, &(StudySpec::bundled_names().join("\n") + "\n"));
    }
    let mut spec = match (&args.spec, &args.bundled) {
        (Some(path), _) => StudySpec::load(path)?,
        (None, Some(name)) => StudySpec::bundled(name)?,
        (None, None) => {
            return Err(Error::InvalidArgument("give --spec, --bundled or --list".into()))
        }
    };
    if args.full {
        spec = spec.full_scale();
    }
    if args.use_global_seed {
        spec.master_seed = cli.seed;
    }
    spec.timing |= args.timing;
    let result: StudyResult = netab::experiments::run_study(&spec)?;
    match (&cli.output, cli.format) {
        (Some(path), Format::Csv) => result.write(path),
        (_, Format::Json) => emit(cli, &result.to_json()),
        (None, Format::Csv) => emit(cli, &write_rows_csv(&result.rows)?),
    }
}

fn run(cli: &Cli) -> netab::Result<bool> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    match &cli.command {
        Command::Generate(a) => cmd_generate(cli, a).map(|_| true),
        Command::Design(a) => cmd_design(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a).map(|_| true),
        Command::Diagnose(a) => cmd_diagnose(cli, a).map(|_| true),
        Command::Study(a) => cmd_study(cli, a).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: no feasible design found on the relaxation ladder");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
