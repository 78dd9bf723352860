//! Undirected networks with node covariates: generation, ingestion,
//! isolated-node repair and sub-sampling.
//!
//! Adjacency is stored sparsely as sorted neighbor lists. Dense matrices are
//! only built by the numerical modules that need them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Simple undirected graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    neighbors: Vec<Vec<usize>>,
    num_edges: usize,
}

impl Network {
    /// Network with `n` nodes and no edges.
    pub fn empty(n: usize) -> Self {
        Network {
            neighbors: vec![Vec::new(); n],
            num_edges: 0,
        }
    }

    /// Build from unordered pairs. Duplicate pairs (in either orientation)
    /// collapse to one edge; self-loops and out-of-range ids are rejected.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::invalid(format!(
                    "edge ({i}, {j}) references a node outside 0..{n}"
                )));
            }
            if i == j {
                return Err(Error::invalid(format!("self-loop on node {i}")));
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        let mut num_ends = 0;
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
            num_ends += list.len();
        }
        Ok(Network {
            neighbors,
            num_edges: num_ends / 2,
        })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// Total degree m = Σ m_i, twice the edge count.
    pub fn total_degree(&self) -> usize {
        2 * self.num_edges
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    /// Edges as pairs `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors.iter().enumerate().flat_map(|(i, list)| {
            list.iter().copied().filter(move |&j| j > i).map(move |j| (i, j))
        })
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.degree(i) == 0).collect()
    }

    pub fn has_isolated(&self) -> bool {
        self.neighbors.iter().any(Vec::is_empty)
    }

    /// W·v.
    pub fn adjacency_mul(&self, v: &[f64]) -> Vec<f64> {
        self.neighbors
            .iter()
            .map(|list| list.iter().map(|&j| v[j]).sum())
            .collect()
    }

    /// xᵀWx for an arbitrary real vector.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.edges().map(|(i, j)| 2.0 * x[i] * x[j]).sum()
    }

    /// xᵀWx for a ±1 vector, computed exactly.
    pub fn pm1_quad_form(&self, x: &[i8]) -> i64 {
        self.edges()
            .map(|(i, j)| 2 * i64::from(x[i]) * i64::from(x[j]))
            .sum()
    }

    pub fn adjacency_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut w = DMatrix::zeros(n, n);
        for (i, j) in self.edges() {
            w[(i, j)] = 1.0;
            w[(j, i)] = 1.0;
        }
        w
    }

    /// Subgraph induced by `nodes` (which must be distinct); node `k` of the
    /// result is `nodes[k]` of `self`.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Network {
        let mut position = vec![usize::MAX; self.n()];
        for (k, &v) in nodes.iter().enumerate() {
            position[v] = k;
        }
        let neighbors: Vec<Vec<usize>> = nodes
            .iter()
            .map(|&v| {
                let mut list: Vec<usize> = self.neighbors[v]
                    .iter()
                    .filter_map(|&u| (position[u] != usize::MAX).then_some(position[u]))
                    .collect();
                list.sort_unstable();
                list
            })
            .collect();
        let num_edges = neighbors.iter().map(Vec::len).sum::<usize>() / 2;
        Network {
            neighbors,
            num_edges,
        }
    }

    fn add_edge_unchecked(&mut self, i: usize, j: usize) {
        if let Err(pos) = self.neighbors[i].binary_search(&j) {
            self.neighbors[i].insert(pos, j);
            let pos = self.neighbors[j].binary_search(&i).unwrap_err();
            self.neighbors[j].insert(pos, i);
            self.num_edges += 1;
        }
    }
}

/// How isolated (degree-zero) nodes are made CAR-compatible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsolationStrategy {
    /// Attach each isolated node to one uniformly chosen other node.
    Connect,
    /// Delete isolated nodes and reindex the rest densely.
    Remove,
}

/// Output of [`repair_isolated`].
#[derive(Debug, Clone)]
pub struct Repaired {
    pub network: Network,
    /// For `Remove`: original index of every retained node, in new order.
    pub kept: Option<Vec<usize>>,
}

/// Remove isolation from `net`.
///
/// With `Connect`, nodes are visited in index order and every node that is
/// still isolated when visited gains exactly one edge to a uniformly random
/// other node.
pub fn repair_isolated<R: Rng + ?Sized>(
    net: &Network,
    strategy: IsolationStrategy,
    rng: &mut R,
) -> Result<Repaired> {
    match strategy {
        IsolationStrategy::Connect => {
            let n = net.n();
            if n < 2 && net.has_isolated() {
                return Err(Error::invalid(
                    "cannot connect an isolated node in a network with fewer than 2 nodes",
                ));
            }
            let mut out = net.clone();
            for i in 0..n {
                if out.degree(i) == 0 {
                    let mut j = rng.random_range(0..n - 1);
                    if j >= i {
                        j += 1;
                    }
                    out.add_edge_unchecked(i, j);
                }
            }
            Ok(Repaired {
                network: out,
                kept: None,
            })
        }
        IsolationStrategy::Remove => {
            let kept: Vec<usize> = (0..net.n()).filter(|&i| net.degree(i) > 0).collect();
            Ok(Repaired {
                network: net.induced_subgraph(&kept),
                kept: Some(kept),
            })
        }
    }
}

/// Bernoulli(density) edges on every unordered pair, without repair.
pub fn generate_bernoulli_raw<R: Rng + ?Sized>(
    n: usize,
    density: f64,
    rng: &mut R,
) -> Result<Network> {
    if n < 2 {
        return Err(Error::invalid(format!("network needs at least 2 nodes, got {n}")));
    }
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::invalid(format!("density must lie in (0, 1), got {density}")));
    }
    let mut neighbors = vec![Vec::new(); n];
    let mut num_edges = 0;
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                neighbors[i].push(j);
                neighbors[j].push(i);
                num_edges += 1;
            }
        }
    }
    // Pushes happen in increasing order of the partner index, so lists are sorted.
    Ok(Network {
        neighbors,
        num_edges,
    })
}

/// Bernoulli random network followed by `Connect` repair, so every node has
/// degree at least one.
pub fn generate_bernoulli_network<R: Rng + ?Sized>(
    n: usize,
    density: f64,
    rng: &mut R,
) -> Result<Network> {
    let raw = generate_bernoulli_raw(n, density, rng)?;
    Ok(repair_isolated(&raw, IsolationStrategy::Connect, rng)?.network)
}

/// Raw node covariates z (n × p, no intercept, no rank requirement).
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    values: DMatrix<f64>,
}

impl Covariates {
    pub fn new(values: DMatrix<f64>) -> Self {
        Covariates { values }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Covariates {
        Covariates {
            values: self.values.select_rows(rows.iter()),
        }
    }
}

/// Design matrix F = [1 | z], n × (p+1), of full column rank.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    f: DMatrix<f64>,
}

/// Covariate matrix plus the raw columns that were discarded while building it.
#[derive(Debug, Clone)]
pub struct PreparedCovariates {
    pub matrix: CovariateMatrix,
    /// Indices (into the raw columns) of constant columns that were dropped.
    pub dropped_constant: Vec<usize>,
}

impl CovariateMatrix {
    /// Prepend the intercept to `z` and verify full column rank.
    pub fn from_covariates(z: &DMatrix<f64>) -> Result<Self> {
        let n = z.nrows();
        let mut f = DMatrix::from_element(n, z.ncols() + 1, 1.0);
        f.columns_mut(1, z.ncols()).copy_from(z);
        Self::from_design_matrix(f)
    }

    /// Accept a full design matrix whose first column must be all ones.
    pub fn from_design_matrix(f: DMatrix<f64>) -> Result<Self> {
        if f.ncols() == 0 || f.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::invalid("first column of F must be the intercept (all ones)"));
        }
        let cols = f.ncols();
        if f.nrows() < cols {
            return Err(Error::RankDeficient(format!(
                "{} rows cannot have rank {cols}",
                f.nrows()
            )));
        }
        let rank = numerical_rank(&f);
        if rank < cols {
            return Err(Error::RankDeficient(format!(
                "covariate matrix has rank {rank}, needs {cols}"
            )));
        }
        Ok(CovariateMatrix { f })
    }

    /// Drop constant columns, keep the first `keep_first` survivors (when
    /// given), prepend the intercept and check rank.
    pub fn prepare(raw: &Covariates, keep_first: Option<usize>) -> Result<PreparedCovariates> {
        let z = raw.values();
        let mut dropped = Vec::new();
        let mut keep = Vec::new();
        for c in 0..z.ncols() {
            let col = z.column(c);
            let first = col.get(0).copied().unwrap_or(0.0);
            if col.iter().all(|&v| v == first) {
                dropped.push(c);
            } else {
                keep.push(c);
            }
        }
        if !dropped.is_empty() {
            warn!("dropping {} constant covariate column(s): {:?}", dropped.len(), dropped);
        }
        if let Some(k) = keep_first {
            keep.truncate(k);
        }
        let selected = z.select_columns(keep.iter());
        Ok(PreparedCovariates {
            matrix: Self::from_covariates(&selected)?,
            dropped_constant: dropped,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    /// Number of columns, p + 1.
    pub fn ncols(&self) -> usize {
        self.f.ncols()
    }

    /// The covariate block z (without the intercept).
    pub fn covariates(&self) -> Covariates {
        Covariates::new(self.f.columns(1, self.f.ncols() - 1).into_owned())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<CovariateMatrix> {
        Self::from_design_matrix(self.f.select_rows(rows.iter()))
    }
}

fn numerical_rank(f: &DMatrix<f64>) -> usize {
    let sv = f.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-10 * smax.max(f64::MIN_POSITIVE);
    sv.iter().filter(|&&s| s > tol).count()
}

const COVARIATE_RETRIES: usize = 100;

/// n × (p+1) matrix with an intercept and iid ±1 covariates, regenerated
/// (bounded retries) until it has full rank.
pub fn generate_pm1_covariates<R: Rng + ?Sized>(
    n: usize,
    p: usize,
    rng: &mut R,
) -> Result<CovariateMatrix> {
    if n == 0 || p == 0 {
        return Err(Error::invalid("n and p must be positive"));
    }
    if p + 1 > n {
        return Err(Error::RankDeficient(format!(
            "cannot achieve rank {} with {n} rows",
            p + 1
        )));
    }
    let mut last = None;
    for _ in 0..COVARIATE_RETRIES {
        let z = DMatrix::from_fn(n, p, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        match CovariateMatrix::from_covariates(&z) {
            Ok(f) => return Ok(f),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::RankDeficient("retry budget exhausted".into())))
}

/// Uniform node sample of size `k` without replacement (kept in increasing
/// index order), the induced subgraph and the matching covariate rows.
pub fn subsample_network<R: Rng + ?Sized>(
    net: &Network,
    cov: &Covariates,
    k: usize,
    rng: &mut R,
) -> Result<(Network, Covariates)> {
    if cov.nrows() != net.n() {
        return Err(Error::DimensionMismatch(format!(
            "network has {} nodes, covariates have {} rows",
            net.n(),
            cov.nrows()
        )));
    }
    if k > net.n() {
        return Err(Error::invalid(format!(
            "cannot sample {k} nodes from a network of {}",
            net.n()
        )));
    }
    let mut nodes = index::sample(rng, net.n(), k).into_vec();
    nodes.sort_unstable();
    Ok((net.induced_subgraph(&nodes), cov.select_rows(&nodes)))
}

/// Options for reading an edge list.
#[derive(Debug, Clone, Copy, Default)]
pub struct EdgeListOptions {
    /// Node ids in the file start at 1.
    pub one_based: bool,
    /// Total node count; defaults to the largest id plus one.
    pub num_nodes: Option<usize>,
}

/// Read a whitespace-separated edge list. Blank lines and `#` comments are
/// ignored.
pub fn load_edge_list(path: impl AsRef<Path>, opts: EdgeListOptions) -> Result<Network> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(&text, path, opts)
}

fn parse_edge_list(text: &str, path: &Path, opts: EdgeListOptions) -> Result<Network> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut edges = Vec::new();
    let mut max_id = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(parse_err(
                lineno + 1,
                format!("expected two node ids, found {} field(s)", tokens.len()),
            ));
        }
        let mut ids = [0usize; 2];
        for (slot, tok) in ids.iter_mut().zip(&tokens) {
            let id: usize = tok
                .parse()
                .map_err(|_| parse_err(lineno + 1, format!("invalid node id {tok:?}")))?;
            *slot = if opts.one_based {
                id.checked_sub(1)
                    .ok_or_else(|| parse_err(lineno + 1, "node id 0 in a 1-based file".into()))?
            } else {
                id
            };
        }
        if ids[0] == ids[1] {
            return Err(parse_err(lineno + 1, format!("self-loop on node {}", tokens[0])));
        }
        max_id = max_id.max(Some(ids[0].max(ids[1])));
        edges.push((ids[0], ids[1]));
    }
    let n = match (opts.num_nodes, max_id) {
        (Some(n), Some(m)) if m >= n => {
            return Err(Error::DimensionMismatch(format!(
                "edge list references node {m} but only {n} nodes were declared"
            )))
        }
        (Some(n), _) => n,
        (None, Some(m)) => m + 1,
        (None, None) => 0,
    };
    Network::from_edges(n, edges)
}

/// Options for reading a covariate CSV.
#[derive(Debug, Clone, Copy, Default)]
pub struct CovariateOptions {
    pub skip_header: bool,
    /// Keep only the first k non-constant columns.
    pub keep_first: Option<usize>,
}

/// Read raw covariate values: one comma-separated row per node.
pub fn read_covariates(path: impl AsRef<Path>, skip_header: bool) -> Result<Covariates> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(skip_header)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row = record
            .iter()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("invalid number {tok:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let p = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    Ok(Covariates::new(DMatrix::from_fn(n, p, |i, j| rows[i][j])))
}

/// Read covariates and build the validated design matrix.
pub fn load_covariates(
    path: impl AsRef<Path>,
    opts: CovariateOptions,
) -> Result<PreparedCovariates> {
    let raw = read_covariates(path, opts.skip_header)?;
    CovariateMatrix::prepare(&raw, opts.keep_first)
}

/// Load an edge list and its covariates, checking that they describe the
/// same node set. The node count comes from the covariate rows.
pub fn load_dataset(
    edges: impl AsRef<Path>,
    covariates: impl AsRef<Path>,
    edge_opts: EdgeListOptions,
    cov_opts: CovariateOptions,
) -> Result<(Network, Covariates)> {
    let raw = read_covariates(covariates, cov_opts.skip_header)?;
    let net = load_edge_list(
        edges,
        EdgeListOptions {
            num_nodes: Some(edge_opts.num_nodes.unwrap_or(raw.nrows())),
            ..edge_opts
        },
    )?;
    if net.n() != raw.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "edge list has {} nodes, covariate file has {} rows",
            net.n(),
            raw.nrows()
        )));
    }
    Ok((net, raw))
}

pub fn write_edge_list(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (i, j) in net.edges() {
        let _ = writeln!(out, "{i} {j}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Write the covariate block (no intercept) as headerless CSV.
pub fn write_covariates(f: &CovariateMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let z = f.covariates();
    let mut out = String::new();
    for i in 0..z.nrows() {
        let row: Vec<String> = z.values().row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::*;

    fn assert_valid(net: &Network) {
        let w = net.adjacency_dense();
        assert_eq!(w, w.transpose());
        assert!((0..net.n()).all(|i| w[(i, i)] == 0.0));
        assert_eq!(net.degrees().iter().sum::<usize>(), net.total_degree());
    }

    #[test]
    fn near_certain_edge_on_two_nodes() {
        let hits = (0..200)
            .filter(|&s| {
                let raw = generate_bernoulli_raw(2, 0.999999, &mut seeded_rng(s)).unwrap();
                raw.has_edge(0, 1)
            })
            .count();
        assert!(hits >= 199);
        let net = generate_bernoulli_network(2, 0.999999, &mut seeded_rng(1)).unwrap();
        assert_eq!(net.edges().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn bernoulli_edge_count_matches_binomial_mean() {
        let (n, d) = (50usize, 0.08);
        let pairs = (n * (n - 1) / 2) as f64;
        let counts: Vec<f64> = (0..1000)
            .map(|s| generate_bernoulli_raw(n, d, &mut seeded_rng(s)).unwrap().num_edges() as f64)
            .collect();
        let mean = crate::stats::mean(&counts);
        let se = (pairs * d * (1.0 - d)).sqrt() / (counts.len() as f64).sqrt();
        assert!((mean - pairs * d).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn generated_network_has_no_isolated_nodes() {
        for s in 0..20 {
            let net = generate_bernoulli_network(20, 0.5, &mut seeded_rng(s)).unwrap();
            assert!(!net.has_isolated());
            assert_valid(&net);
        }
        let sparse = generate_bernoulli_network(60, 0.01, &mut seeded_rng(3)).unwrap();
        assert!(!sparse.has_isolated());
    }

    #[test]
    fn generator_rejects_bad_input() {
        assert!(generate_bernoulli_network(1, 0.5, &mut seeded_rng(0)).is_err());
        assert!(generate_bernoulli_network(10, 1.5, &mut seeded_rng(0)).is_err());
        assert!(generate_bernoulli_network(10, 0.0, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn generator_is_reproducible() {
        let a = generate_bernoulli_network(40, 0.1, &mut seeded_rng(9)).unwrap();
        let b = generate_bernoulli_network(40, 0.1, &mut seeded_rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn covariates_have_intercept_and_centered_columns() {
        let f = generate_pm1_covariates(4, 1, &mut seeded_rng(2)).unwrap();
        assert!(f.matrix().column(0).iter().all(|&v| v == 1.0));

        let f = generate_pm1_covariates(1000, 5, &mut seeded_rng(5)).unwrap();
        for c in 1..6 {
            let m = f.matrix().column(c).mean();
            assert!(m.abs() < 3.0 / 1000f64.sqrt(), "column {c} mean {m}");
        }
        assert!(matches!(
            generate_pm1_covariates(3, 5, &mut seeded_rng(0)),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn repair_examples() {
        let net = Network::from_edges(3, [(0, 1)]).unwrap();
        let removed = repair_isolated(&net, IsolationStrategy::Remove, &mut seeded_rng(0)).unwrap();
        assert_eq!(removed.network.n(), 2);
        assert!(removed.network.has_edge(0, 1));
        assert_eq!(removed.kept, Some(vec![0, 1]));

        let connected =
            repair_isolated(&net, IsolationStrategy::Connect, &mut seeded_rng(0)).unwrap();
        let g = connected.network;
        assert!(g.has_edge(2, 0) || g.has_edge(2, 1));
        assert_eq!(g.num_edges(), 2);
        assert!(!g.has_isolated());

        let full = Network::from_edges(3, [(0, 1), (1, 2)]).unwrap();
        for strategy in [IsolationStrategy::Connect, IsolationStrategy::Remove] {
            let r = repair_isolated(&full, strategy, &mut seeded_rng(4)).unwrap();
            assert_eq!(r.network, full);
        }
        let lonely = Network::empty(1);
        assert!(repair_isolated(&lonely, IsolationStrategy::Connect, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn subsample_examples() {
        let net = generate_bernoulli_network(30, 0.2, &mut seeded_rng(1)).unwrap();
        let cov = Covariates::new(DMatrix::from_fn(30, 2, |i, j| (i * 2 + j) as f64));
        let (g, c) = subsample_network(&net, &cov, 30, &mut seeded_rng(2)).unwrap();
        assert_eq!(g, net);
        assert_eq!(c, cov);
        let (g1, c1) = subsample_network(&net, &cov, 1, &mut seeded_rng(2)).unwrap();
        assert_eq!((g1.n(), g1.num_edges(), c1.nrows()), (1, 0, 1));
        assert!(subsample_network(&net, &cov, 31, &mut seeded_rng(2)).is_err());
    }

    #[test]
    fn subsample_edge_fraction_matches_pair_inclusion() {
        let net = generate_bernoulli_network(100, 0.1, &mut seeded_rng(11)).unwrap();
        let cov = Covariates::new(DMatrix::zeros(100, 1));
        let fractions: Vec<f64> = (0..200)
            .map(|s| {
                let (g, _) = subsample_network(&net, &cov, 50, &mut seeded_rng(1000 + s)).unwrap();
                g.num_edges() as f64 / net.num_edges() as f64
            })
            .collect();
        let expected = (50.0 * 49.0) / (100.0 * 99.0);
        let mean = crate::stats::mean(&fractions);
        let sd = (fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>()
            / (fractions.len() - 1) as f64)
            .sqrt();
        let se = sd / (fractions.len() as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * se, "{mean} vs {expected}");
    }

    #[test]
    fn edge_list_parsing() {
        let p = Path::new("mem");
        let net = parse_edge_list("0 1\n1 2", p, EdgeListOptions::default()).unwrap();
        assert_eq!((net.n(), net.total_degree()), (3, 4));

        let net = parse_edge_list(
            "# comment\n\n1 2 # trailing\n2 3\n",
            p,
            EdgeListOptions {
                one_based: true,
                num_nodes: None,
            },
        )
        .unwrap();
        assert_eq!(net.edges().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);

        match parse_edge_list("0 1\n1 x\n", p, EdgeListOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_edge_list("0 1 2\n", p, EdgeListOptions::default()).is_err());
        assert!(parse_edge_list("1 1\n", p, EdgeListOptions::default()).is_err());
        let declared = EdgeListOptions {
            one_based: false,
            num_nodes: Some(2),
        };
        assert!(matches!(
            parse_edge_list("0 2\n", p, declared),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn covariate_preparation_drops_constants_and_checks_rank() {
        let raw = Covariates::new(DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 5.0, 2.0, -1.0, 5.0, 0.0, 1.0, 5.0, 1.0, -1.0, 5.0, 3.0],
        ));
        let prepared = CovariateMatrix::prepare(&raw, None).unwrap();
        assert_eq!(prepared.dropped_constant, vec![1]);
        assert_eq!(prepared.matrix.ncols(), 3);

        let truncated = CovariateMatrix::prepare(&raw, Some(1)).unwrap();
        assert_eq!(truncated.matrix.ncols(), 2);

        let dup = Covariates::new(DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 1.0, -1.0, -1.0, 2.0, 2.0, 0.0, 0.0],
        ));
        assert!(matches!(
            CovariateMatrix::prepare(&dup, None),
            Err(Error::RankDeficient(_))
        ));
    }

    proptest! {
        #[test]
        fn networks_are_symmetric_and_hollow(n in 2usize..25, d in 0.05f64..0.9, seed in any::<u64>()) {
            let net = generate_bernoulli_network(n, d, &mut seeded_rng(seed)).unwrap();
            assert_valid(&net);
            prop_assert!(!net.has_isolated());
        }

        #[test]
        fn remove_repair_is_idempotent(n in 2usize..30, d in 0.01f64..0.3, seed in any::<u64>()) {
            let raw = generate_bernoulli_raw(n, d, &mut seeded_rng(seed)).unwrap();
            let once = repair_isolated(&raw, IsolationStrategy::Remove, &mut seeded_rng(0)).unwrap();
            let twice = repair_isolated(&once.network, IsolationStrategy::Remove, &mut seeded_rng(0)).unwrap();
            prop_assert_eq!(&once.network, &twice.network);
            prop_assert!(!once.network.has_isolated());
        }
    }
}
