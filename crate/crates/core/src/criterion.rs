//! Design criterion T(x, ρ) = xᵀKx = m − T1 − T2 and its diagnostics.
//!
//! K = R − RF(FᵀRF)⁻¹FᵀR with R = D − ρW. T1 = ρ·xᵀWx is the connection
//! term, T2 = gᵀA⁻¹g with g = Bᵀx, B = RF and A = FᵀRF the covariate term.
//! K itself is only materialized by [`k_matrix`].

use std::collections::HashSet;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::car::factor_precision;
use crate::design::Design;
use crate::error::{Error, Result};
use crate::graph::{CovariateMatrix, Network};
use crate::linalg::{adjacency_mul_mat, dominant_eigenvalue, kernel_dense, kernel_mul_mat};
use crate::optimizer::random_iid_design;
use crate::stats::{correlation, normal_quantile};

/// Relative threshold below which xᵀKx counts as zero.
pub const DEGENERATE_TOL: f64 = 1e-10;

/// The quadratic form x ↦ (Bᵀx)ᵀA⁻¹(Bᵀx) held as B and a Cholesky factor of A.
#[derive(Debug, Clone)]
pub struct ProjectionForm {
    b: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl ProjectionForm {
    pub fn new(b: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(a)
            .ok_or_else(|| Error::RankDeficient("FᵀRF is not positive definite".into()))?;
        Ok(ProjectionForm { b, chol })
    }

    /// x ↦ xᵀF(FᵀF)⁻¹Fᵀx, the covariate imbalance ignoring the network.
    pub fn ordinary(f: &CovariateMatrix) -> Result<Self> {
        let fm = f.matrix().clone();
        let a = fm.transpose() * &fm;
        Self::new(fm, a)
    }

    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(m)
    }

    /// Lower Cholesky factor L of A = LLᵀ.
    pub fn cholesky_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn g(&self, x: &Design) -> DVector<f64> {
        self.b.tr_mul(&x.to_dvector())
    }

    pub fn value_from_g(&self, g: &DVector<f64>) -> f64 {
        g.dot(&self.chol.solve(g)).max(0.0)
    }

    pub fn value(&self, x: &Design) -> f64 {
        self.value_from_g(&self.g(x))
    }

    /// (tr M, 1ᵀM1) for M = BA⁻¹Bᵀ.
    fn trace_and_total(&self) -> (f64, f64) {
        let btb = self.b.tr_mul(&self.b);
        let trace = self.chol.solve(&btb).trace();
        let ones = DVector::from_element(self.n(), 1.0);
        let s = self.b.tr_mul(&ones);
        (trace, s.dot(&self.chol.solve(&s)))
    }

    /// E[xᵀMx] over random balanced designs.
    pub fn expected_value(&self) -> f64 {
        let (tr, total) = self.trace_and_total();
        expected_precision_matrix(self.n()).trace_product(tr, total)
    }
}

/// T(·, ρ) for one network, covariate matrix and correlation.
#[derive(Debug, Clone)]
pub struct Criterion<'a> {
    net: &'a Network,
    f: &'a CovariateMatrix,
    rho: f64,
    form: ProjectionForm,
}

impl<'a> Criterion<'a> {
    pub fn new(net: &'a Network, f: &'a CovariateMatrix, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::invalid(format!("correlation must lie in [0, 1), got {rho}")));
        }
        if f.n() != net.n() {
            return Err(Error::DimensionMismatch(format!(
                "network has {} nodes, F has {} rows",
                net.n(),
                f.n()
            )));
        }
        if net.has_isolated() {
            return Err(Error::NotPositiveDefinite(
                "CAR kernel undefined for isolated nodes".into(),
            ));
        }
        let b = kernel_mul_mat(net, rho, f.matrix());
        let a = f.matrix().tr_mul(&b);
        let a = (&a + a.transpose()) * 0.5;
        Ok(Criterion {
            net,
            f,
            rho,
            form: ProjectionForm::new(b, a)?,
        })
    }

    pub fn network(&self) -> &'a Network {
        self.net
    }

    pub fn covariates(&self) -> &'a CovariateMatrix {
        self.f
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// The T2 form.
    pub fn form(&self) -> &ProjectionForm {
        &self.form
    }

    pub fn total_degree(&self) -> f64 {
        self.net.total_degree() as f64
    }

    fn check(&self, x: &Design) -> Result<()> {
        if x.len() != self.net.n() {
            return Err(Error::DimensionMismatch(format!(
                "design length {} for {} nodes",
                x.len(),
                self.net.n()
            )));
        }
        Ok(())
    }

    pub fn t1(&self, x: &Design) -> Result<f64> {
        self.check(x)?;
        Ok(self.rho * self.net.pm1_quad_form(x.as_slice()) as f64)
    }

    pub fn t2(&self, x: &Design) -> Result<f64> {
        self.check(x)?;
        Ok(self.form.value(x))
    }

    pub fn evaluate(&self, x: &Design) -> Result<CriterionBreakdown> {
        let t1 = self.t1(x)?;
        let t2 = self.form.value(x);
        let m = self.total_degree();
        let t = m - t1 - t2;
        Ok(CriterionBreakdown {
            t,
            t1,
            t2,
            m,
            variance: if t > 0.0 { 1.0 / t } else { f64::INFINITY },
            rho: self.rho,
        })
    }

    pub fn t(&self, x: &Design) -> Result<f64> {
        Ok(self.evaluate(x)?.t)
    }

    /// Dense K.
    pub fn k_matrix(&self) -> DMatrix<f64> {
        let b = self.form.b();
        let r = kernel_dense(self.net, self.rho);
        let k = r - b * self.form.chol.solve(&b.transpose());
        (&k + k.transpose()) * 0.5
    }

    /// tr(KC): the expected precision of a random balanced design.
    pub fn expected_precision(&self) -> f64 {
        let m = self.total_degree();
        let (tr_m, total_m) = self.form.trace_and_total();
        expected_precision_matrix(self.net.n())
            .trace_product(m - tr_m, (1.0 - self.rho) * m - total_m)
    }

    /// E[T1] under random balanced designs, ρ·c·m.
    pub fn expected_t1(&self) -> f64 {
        self.rho * expected_precision_matrix(self.net.n()).offdiag * self.total_degree()
    }

    /// E[T2] under random balanced designs.
    pub fn expected_t2(&self) -> f64 {
        self.form.expected_value()
    }

    /// 1 − tr(KC)/x0ᵀKx0.
    pub fn pip(&self, x0: &Design) -> Result<f64> {
        let t = self.t(x0)?;
        if t < DEGENERATE_TOL * self.total_degree() {
            return Err(Error::DegenerateDesign(format!(
                "xᵀKx = {t:.3e} is numerically zero"
            )));
        }
        Ok(1.0 - self.expected_precision() / t)
    }

    /// s = x − F A⁻¹ Bᵀx, the part of x not explained by the covariates.
    pub fn residual(&self, x: &Design) -> Result<DVector<f64>> {
        self.check(x)?;
        let coef = self.form.solve(&self.form.g(x));
        Ok(x.to_dvector() - self.f.matrix() * coef)
    }
}

/// Criterion values for one design at one correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionBreakdown {
    pub t: f64,
    pub t1: f64,
    pub t2: f64,
    pub m: f64,
    /// σ²/T with σ² = 1.
    pub variance: f64,
    pub rho: f64,
}

/// K = R − RF(FᵀRF)⁻¹FᵀR.
pub fn k_matrix(net: &Network, f: &CovariateMatrix, rho: f64) -> Result<DMatrix<f64>> {
    Ok(Criterion::new(net, f, rho)?.k_matrix())
}

pub fn evaluate(
    net: &Network,
    f: &CovariateMatrix,
    x: &Design,
    rho: f64,
) -> Result<CriterionBreakdown> {
    Criterion::new(net, f, rho)?.evaluate(x)
}

/// Percentage improvement in precision of `x0` over a random balanced design,
/// with K built at `rho_t`.
pub fn pip(net: &Network, f: &CovariateMatrix, x0: &Design, rho_t: f64) -> Result<f64> {
    Criterion::new(net, f, rho_t)?.pip(x0)
}

/// Covariance C of a uniformly random balanced design: unit diagonal and a
/// constant off-diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalancedCovariance {
    pub n: usize,
    pub offdiag: f64,
}

impl BalancedCovariance {
    /// tr(SC) given tr(S) and 1ᵀS1 of a symmetric S.
    pub fn trace_product(&self, trace: f64, total: f64) -> f64 {
        trace + self.offdiag * (total - trace)
    }

    pub fn dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if i == j { 1.0 } else { self.offdiag })
    }
}

/// C for n nodes: off-diagonal −1/(n−1) for even n and −1/n for odd n.
pub fn expected_precision_matrix(n: usize) -> BalancedCovariance {
    let offdiag = if n < 2 {
        0.0
    } else if n.is_multiple_of(2) {
        -1.0 / (n as f64 - 1.0)
    } else {
        -1.0 / n as f64
    };
    BalancedCovariance { n, offdiag }
}

/// tr(KC).
pub fn expected_precision(net: &Network, f: &CovariateMatrix, rho: f64) -> Result<f64> {
    Ok(Criterion::new(net, f, rho)?.expected_precision())
}

/// Correlation of xᵀAx and xᵀBx over iid uniform ±1 designs:
/// Σ_{i<j} a_ij b_ij / (√Σ_{i<j} a_ij² · √Σ_{i<j} b_ij²).
pub fn quadform_correlation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() || a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.nrows();
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    let scale = a.amax().max(b.amax()).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in i + 1..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-9 * scale
                || (b[(i, j)] - b[(j, i)]).abs() > 1e-9 * scale
            {
                return Err(Error::invalid("matrices must be symmetric"));
            }
            ab += a[(i, j)] * b[(i, j)];
            aa += a[(i, j)] * a[(i, j)];
            bb += b[(i, j)] * b[(i, j)];
        }
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::invalid("matrix has no off-diagonal mass"));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Paired criterion values over random iid designs.
#[derive(Debug, Clone, Serialize)]
pub struct RobustnessScatter {
    pub pairs: Vec<(f64, f64)>,
    pub sample_correlation: f64,
}

/// (T(x, ρ0), T(x, ρ)) for `n_designs` distinct iid ±1 designs.
pub fn robustness_scatter<R: Rng + ?Sized>(
    net: &Network,
    f: &CovariateMatrix,
    rho0: f64,
    rho: f64,
    n_designs: usize,
    rng: &mut R,
) -> Result<RobustnessScatter> {
    if n_designs < 2 {
        return Err(Error::invalid("need at least two designs"));
    }
    let n = net.n();
    if n < 64 && (n_designs as u128) > (1u128 << n) {
        return Err(Error::invalid(format!(
            "only {} distinct designs exist on {n} nodes",
            1u128 << n
        )));
    }
    let c0 = Criterion::new(net, f, rho0)?;
    let c1 = Criterion::new(net, f, rho)?;
    let mut seen = HashSet::with_capacity(n_designs);
    let mut pairs = Vec::with_capacity(n_designs);
    while pairs.len() < n_designs {
        let x = random_iid_design(n, rng);
        if !seen.insert(x.clone()) {
            continue;
        }
        pairs.push((c0.t(&x)?, c1.t(&x)?));
    }
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    Ok(RobustnessScatter {
        sample_correlation: correlation(&a, &b),
        pairs,
    })
}

/// Extreme eigenvalues entering the surrogate-gap bounds; independent of x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapBoundCalculator {
    pub rho0: f64,
    pub n: usize,
    pub m: f64,
    pub lambda_max_r: f64,
    pub lambda_min_r: f64,
    /// Largest |λ(W)|².
    pub spectral_radius_w_sq: f64,
}

impl GapBoundCalculator {
    pub fn new(net: &Network, rho0: f64) -> Result<Self> {
        if !(rho0 > 0.0 && rho0 < 1.0) {
            return Err(Error::invalid(format!("ρ0 must lie in (0, 1), got {rho0}")));
        }
        let n = net.n();
        let r = kernel_dense(net, rho0);
        let lambda_max_r = dominant_eigenvalue(n, "λmax(D − ρ0W)", |v| &r * v)?;
        let factor = factor_precision(net, rho0)?;
        let inv_max = dominant_eigenvalue(n, "λmin(D − ρ0W)", |v| factor.solve(v))?;
        let spectral_radius_w_sq = dominant_eigenvalue(n, "ρ(W)", |v| {
            let m = DMatrix::from_column_slice(n, 1, v.as_slice());
            let w2 = adjacency_mul_mat(net, &adjacency_mul_mat(net, &m));
            w2.column(0).into_owned()
        })?;
        Ok(GapBoundCalculator {
            rho0,
            n,
            m: net.total_degree() as f64,
            lambda_max_r,
            lambda_min_r: 1.0 / inv_max,
            spectral_radius_w_sq,
        })
    }

    fn scale(&self, var_rho: f64) -> f64 {
        self.spectral_radius_w_sq * var_rho / (self.lambda_min_r * self.lambda_min_r)
    }

    /// min{n·λmax(R0), (1+ρ0)m}·|λ(W)|²max·var(ρ)/λmin(R0)².
    pub fn bound_a(&self, var_rho: f64) -> f64 {
        let lead = (self.n as f64 * self.lambda_max_r).min((1.0 + self.rho0) * self.m);
        lead * self.scale(var_rho)
    }

    /// (m + z√m)·|λ(W)|²max·var(ρ)/λmin(R0)² with z the upper α-quantile.
    pub fn bound_b(&self, var_rho: f64, alpha: f64) -> Result<f64> {
        let z = normal_quantile(1.0 - alpha)?;
        Ok((self.m + z * self.m.sqrt()) * self.scale(var_rho))
    }
}

/// Gap between the plug-in criterion and its prior average, with bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapDiagnostics {
    pub t_rho0: f64,
    /// T(x, ρ0) − mean over samples of T(x, ρ).
    pub gap_estimate: f64,
    pub second_derivative_term: f64,
    pub var_rho: f64,
    pub bound_a: f64,
    pub bound_b: f64,
    pub alpha: f64,
}

/// Variance of the prior samples about ρ0.
pub fn prior_spread(rho0: f64, samples: &[f64]) -> f64 {
    samples.iter().map(|r| (r - rho0) * (r - rho0)).sum::<f64>() / samples.len() as f64
}

/// Gap diagnostics for one design given precomputed eigenvalue bounds and
/// criteria at each prior sample.
pub fn gap_diagnostics_with(
    bounds: &GapBoundCalculator,
    at_rho0: &Criterion<'_>,
    at_samples: &[Criterion<'_>],
    x: &Design,
    alpha: f64,
) -> Result<GapDiagnostics> {
    if at_samples.is_empty() {
        return Err(Error::invalid("no prior samples"));
    }
    let samples: Vec<f64> = at_samples.iter().map(|c| c.rho()).collect();
    let var_rho = prior_spread(bounds.rho0, &samples);
    let t_rho0 = at_rho0.t(x)?;
    let mut mean_t = 0.0;
    for c in at_samples {
        mean_t += c.t(x)?;
    }
    mean_t /= at_samples.len() as f64;
    let s = at_rho0.residual(x)?;
    let net = at_rho0.network();
    let ws = DVector::from_vec(net.adjacency_mul(s.as_slice()));
    let v = at_rho0.covariates().matrix().tr_mul(&ws);
    let quad = v.dot(&at_rho0.form().solve(&v)).max(0.0);
    Ok(GapDiagnostics {
        t_rho0,
        gap_estimate: t_rho0 - mean_t,
        second_derivative_term: quad * var_rho,
        var_rho,
        bound_a: bounds.bound_a(var_rho),
        bound_b: bounds.bound_b(var_rho, alpha)?,
        alpha,
    })
}

/// Gap estimate, second-derivative term and both upper bounds for design x
/// at plug-in ρ0 under the given prior draws.
pub fn surrogate_gap_diagnostics(
    net: &Network,
    f: &CovariateMatrix,
    x: &Design,
    rho0: f64,
    prior_samples: &[f64],
    alpha: f64,
) -> Result<GapDiagnostics> {
    if let Some(r) = prior_samples.iter().find(|r| !(**r >= 0.0 && **r < 1.0)) {
        return Err(Error::invalid(format!("prior sample {r} outside [0, 1)")));
    }
    let bounds = GapBoundCalculator::new(net, rho0)?;
    let at_rho0 = Criterion::new(net, f, rho0)?;
    let at_samples = prior_samples
        .iter()
        .map(|&r| Criterion::new(net, f, r))
        .collect::<Result<Vec<_>>>()?;
    gap_diagnostics_with(&bounds, &at_rho0, &at_samples, x, alpha)
}

/// Second differences of ρ ↦ T(x, ρ) over consecutive grid triples, scaled to
/// the uniform-step form T(ρ−h) − 2T(ρ) + T(ρ+h).
pub fn concavity_probe(
    net: &Network,
    f: &CovariateMatrix,
    x: &Design,
    rho_grid: &[f64],
) -> Result<Vec<f64>> {
    if rho_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("correlation grid must be strictly increasing"));
    }
    let values = rho_grid
        .iter()
        .map(|&r| Criterion::new(net, f, r)?.t(x))
        .collect::<Result<Vec<_>>>()?;
    Ok((1..values.len().saturating_sub(1))
        .map(|k| {
            let h1 = rho_grid[k] - rho_grid[k - 1];
            let h2 = rho_grid[k + 1] - rho_grid[k];
            2.0 * (h2 * values[k - 1] - (h1 + h2) * values[k] + h1 * values[k + 1]) / (h1 + h2)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_bernoulli_network, generate_pm1_covariates};
    use crate::rng::seeded_rng;
    use proptest::prelude::*;

    fn path(n: usize) -> Network {
        Network::from_edges(n, (0..n - 1).map(|i| (i, i + 1))).unwrap()
    }

    fn all_designs(n: usize) -> impl Iterator<Item = Design> {
        (0..1u32 << n).map(move |bits| {
            Design::new((0..n).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect())
                .unwrap()
        })
    }

    // Dense K from an explicit inverse, independent of the Cholesky route.
    fn k_oracle(net: &Network, f: &CovariateMatrix, rho: f64) -> DMatrix<f64> {
        let r = kernel_dense(net, rho);
        let fm = f.matrix();
        let a_inv = (fm.transpose() * &r * fm).try_inverse().unwrap();
        &r - &r * fm * a_inv * fm.transpose() * &r
    }

    fn xkx(k: &DMatrix<f64>, x: &Design) -> f64 {
        let v = x.to_dvector();
        v.dot(&(k * &v))
    }

    #[test]
    fn k_matrix_matches_dense_formula() {
        let net = path(6);
        let f = CovariateMatrix::from_covariates(&DMatrix::from_column_slice(
            6,
            1,
            &[1.0, -1.0, -1.0, 1.0, 1.0, -1.0],
        ))
        .unwrap();
        let k = k_matrix(&net, &f, 0.5).unwrap();
        assert!((&k - k_oracle(&net, &f, 0.5)).amax() < 1e-10);
        assert!((&k - k.transpose()).amax() < 1e-10);
        let col = f.matrix().column(1).into_owned();
        assert!(col.dot(&(&k * &col)).abs() < 1e-10);
    }

    #[test]
    fn constant_design_has_zero_precision() {
        let net = generate_bernoulli_network(12, 0.3, &mut seeded_rng(1)).unwrap();
        let f = generate_pm1_covariates(12, 2, &mut seeded_rng(2)).unwrap();
        let b = evaluate(&net, &f, &Design::ones(12), 0.4).unwrap();
        assert!(b.t.abs() < 1e-9);
        assert!(matches!(
            pip(&net, &f, &Design::ones(12), 0.4),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn evaluate_matches_k_oracle() {
        let net = generate_bernoulli_network(10, 0.4, &mut seeded_rng(3)).unwrap();
        let f = generate_pm1_covariates(10, 2, &mut seeded_rng(4)).unwrap();
        let k = k_oracle(&net, &f, 0.3);
        for x in all_designs(10).step_by(37) {
            let b = evaluate(&net, &f, &x, 0.3).unwrap();
            assert!((b.t - xkx(&k, &x)).abs() < 1e-9);
            assert!((b.t - (b.m - b.t1 - b.t2)).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_covariance_constants() {
        assert_eq!(expected_precision_matrix(4).offdiag, -1.0 / 3.0);
        assert_eq!(expected_precision_matrix(5).offdiag, -1.0 / 5.0);
        let c = expected_precision_matrix(7);
        assert_eq!(c.trace_product(7.0, 7.0), 7.0);
    }

    #[test]
    fn expected_precision_is_balanced_average() {
        let net = generate_bernoulli_network(6, 0.5, &mut seeded_rng(5)).unwrap();
        let f = generate_pm1_covariates(6, 1, &mut seeded_rng(6)).unwrap();
        let k = k_oracle(&net, &f, 0.6);
        let balanced: Vec<Design> = all_designs(6).filter(|x| x.is_balanced()).collect();
        assert_eq!(balanced.len(), 20);
        let avg = balanced.iter().map(|x| xkx(&k, x)).sum::<f64>() / 20.0;
        let crit = Criterion::new(&net, &f, 0.6).unwrap();
        assert!((crit.expected_precision() - avg).abs() < 1e-9 * avg.abs());
        let best = balanced.iter().map(|x| xkx(&k, x)).fold(f64::MIN, f64::max);
        let x_best = balanced.iter().find(|x| xkx(&k, x) == best).unwrap();
        assert!((crit.pip(x_best).unwrap() - (1.0 - avg / best)).abs() < 1e-9);
    }

    #[test]
    fn expected_terms_match_enumeration() {
        let net = generate_bernoulli_network(7, 0.5, &mut seeded_rng(7)).unwrap();
        let f = generate_pm1_covariates(7, 2, &mut seeded_rng(8)).unwrap();
        let crit = Criterion::new(&net, &f, 0.4).unwrap();
        let balanced: Vec<Design> = all_designs(7).filter(|x| x.is_balanced()).collect();
        let k = balanced.len() as f64;
        let t1: f64 = balanced.iter().map(|x| crit.t1(x).unwrap()).sum::<f64>() / k;
        let t2: f64 = balanced.iter().map(|x| crit.t2(x).unwrap()).sum::<f64>() / k;
        assert!((crit.expected_t1() - t1).abs() < 1e-10);
        assert!((crit.expected_t2() - t2).abs() < 1e-9);
    }

    #[test]
    fn correlation_extremes_and_errors() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 2.0, 1.0, 5.0, -1.0, 2.0, -1.0, 0.0]);
        assert!((quadform_correlation(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let mut b = -a.clone();
        b.fill_diagonal(3.0);
        assert!((quadform_correlation(&a, &b).unwrap() + 1.0).abs() < 1e-15);
        let diag = DMatrix::from_diagonal_element(3, 3, 1.0);
        assert!(quadform_correlation(&a, &diag).is_err());
    }

    #[test]
    fn scatter_at_equal_correlation_is_perfect() {
        let net = generate_bernoulli_network(20, 0.2, &mut seeded_rng(9)).unwrap();
        let f = generate_pm1_covariates(20, 2, &mut seeded_rng(10)).unwrap();
        let s = robustness_scatter(&net, &f, 0.5, 0.5, 50, &mut seeded_rng(11)).unwrap();
        assert!((s.sample_correlation - 1.0).abs() < 1e-12);
        let tiny = path(2);
        let f2 = CovariateMatrix::from_design_matrix(DMatrix::from_element(2, 1, 1.0)).unwrap();
        let s2 = robustness_scatter(&tiny, &f2, 0.2, 0.8, 4, &mut seeded_rng(0)).unwrap();
        assert_eq!(s2.pairs.len(), 4);
        assert!(robustness_scatter(&tiny, &f2, 0.2, 0.8, 5, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn gap_vanishes_for_point_prior() {
        let net = generate_bernoulli_network(15, 0.3, &mut seeded_rng(12)).unwrap();
        let f = generate_pm1_covariates(15, 1, &mut seeded_rng(13)).unwrap();
        let x = random_iid_design(15, &mut seeded_rng(14));
        let d = surrogate_gap_diagnostics(&net, &f, &x, 0.5, &[0.5; 8], 0.05).unwrap();
        assert!(d.gap_estimate.abs() < 1e-12 * d.t_rho0);
        assert_eq!(d.bound_a, 0.0);
        assert_eq!(d.bound_b, 0.0);
        assert_eq!(d.second_derivative_term, 0.0);
    }

    #[test]
    fn eigen_extremes_match_dense() {
        let net = generate_bernoulli_network(25, 0.2, &mut seeded_rng(15)).unwrap();
        let g = GapBoundCalculator::new(&net, 0.5).unwrap();
        let ev = kernel_dense(&net, 0.5).symmetric_eigenvalues();
        assert!((g.lambda_max_r / ev.max() - 1.0).abs() < 1e-6);
        assert!((g.lambda_min_r / ev.min() - 1.0).abs() < 1e-6);
        let wev = net.adjacency_dense().symmetric_eigenvalues();
        let rad = wev.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!((g.spectral_radius_w_sq / (rad * rad) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn concavity_of_constant_design_is_flat() {
        let net = generate_bernoulli_network(10, 0.3, &mut seeded_rng(16)).unwrap();
        let f = generate_pm1_covariates(10, 1, &mut seeded_rng(17)).unwrap();
        let grid: Vec<f64> = (1..20).map(|k| 0.3 + 0.01 * k as f64).collect();
        let d = concavity_probe(&net, &f, &Design::ones(10), &grid).unwrap();
        assert_eq!(d.len(), 17);
        assert!(d.iter().all(|v| v.abs() < 1e-9));
    }

    fn instance() -> impl Strategy<Value = (Network, CovariateMatrix, Design, f64)> {
        (4usize..30, 0.1f64..0.6, 1usize..3, any::<u64>(), 0.0f64..0.99).prop_map(
            |(n, density, p, seed, rho)| {
                let mut rng = seeded_rng(seed);
                let net = generate_bernoulli_network(n, density, &mut rng).unwrap();
                let f = generate_pm1_covariates(n, p.min(n - 2), &mut rng).unwrap();
                let x = random_iid_design(n, &mut rng);
                (net, f, x, rho)
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn decomposition_matches_quadratic_form((net, f, x, rho) in instance()) {
            let b = evaluate(&net, &f, &x, rho).unwrap();
            let k = k_matrix(&net, &f, rho).unwrap();
            prop_assert!((b.t - xkx(&k, &x)).abs() <= 1e-8 * b.m.max(1.0));
            prop_assert!(b.t >= -1e-9 * b.m && b.t2 >= 0.0);
        }

        #[test]
        fn criterion_is_sign_symmetric((net, f, x, rho) in instance()) {
            let a = evaluate(&net, &f, &x, rho).unwrap();
            let b = evaluate(&net, &f, &x.negated(), rho).unwrap();
            prop_assert!((a.t1 - b.t1).abs() < 1e-12);
            prop_assert!((a.t2 - b.t2).abs() <= 1e-9 * a.t2.max(1.0));
        }

        #[test]
        fn correlation_is_symmetric((net, f, _x, rho) in instance(), rho0 in 0.0f64..0.99) {
            let k0 = k_matrix(&net, &f, rho0).unwrap();
            let k1 = k_matrix(&net, &f, rho).unwrap();
            let ab = quadform_correlation(&k0, &k1).unwrap();
            let ba = quadform_correlation(&k1, &k0).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn prior_average_never_exceeds_plug_in(
            (net, f, x, _rho) in instance(),
            draws in prop::collection::vec(0.01f64..0.99, 2..20),
        ) {
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            let avg = draws.iter().map(|&r| evaluate(&net, &f, &x, r).unwrap().t).sum::<f64>()
                / draws.len() as f64;
            let plug = evaluate(&net, &f, &x, mean).unwrap().t;
            prop_assert!(avg <= plug + 1e-8);
        }
    }
}
