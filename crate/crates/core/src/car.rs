//! Conditional-autoregressive (CAR) outcome model.
//!
//! Residuals follow δ ~ MVN(0, σ² R⁻¹) with precision kernel R = D − ρW
//! (homogeneous) or R = D − PWP, P = diag(√ρ_i) (heterogeneous). R is
//! positive definite whenever every ρ_i < 1 and no node is isolated.
//!
//! At ρ = 0 the kernel is R = D, so residual variances are σ²/m_i rather
//! than a constant σ². This module follows the kernel literally.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::design::Design;
use crate::error::{Error, Result};
use crate::graph::{CovariateMatrix, Network};
use crate::linalg::{adjacency_mul_mat, hetero_kernel_dense, kernel_dense, kernel_mul_mat};

/// Upper end of the profile-likelihood search interval for ρ.
pub const RHO_MAX: f64 = 0.99;
const RHO_GRID_STEP: f64 = 0.01;
const GOLDEN_TOL: f64 = 1e-5;

/// Homogeneous CAR parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarParams {
    rho: f64,
    sigma2: f64,
}

impl CarParams {
    pub fn new(rho: f64, sigma2: f64) -> Result<Self> {
        check_rho(rho)?;
        check_sigma2(sigma2)?;
        Ok(CarParams { rho, sigma2 })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
}

/// Per-node correlations ρ_1..ρ_n.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroCarParams {
    rhos: Vec<f64>,
    sigma2: f64,
}

impl HeteroCarParams {
    pub fn new(rhos: Vec<f64>, sigma2: f64) -> Result<Self> {
        for &r in &rhos {
            check_rho(r)?;
        }
        check_sigma2(sigma2)?;
        Ok(HeteroCarParams { rhos, sigma2 })
    }

    pub fn rhos(&self) -> &[f64] {
        &self.rhos
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::invalid(format!("correlation must lie in [0, 1), got {rho}")))
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("variance must be positive, got {sigma2}")))
    }
}

/// Noise model for outcome simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    Homogeneous(CarParams),
    Heterogeneous(HeteroCarParams),
}

impl NoiseModel {
    pub fn sigma2(&self) -> f64 {
        match self {
            NoiseModel::Homogeneous(p) => p.sigma2(),
            NoiseModel::Heterogeneous(p) => p.sigma2(),
        }
    }
}

/// Cholesky factorization R = LLᵀ of a CAR precision kernel.
#[derive(Debug, Clone)]
pub struct PrecisionFactor {
    chol: Cholesky<f64, Dyn>,
    l: DMatrix<f64>,
}

impl PrecisionFactor {
    /// Factor an explicit symmetric matrix.
    pub fn from_matrix(r: DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(r).ok_or_else(|| {
            Error::NotPositiveDefinite(
                "non-positive pivot in the CAR kernel (invalid ρ or isolated node)".into(),
            )
        })?;
        let l = chol.l();
        Ok(PrecisionFactor { chol, l })
    }

    /// Factor R(ρ) = D − ρW.
    pub fn homogeneous(net: &Network, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        Self::from_matrix(kernel_dense(net, rho))
    }

    /// Factor D − PWP.
    pub fn heterogeneous(net: &Network, rhos: &[f64]) -> Result<Self> {
        if rhos.len() != net.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} correlations for {} nodes",
                rhos.len(),
                net.n()
            )));
        }
        for &r in rhos {
            check_rho(r)?;
        }
        Self::from_matrix(hetero_kernel_dense(net, rhos))
    }

    pub fn n(&self) -> usize {
        self.l.nrows()
    }

    /// R⁻¹b.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// log |R|.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// One draw of δ ~ MVN(0, σ² R⁻¹): δ = σ L⁻ᵀ z with z standard normal.
    pub fn sample_noise<R: Rng + ?Sized>(&self, sigma2: f64, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.n(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut delta = self
            .l
            .tr_solve_lower_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        delta *= sigma2.sqrt();
        delta
    }
}

/// Factor the homogeneous precision kernel D − ρW.
pub fn factor_precision(net: &Network, rho: f64) -> Result<PrecisionFactor> {
    PrecisionFactor::homogeneous(net, rho)
}

/// Reusable outcome generator: y = xθ + Fβ + δ.
#[derive(Debug, Clone)]
pub struct OutcomeSampler {
    factor: PrecisionFactor,
    sigma2: f64,
}

impl OutcomeSampler {
    pub fn new(net: &Network, model: &NoiseModel) -> Result<Self> {
        let factor = match model {
            NoiseModel::Homogeneous(p) => PrecisionFactor::homogeneous(net, p.rho())?,
            NoiseModel::Heterogeneous(p) => PrecisionFactor::heterogeneous(net, p.rhos())?,
        };
        Ok(OutcomeSampler {
            factor,
            sigma2: model.sigma2(),
        })
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.factor.sample_noise(self.sigma2, rng)
    }
}

/// Mean outcome xθ + Fβ.
pub fn mean_outcome(
    f: &CovariateMatrix,
    x: &Design,
    theta: f64,
    beta: &[f64],
) -> Result<DVector<f64>> {
    if x.len() != f.n() || beta.len() != f.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "design length {}, F is {}x{}, beta length {}",
            x.len(),
            f.n(),
            f.ncols(),
            beta.len()
        )));
    }
    let beta = DVector::from_column_slice(beta);
    Ok(x.to_dvector() * theta + f.matrix() * beta)
}

/// Draw y = xθ + Fβ + δ under `model`.
pub fn sample_outcomes<R: Rng + ?Sized>(
    net: &Network,
    f: &CovariateMatrix,
    x: &Design,
    theta: f64,
    beta: &[f64],
    model: &NoiseModel,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if net.n() != f.n() {
        return Err(Error::DimensionMismatch(format!(
            "network has {} nodes, F has {} rows",
            net.n(),
            f.n()
        )));
    }
    let mu = mean_outcome(f, x, theta, beta)?;
    let sampler = OutcomeSampler::new(net, model)?;
    Ok(mu + sampler.sample_noise(rng))
}

/// Estimates from a CAR regression of y on X = [x F].
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta_hat: f64,
    pub beta_hat: Vec<f64>,
    /// Correlation used (fixed) or estimated.
    pub rho_hat: f64,
    /// ML estimate RSS_R / n.
    pub sigma2_hat: f64,
    /// Gaussian log-likelihood at the estimates.
    pub loglik: f64,
    /// σ̂²·[(XᵀRX)⁻¹]₀₀.
    pub theta_variance: f64,
}

fn design_matrix(f: &CovariateMatrix, x: &Design) -> Result<DMatrix<f64>> {
    if x.len() != f.n() {
        return Err(Error::DimensionMismatch(format!(
            "design length {} vs {} covariate rows",
            x.len(),
            f.n()
        )));
    }
    let k = f.ncols() + 1;
    let mut xm = DMatrix::zeros(f.n(), k);
    xm.set_column(0, &x.to_dvector());
    xm.columns_mut(1, f.ncols()).copy_from(f.matrix());
    Ok(xm)
}

/// Generalized least squares solution of the normal equations
/// G γ = h with G = XᵀRX, h = XᵀRy, and yᵀRy given.
struct GlsSolution {
    gamma: DVector<f64>,
    rss: f64,
    inv00: f64,
}

fn solve_normal_equations(g: &DMatrix<f64>, h: &DVector<f64>, yry: f64) -> Result<GlsSolution> {
    // Schur complement of the treatment column against the covariate block.
    let k = g.nrows();
    let a = g.view((1, 1), (k - 1, k - 1)).into_owned();
    let b = g.view((1, 0), (k - 1, 1)).into_owned();
    let chol_a = Cholesky::new(a)
        .ok_or_else(|| Error::RankDeficient("covariate block FᵀRF is singular".into()))?;
    let schur = g[(0, 0)] - b.dot(&chol_a.solve(&b));
    if !(schur > 1e-10 * g[(0, 0)]) {
        return Err(Error::RankDeficient(
            "design vector lies in the column space of the covariates".into(),
        ));
    }
    let chol = Cholesky::new(g.clone())
        .ok_or_else(|| Error::RankDeficient("XᵀRX is not positive definite".into()))?;
    let gamma = chol.solve(h);
    let rss = (yry - h.dot(&gamma)).max(0.0);
    Ok(GlsSolution {
        gamma,
        rss,
        inv00: 1.0 / schur,
    })
}

fn gaussian_loglik(n: usize, logdet: f64, sigma2: f64) -> f64 {
    let nf = n as f64;
    0.5 * logdet - 0.5 * nf * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0)
}

/// GLS fit at a fixed correlation ρ.
pub fn fit_gls(
    net: &Network,
    f: &CovariateMatrix,
    x: &Design,
    y: &DVector<f64>,
    rho: f64,
) -> Result<FitResult> {
    check_rho(rho)?;
    if y.len() != net.n() || f.n() != net.n() {
        return Err(Error::DimensionMismatch("outcome, network and F sizes differ".into()));
    }
    let xm = design_matrix(f, x)?;
    let rx = kernel_mul_mat(net, rho, &xm);
    let ym = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
    let ry = kernel_mul_mat(net, rho, &ym).column(0).into_owned();
    let g = xm.transpose() * &rx;
    let h = xm.transpose() * &ry;
    let sol = solve_normal_equations(&g, &h, y.dot(&ry))?;
    let n = net.n();
    let sigma2 = sol.rss / n as f64;
    let logdet = factor_precision(net, rho)?.logdet();
    Ok(FitResult {
        theta_hat: sol.gamma[0],
        beta_hat: sol.gamma.iter().skip(1).copied().collect(),
        rho_hat: rho,
        sigma2_hat: sigma2,
        loglik: gaussian_loglik(n, logdet, sigma2),
        theta_variance: sigma2 * sol.inv00,
    })
}

/// Eigenvalues of the normalized adjacency D^{-1/2} W D^{-1/2}, which give
/// log|D − ρW| = Σ log m_i + Σ log(1 − ρλ_k) for every ρ at O(n) cost.
#[derive(Debug, Clone)]
pub struct CarSpectrum {
    log_degree_sum: f64,
    eigenvalues: Vec<f64>,
}

impl CarSpectrum {
    pub fn new(net: &Network) -> Result<Self> {
        if net.has_isolated() {
            return Err(Error::NotPositiveDefinite(
                "CAR kernel undefined for isolated nodes".into(),
            ));
        }
        let n = net.n();
        let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / (net.degree(i) as f64).sqrt()).collect();
        let mut s = DMatrix::zeros(n, n);
        for (i, j) in net.edges() {
            let v = inv_sqrt[i] * inv_sqrt[j];
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
        let eigenvalues = s.symmetric_eigenvalues().iter().copied().collect();
        let log_degree_sum = (0..n).map(|i| (net.degree(i) as f64).ln()).sum();
        Ok(CarSpectrum {
            log_degree_sum,
            eigenvalues,
        })
    }

    /// log |D − ρW|.
    pub fn logdet(&self, rho: f64) -> f64 {
        self.log_degree_sum + self.eigenvalues.iter().map(|l| (1.0 - rho * l).ln()).sum::<f64>()
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Profile likelihood for one (x, y) pair.
    pub fn profile<'a>(
        &'a self,
        net: &Network,
        f: &CovariateMatrix,
        x: &Design,
        y: &DVector<f64>,
    ) -> Result<ProfileLikelihood<'a>> {
        if y.len() != net.n() || f.n() != net.n() || self.n() != net.n() {
            return Err(Error::DimensionMismatch("outcome, network and F sizes differ".into()));
        }
        let xm = design_matrix(f, x)?;
        let dx = kernel_mul_mat(net, 0.0, &xm);
        let wx = adjacency_mul_mat(net, &xm);
        let deg = DVector::from_iterator(net.n(), (0..net.n()).map(|i| net.degree(i) as f64));
        let dy = y.component_mul(&deg);
        let wy = DVector::from_vec(net.adjacency_mul(y.as_slice()));
        Ok(ProfileLikelihood {
            spectrum: self,
            n: net.n(),
            g_deg: xm.transpose() * &dx,
            g_adj: xm.transpose() * &wx,
            h_deg: xm.transpose() * &dy,
            h_adj: xm.transpose() * &wy,
            y_deg: y.dot(&dy),
            y_adj: y.dot(&wy),
        })
    }

    /// Profile-ML fit of ρ with (θ, β, σ²) concentrated out.
    pub fn fit_profile_ml(
        &self,
        net: &Network,
        f: &CovariateMatrix,
        x: &Design,
        y: &DVector<f64>,
    ) -> Result<FitResult> {
        self.profile(net, f, x, y)?.maximize()
    }
}

/// Moments XᵀDX, XᵀWX, XᵀDy, XᵀWy, yᵀDy, yᵀWy; the GLS normal equations at any
/// ρ are linear combinations of these.
#[derive(Debug, Clone)]
pub struct ProfileLikelihood<'a> {
    spectrum: &'a CarSpectrum,
    n: usize,
    g_deg: DMatrix<f64>,
    g_adj: DMatrix<f64>,
    h_deg: DVector<f64>,
    h_adj: DVector<f64>,
    y_deg: f64,
    y_adj: f64,
}

impl ProfileLikelihood<'_> {
    /// GLS fit at a fixed ρ.
    pub fn fit_at(&self, rho: f64) -> Result<FitResult> {
        check_rho(rho)?;
        let g = &self.g_deg - &self.g_adj * rho;
        let h = &self.h_deg - &self.h_adj * rho;
        let sol = solve_normal_equations(&g, &h, self.y_deg - rho * self.y_adj)?;
        let sigma2 = sol.rss / self.n as f64;
        Ok(FitResult {
            theta_hat: sol.gamma[0],
            beta_hat: sol.gamma.iter().skip(1).copied().collect(),
            rho_hat: rho,
            sigma2_hat: sigma2,
            loglik: gaussian_loglik(self.n, self.spectrum.logdet(rho), sigma2),
            theta_variance: sigma2 * sol.inv00,
        })
    }

    /// Profile log-likelihood ℓ(ρ).
    pub fn loglik(&self, rho: f64) -> Result<f64> {
        Ok(self.fit_at(rho)?.loglik)
    }

    /// Grid scan over [0, ρ_max] with step 0.01, then golden-section
    /// refinement to 1e-5 around the best grid point.
    pub fn maximize(&self) -> Result<FitResult> {
        let steps = (RHO_MAX / RHO_GRID_STEP).round() as usize;
        let mut best = self.fit_at(0.0)?;
        let mut best_k = 0;
        for k in 1..=steps {
            let fit = self.fit_at(k as f64 * RHO_GRID_STEP)?;
            if fit.loglik > best.loglik {
                best = fit;
                best_k = k;
            }
        }
        let center = best_k as f64 * RHO_GRID_STEP;
        let mut lo = (center - RHO_GRID_STEP).max(0.0);
        let mut hi = (center + RHO_GRID_STEP).min(RHO_MAX);
        let ratio = (5f64.sqrt() - 1.0) / 2.0;
        let mut a = hi - ratio * (hi - lo);
        let mut b = lo + ratio * (hi - lo);
        let mut fa = self.loglik(a)?;
        let mut fb = self.loglik(b)?;
        while hi - lo > GOLDEN_TOL {
            if fa >= fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - ratio * (hi - lo);
                fa = self.loglik(a)?;
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + ratio * (hi - lo);
                fb = self.loglik(b)?;
            }
        }
        let refined = self.fit_at(0.5 * (lo + hi))?;
        Ok(if refined.loglik > best.loglik { refined } else { best })
    }
}

/// Profile-ML fit of ρ ∈ [0, ρ_max] for a single data set.
pub fn fit_profile_ml(
    net: &Network,
    f: &CovariateMatrix,
    x: &Design,
    y: &DVector<f64>,
) -> Result<FitResult> {
    CarSpectrum::new(net)?.fit_profile_ml(net, f, x, y)
}
