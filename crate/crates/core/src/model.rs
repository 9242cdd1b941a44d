//! The single-level Gaussian FPCA model: state, priors, joint log density,
//! and the closed-form full conditionals used by the Gibbs sweep.
//!
//! Conventions: Gamma(a, b) is shape/rate with mean a/b; inverse-Gamma(a, b)
//! is shape/scale. Eigenvalues are kept in nonincreasing order as a hard
//! state invariant, so each lambda update is an inverse-Gamma truncated to
//! the interval spanned by its neighbors.

use ndarray::{Array1, Array2};
use rand::Rng;
use thiserror::Error;

use crate::basis::{BasisSystem, Grid};
use crate::dist::{
    self, ln_gamma_pdf, ln_inv_gamma_pdf, ln_normal_pdf, sample_gamma, sample_normal,
    TruncatedDraw,
};
use crate::linalg;
use crate::stiefel;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dataset contains a non-finite value at row {row}, column {col}")]
    NonFiniteData { row: usize, col: usize },
    #[error("basis has no penalties; call build_penalty first")]
    MissingPenalties,
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("prior configuration invalid: {0}")]
    InvalidPrior(String),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Stiefel(#[from] stiefel::StiefelError),
}

/// Hyperparameters of every prior in the model.
///
/// Defaults mirror the reference implementation: h, h_mu ~ Gamma(1, 0.005);
/// lambda ~ inverse-Gamma(0.1, 0.001); sigma^2 ~ inverse-Gamma(1, 0.001);
/// penalty weight alpha = 0.1.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PriorConfig {
    pub a_sigma: f64,
    pub b_sigma: f64,
    pub a_lambda: f64,
    pub b_lambda: f64,
    pub a_psi: f64,
    pub b_psi: f64,
    pub a_mu: f64,
    pub b_mu: f64,
    pub alpha: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            a_sigma: 1.0,
            b_sigma: 0.001,
            a_lambda: 0.1,
            b_lambda: 0.001,
            a_psi: 1.0,
            b_psi: 0.005,
            a_mu: 1.0,
            b_mu: 0.005,
            alpha: 0.1,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let pairs = [
            ("a_sigma", self.a_sigma),
            ("b_sigma", self.b_sigma),
            ("a_lambda", self.a_lambda),
            ("b_lambda", self.b_lambda),
            ("a_psi", self.a_psi),
            ("b_psi", self.b_psi),
            ("a_mu", self.a_mu),
            ("b_mu", self.b_mu),
        ];
        for (name, v) in pairs {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::InvalidPrior(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ModelError::InvalidPrior(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Complete functional dataset: N curves on a shared grid.
#[derive(Debug, Clone)]
pub struct FunctionalDataset {
    y: Array2<f64>,
    grid: Grid,
    ids: Vec<String>,
}

impl FunctionalDataset {
    pub fn new(y: Array2<f64>, grid: Grid, ids: Vec<String>) -> Result<Self, ModelError> {
        if y.ncols() != grid.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "data has {} columns but grid has {} points",
                y.ncols(),
                grid.len()
            )));
        }
        if ids.len() != y.nrows() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} ids for {} rows",
                ids.len(),
                y.nrows()
            )));
        }
        for ((row, col), v) in y.indexed_iter() {
            if !v.is_finite() {
                return Err(ModelError::NonFiniteData { row, col });
            }
        }
        Ok(FunctionalDataset { y, grid, ids })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// One MCMC state of the single-level model.
#[derive(Debug, Clone, PartialEq)]
pub struct FpcaState {
    /// Mean spline coefficients, length Q.
    pub w_mu: Array1<f64>,
    /// Latent Gaussian matrix, Q×K.
    pub x: Array2<f64>,
    /// Cached polar factor of `x`, Q×K.
    pub psi: Array2<f64>,
    /// Scores, N×K.
    pub xi: Array2<f64>,
    /// Eigenvalues in nonincreasing order, length K.
    pub lambda: Array1<f64>,
    /// Noise variance.
    pub sigma2: f64,
    /// Mean smoothing parameter.
    pub h_mu: f64,
    /// Eigenfunction smoothing parameters, length K.
    pub h: Array1<f64>,
}

impl FpcaState {
    pub fn q(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn n(&self) -> usize {
        self.xi.nrows()
    }

    /// Recompute the cached polar factor after changing `x`.
    pub fn refresh_psi(&mut self) -> Result<(), ModelError> {
        let (psi, _) = stiefel::polar_decompose(&self.x.view())?;
        self.psi = psi.into_matrix();
        Ok(())
    }

    /// Check every type invariant, including consistency of the cached
    /// polar factor.
    pub fn validate(&self) -> Result<(), ModelError> {
        let k = self.k();
        if self.psi.dim() != self.x.dim() {
            return Err(ModelError::InvalidState("psi/x shape mismatch".into()));
        }
        if self.lambda.len() != k || self.h.len() != k || self.xi.ncols() != k {
            return Err(ModelError::InvalidState("component count mismatch".into()));
        }
        for i in 0..k {
            if !(self.lambda[i] > 0.0) {
                return Err(ModelError::InvalidState(format!(
                    "lambda[{i}] must be positive"
                )));
            }
            if i + 1 < k && self.lambda[i] < self.lambda[i + 1] {
                return Err(ModelError::InvalidState(format!(
                    "lambda not nonincreasing at {i}"
                )));
            }
            if !(self.h[i] > 0.0) {
                return Err(ModelError::InvalidState(format!("h[{i}] must be positive")));
            }
        }
        if !(self.sigma2 > 0.0) {
            return Err(ModelError::InvalidState("sigma2 must be positive".into()));
        }
        if !(self.h_mu > 0.0) {
            return Err(ModelError::InvalidState("h_mu must be positive".into()));
        }
        if k > 0 {
            let (psi, _) = stiefel::polar_decompose(&self.x.view())?;
            let diff = linalg::max_abs_diff(&psi.matrix().view(), &self.psi.view());
            if diff > 1e-10 {
                return Err(ModelError::InvalidState(format!(
                    "cached psi deviates from polar factor by {diff:.3e}"
                )));
            }
        }
        let any_bad = self.w_mu.iter().any(|v| !v.is_finite())
            || self.x.iter().any(|v| !v.is_finite())
            || self.xi.iter().any(|v| !v.is_finite());
        if any_bad {
            return Err(ModelError::InvalidState("non-finite entries".into()));
        }
        Ok(())
    }
}

fn check_shapes(
    state: &FpcaState,
    data: &FunctionalDataset,
    basis: &BasisSystem,
) -> Result<(), ModelError> {
    if basis.m() != data.m() {
        return Err(ModelError::DimensionMismatch(format!(
            "basis rows {} vs data columns {}",
            basis.m(),
            data.m()
        )));
    }
    if state.q() != basis.q() {
        return Err(ModelError::DimensionMismatch(format!(
            "state Q {} vs basis Q {}",
            state.q(),
            basis.q()
        )));
    }
    if state.n() != data.n() {
        return Err(ModelError::DimensionMismatch(format!(
            "state N {} vs data N {}",
            state.n(),
            data.n()
        )));
    }
    if state.w_mu.len() != basis.q() {
        return Err(ModelError::DimensionMismatch(format!(
            "w_mu length {} vs Q {}",
            state.w_mu.len(),
            basis.q()
        )));
    }
    Ok(())
}

/// Residual matrix Y - 1 mu^t - Xi (B Psi)^t, i.e. the Q_im of the noise
/// conditional.
pub fn residual_matrix(
    state: &FpcaState,
    data: &FunctionalDataset,
    basis: &BasisSystem,
) -> Array2<f64> {
    let mu = basis.b.dot(&state.w_mu);
    let phi = basis.b.dot(&state.psi);
    let fitted = state.xi.dot(&phi.t());
    let mut resid = data.y() - &fitted;
    for mut row in resid.rows_mut() {
        row -= &mu;
    }
    resid
}

/// Log of the joint posterior (Eq. 2 form) up to an additive constant, with
/// the Stiefel indicator replaced by the iid standard normal density of the
/// latent matrix entries.
pub fn log_posterior(
    state: &FpcaState,
    data: &FunctionalDataset,
    basis: &BasisSystem,
    prior: &PriorConfig,
) -> Result<f64, ModelError> {
    check_shapes(state, data, basis)?;
    let pen = basis.penalties().ok_or(ModelError::MissingPenalties)?;
    let (n, m) = (data.n() as f64, data.m() as f64);
    let k = state.k();

    let resid = residual_matrix(state, data, basis);
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let mut lp = -0.5 * n * m * (2.0 * std::f64::consts::PI * state.sigma2).ln()
        - rss / (2.0 * state.sigma2);

    lp += ln_inv_gamma_pdf(state.sigma2, prior.a_sigma, prior.b_sigma);

    for j in 0..k {
        let lam = state.lambda[j];
        let ss: f64 = state.xi.column(j).iter().map(|x| x * x).sum();
        lp += -0.5 * state.n() as f64 * (2.0 * std::f64::consts::PI * lam).ln()
            - ss / (2.0 * lam);
        lp += ln_inv_gamma_pdf(lam, prior.a_lambda, prior.b_lambda);

        let psi_k = state.psi.column(j);
        let quad = psi_k.dot(&pen.palpha.dot(&psi_k));
        lp += -state.h[j] * quad / (2.0 * state.sigma2);
        lp += ln_gamma_pdf(state.h[j], prior.a_psi, prior.b_psi);
    }

    let wquad = state.w_mu.dot(&pen.palpha.dot(&state.w_mu));
    lp += -state.h_mu * wquad / (2.0 * state.sigma2);
    lp += ln_gamma_pdf(state.h_mu, prior.a_mu, prior.b_mu);

    // Latent representation of the uniform Stiefel prior.
    let xss: f64 = state.x.iter().map(|x| x * x).sum();
    lp += -0.5 * (state.q() * k) as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * xss;

    Ok(lp)
}

/// Full conditional of the scores: independent normals over (i, k).
#[derive(Debug, Clone)]
pub struct ScoresConditional {
    /// N×K posterior means.
    pub mean: Array2<f64>,
    /// Per-component posterior variances, length K.
    pub var: Array1<f64>,
}

impl ScoresConditional {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Array2<f64> {
        let (n, k) = self.mean.dim();
        let mut out = Array2::zeros((n, k));
        for i in 0..n {
            for j in 0..k {
                out[[i, j]] = sample_normal(rng, self.mean[[i, j]], self.var[j]);
            }
        }
        out
    }

    /// Log density at a given score matrix.
    pub fn ln_pdf(&self, xi: &Array2<f64>) -> f64 {
        let (n, k) = self.mean.dim();
        let mut lp = 0.0;
        for i in 0..n {
            for j in 0..k {
                lp += ln_normal_pdf(xi[[i, j]], self.mean[[i, j]], self.var[j]);
            }
        }
        lp
    }
}

/// Result 1: xi_ik | rest ~ N(lambda_k (Y_i - B w_mu)^t B psi_k / (lambda_k
/// + sigma^2), lambda_k sigma^2 / (lambda_k + sigma^2)).
pub fn conditional_scores(
    state: &FpcaState,
    data: &FunctionalDataset,
    basis: &BasisSystem,
) -> Result<ScoresConditional, ModelError> {
    check_shapes(state, data, basis)?;
    let mu = basis.b.dot(&state.w_mu);
    let phi = basis.b.dot(&state.psi);
    let mut centered = data.y().to_owned();
    for mut row in centered.rows_mut() {
        row -= &mu;
    }
    let proj = centered.dot(&phi); // N×K
    let k = state.k();
    let mut mean = proj;
    let mut var = Array1::zeros(k);
    for j in 0..k {
        let lam = state.lambda[j];
        let shrink = lam / (lam + state.sigma2);
        for i in 0..state.n() {
            mean[[i, j]] *= shrink;
        }
        var[j] = lam * state.sigma2 / (lam + state.sigma2);
    }
    Ok(ScoresConditional { mean, var })
}

/// Full conditional of the mean coefficients: a Q-variate normal.
#[derive(Debug, Clone)]
pub struct WMuConditional {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
}

impl WMuConditional {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Array1<f64>, ModelError> {
        let l = linalg::cholesky(&self.covariance.view())?;
        let q = self.mean.len();
        let z = Array1::from_shape_fn(q, |_| sample_normal(rng, 0.0, 1.0));
        Ok(&self.mean + &l.dot(&z))
    }

    pub fn ln_pdf(&self, w: &Array1<f64>) -> Result<f64, ModelError> {
        let q = self.mean.len() as f64;
        let l = linalg::cholesky(&self.covariance.view())?;
        let logdet: f64 = l.diag().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let d = w - &self.mean;
        let y = linalg::solve_lower(&l.view(), &d)?;
        let quad: f64 = y.dot(&y);
        Ok(-0.5 * (q * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
    }
}

/// Supplement form: w_mu | rest ~ MVN((N I + h_mu P)^{-1} sum_i [B^t Y_i -
/// sum_k xi_ik psi_k], sigma^2 (N I + h_mu P)^{-1}).
pub fn conditional_w_mu(
    state: &FpcaState,
    data: &FunctionalDataset,
    basis: &BasisSystem,
    prior: &PriorConfig,
) -> Result<WMuConditional, ModelError> {
    check_shapes(state, data, basis)?;
    prior.validate()?;
    let pen = basis.penalties().ok_or(ModelError::MissingPenalties)?;
    let q = basis.q();
    let n = data.n() as f64;

    let mut precision = pen.palpha.clone() * state.h_mu;
    for i in 0..q {
        precision[[i, i]] += n;
    }
    // rhs = sum_i B^t Y_i - sum_i sum_k xi_ik psi_k
    let col_sums = data.y().t().dot(&Array1::ones(data.n())); // length M
    let mut rhs = basis.b.t().dot(&col_sums);
    let xi_sums = state.xi.t().dot(&Array1::ones(state.n())); // length K
    rhs -= &state.psi.dot(&xi_sums);

    let mean = linalg::solve_spd(&precision.view(), &rhs)?;
    let covariance = linalg::inverse_spd(&precision.view())? * state.sigma2;
    Ok(WMuConditional { mean, covariance })
}

/// Truncated inverse-Gamma full conditional for one eigenvalue.
#[derive(Debug, Clone)]
pub struct LambdaConditional {
    pub shape: f64,
    pub scale: f64,
    /// Ordering interval: lambda must stay in [lower, upper].
    pub lower: f64,
    pub upper: f64,
}

/// Outcome of sampling a lambda block.
#[derive(Debug, Clone, Copy)]
pub struct LambdaDraw {
    pub value: f64,
    pub stalled: bool,
}

impl LambdaConditional {
    pub fn sample<R: Rng>(&self, rng: &mut R, current: f64) -> LambdaDraw {
        match dist::sample_truncated_inv_gamma(
            rng, self.shape, self.scale, self.lower, self.upper, current,
        ) {
            TruncatedDraw::Sampled(v) => LambdaDraw {
                value: v,
                stalled: false,
            },
            TruncatedDraw::Stalled => LambdaDraw {
                value: current,
                stalled: true,
            },
        }
    }

    /// Log density (untruncated kernel) at x; the truncation constant
    /// depends only on the interval, which is fixed given the neighbors.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        ln_inv_gamma_pdf(x, self.shape, self.scale)
    }
}

/// Supplement form: lambda_k | rest ~ IG(N/2 + a_lambda, (1/2) sum_i
/// xi_ik^2 + b_lambda), truncated to the order-preserving interval
/// [lambda_{k+1}, lambda_{k-1}] (0-indexed neighbors; +inf / 0 at the ends).
pub fn conditional_lambda(
    state: &FpcaState,
    prior: &PriorConfig,
    k: usize,
) -> Result<LambdaConditional, ModelError> {
    if k >= state.k() {
        return Err(ModelError::DimensionMismatch(format!(
            "component index {k} out of range for K = {}",
            state.k()
        )));
    }
    let n = state.n() as f64;
    let ss: f64 = state.xi.column(k).iter().map(|x| x * x).sum();
    let upper = if k == 0 {
        f64::INFINITY
    } else {
        state.lambda[k - 1]
    };
    let lower = if k + 1 == state.k() {
        0.0
    } else {
        state.lambda[k + 1]
    };
    Ok(LambdaConditional {
        shape: 0.5 * n + prior.a_lambda,
        scale: 0.5 * ss + prior.b_lambda,
        lower,
        upper,
    })
}

/// Which smoothing parameter a conditional refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothingTarget {
    Mu,
    Component(usize),
}

/// Gamma full conditional (shape/rate) for a smoothing parameter.
#[derive(Debug, Clone, Copy)]
pub struct GammaConditional {
    pub shape: f64,
    pub rate: f64,
}

impl GammaConditional {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        sample_gamma(rng, self.shape, self.rate)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        ln_gamma_pdf(x, self.shape, self.rate)
    }
}

/// Supplement form: h_mu | rest ~ Gamma(a_mu, w^t P w / (2 sigma^2) + b_mu)
/// and h_k | rest ~ Gamma(a_psi, psi_k^t P psi_k / (2 sigma^2) + b_psi).
pub fn conditional_h(
    state: &FpcaState,
    basis: &BasisSystem,
    prior: &PriorConfig,
    which: SmoothingTarget,
) -> Result<GammaConditional, ModelError> {
    let pen = basis.penalties().ok_or(ModelError::MissingPenalties)?;
    match which {
        SmoothingTarget::Mu => {
            let quad = state.w_mu.dot(&pen.palpha.dot(&state.w_mu));
            Ok(GammaConditional {
                shape: prior.a_mu,
                rate: quad / (2.0 * state.sigma2) + prior.b_mu,
            })
        }
        SmoothingTarget::Component(k) => {
            if k >= state.k() {
                return Err(ModelError::DimensionMismatch(format!(
                    "component index {k} out of range for K = {}",
                    state.k()
                )));
            }
            let psi_k = state.psi.column(k);
            let quad = psi_k.dot(&pen.palpha.dot(&psi_k));
            Ok(GammaConditional {
                shape: prior.a_psi,
                rate: quad / (2.0 * state.sigma2) + prior.b_psi,
            })
        }
    }
}

/// Inverse-Gamma full conditional (shape/scale) for the noise variance.
#[derive(Debug, Clone, Copy)]
pub struct InvGammaConditional {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaConditional {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        dist::sample_inv_gamma(rng, self.shape, self.scale)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        ln_inv_gamma_pdf(x, self.shape, self.scale)
    }
}

/// Supplement form: sigma^2 | rest ~ IG(NM/2 + a_sigma, (1/2)[sum Q_im^2 +
/// h_mu w^t P w + sum_k h_k psi_k^t P psi_k + 2 b_sigma]).
pub fn conditional_sigma2(
    state: &FpcaState,
    data: &FunctionalDataset,
    basis: &BasisSystem,
    prior: &PriorConfig,
) -> Result<InvGammaConditional, ModelError> {
    check_shapes(state, data, basis)?;
    let pen = basis.penalties().ok_or(ModelError::MissingPenalties)?;
    let resid = residual_matrix(state, data, basis);
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let wquad = state.w_mu.dot(&pen.palpha.dot(&state.w_mu));
    let mut pquad = 0.0;
    for j in 0..state.k() {
        let psi_k = state.psi.column(j);
        pquad += state.h[j] * psi_k.dot(&pen.palpha.dot(&psi_k));
    }
    let nm = (data.n() * data.m()) as f64;
    Ok(InvGammaConditional {
        shape: 0.5 * nm + prior.a_sigma,
        scale: 0.5 * (rss + state.h_mu * wquad + pquad + 2.0 * prior.b_sigma),
    })
}
