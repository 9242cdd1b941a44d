//! Multilevel FPCA: two nested Stiefel blocks, subject- and visit-level
//! scores and eigenvalue ladders, a shared noise variance, and optional
//! visit-specific mean deviations.
//!
//! Every conditional extends the single-level form by subtracting the other
//! level's fitted values from the residual; both latent matrices move by
//! independent adaptive Metropolis blocks.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::{BasisSystem, Grid};
use crate::diagnostics;
use crate::dist::{self, ln_gamma_pdf, ln_inv_gamma_pdf, TruncatedDraw};
use crate::linalg::{self, LinalgError};
use crate::model::{GammaConditional, ModelError, PriorConfig};
use crate::sampler::{
    monitor_indices, ChainDiagnostics, PosteriorSamples, ProposalTuner, SamplerConfig,
    SamplerError,
};
use crate::stiefel::{self, StiefelError};

/// Prior on the shared visit-deviation smoothing parameter, when visit
/// means are enabled.
const ETA_SMOOTH_SHAPE: f64 = 1.0;
const ETA_SMOOTH_RATE: f64 = 0.005;

#[derive(Debug, Error)]
pub enum MultilevelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("duplicate (subject, visit) key: ({0}, {1})")]
    DuplicateKey(String, String),
    #[error("dataset contains a non-finite value at row {row}, column {col}")]
    NonFiniteData { row: usize, col: usize },
    #[error("identifiability guard: K1 + K2 = {total} exceeds Q = {q}")]
    TooManyComponents { total: usize, q: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Stiefel(#[from] StiefelError),
}

/// Curves keyed by (subject, visit), complete on a shared grid.
#[derive(Debug, Clone)]
pub struct MultilevelDataset {
    y: Array2<f64>,
    keys: Vec<(String, String)>,
    grid: Grid,
    /// Row indices per subject, in first-appearance order.
    subject_rows: Vec<Vec<usize>>,
    subject_ids: Vec<String>,
    /// Distinct visit labels in first-appearance order; row -> visit index.
    visit_ids: Vec<String>,
    row_visit: Vec<usize>,
    /// Row -> subject index.
    row_subject: Vec<usize>,
}

impl MultilevelDataset {
    pub fn new(
        y: Array2<f64>,
        keys: Vec<(String, String)>,
        grid: Grid,
    ) -> Result<Self, MultilevelError> {
        if y.ncols() != grid.len() {
            return Err(MultilevelError::DimensionMismatch(format!(
                "data has {} columns but grid has {} points",
                y.ncols(),
                grid.len()
            )));
        }
        if keys.len() != y.nrows() {
            return Err(MultilevelError::DimensionMismatch(format!(
                "{} keys for {} rows",
                keys.len(),
                y.nrows()
            )));
        }
        for ((row, col), v) in y.indexed_iter() {
            if !v.is_finite() {
                return Err(MultilevelError::NonFiniteData { row, col });
            }
        }
        let mut subject_ids: Vec<String> = Vec::new();
        let mut subject_rows: Vec<Vec<usize>> = Vec::new();
        let mut visit_ids: Vec<String> = Vec::new();
        let mut row_subject = Vec::with_capacity(keys.len());
        let mut row_visit = Vec::with_capacity(keys.len());
        let mut seen = std::collections::BTreeSet::new();
        for (r, (subj, visit)) in keys.iter().enumerate() {
            if !seen.insert((subj.clone(), visit.clone())) {
                return Err(MultilevelError::DuplicateKey(subj.clone(), visit.clone()));
            }
            let si = match subject_ids.iter().position(|s| s == subj) {
                Some(i) => i,
                None => {
                    subject_ids.push(subj.clone());
                    subject_rows.push(Vec::new());
                    subject_ids.len() - 1
                }
            };
            subject_rows[si].push(r);
            row_subject.push(si);
            let vi = match visit_ids.iter().position(|v| v == visit) {
                Some(i) => i,
                None => {
                    visit_ids.push(visit.clone());
                    visit_ids.len() - 1
                }
            };
            row_visit.push(vi);
        }
        Ok(MultilevelDataset {
            y,
            keys,
            grid,
            subject_rows,
            subject_ids,
            visit_ids,
            row_visit,
            row_subject,
        })
    }

    /// Total number of rows (curves).
    pub fn rows(&self) -> usize {
        self.y.nrows()
    }

    pub fn m(&self) -> usize {
        self.y.ncols()
    }

    /// Number of subjects.
    pub fn n_subjects(&self) -> usize {
        self.subject_rows.len()
    }

    pub fn n_visits(&self) -> usize {
        self.visit_ids.len()
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn keys(&self) -> &[(String, String)] {
        &self.keys
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn subject_rows(&self, subject: usize) -> &[usize] {
        &self.subject_rows[subject]
    }

    pub fn row_subject(&self, row: usize) -> usize {
        self.row_subject[row]
    }

    pub fn row_visit(&self, row: usize) -> usize {
        self.row_visit[row]
    }

    /// True when at least one subject has two or more visits.
    pub fn has_replication(&self) -> bool {
        self.subject_rows.iter().any(|r| r.len() >= 2)
    }
}

/// One MCMC state of the multilevel model.
#[derive(Debug, Clone, PartialEq)]
pub struct MfpcaState {
    pub w_mu: Array1<f64>,
    /// Visit-deviation coefficients (distinct visits × Q), when enabled.
    pub eta: Option<Array2<f64>>,
    pub x1: Array2<f64>,
    pub psi1: Array2<f64>,
    pub x2: Array2<f64>,
    pub psi2: Array2<f64>,
    /// Subject scores, N×K1.
    pub xi: Array2<f64>,
    /// Visit scores, rows×K2 (row-aligned with the dataset).
    pub zeta: Array2<f64>,
    pub lambda1: Array1<f64>,
    pub lambda2: Array1<f64>,
    pub sigma2: f64,
    pub h_mu: f64,
    pub h1: Array1<f64>,
    pub h2: Array1<f64>,
    pub h_eta: Option<f64>,
}

impl MfpcaState {
    pub fn q(&self) -> usize {
        self.x1.nrows()
    }

    pub fn k1(&self) -> usize {
        self.x1.ncols()
    }

    pub fn k2(&self) -> usize {
        self.x2.ncols()
    }

    pub fn validate(&self) -> Result<(), MultilevelError> {
        let ladder = |lam: &Array1<f64>, name: &str| -> Result<(), MultilevelError> {
            for i in 0..lam.len() {
                if !(lam[i] > 0.0) {
                    return Err(MultilevelError::InvalidState(format!(
                        "{name}[{i}] must be positive"
                    )));
                }
                if i + 1 < lam.len() && lam[i] < lam[i + 1] {
                    return Err(MultilevelError::InvalidState(format!(
                        "{name} not nonincreasing at {i}"
                    )));
                }
            }
            Ok(())
        };
        ladder(&self.lambda1, "lambda1")?;
        ladder(&self.lambda2, "lambda2")?;
        if !(self.sigma2 > 0.0) || !(self.h_mu > 0.0) {
            return Err(MultilevelError::InvalidState(
                "sigma2 and h_mu must be positive".into(),
            ));
        }
        if self.h1.iter().any(|&h| !(h > 0.0)) || self.h2.iter().any(|&h| !(h > 0.0)) {
            return Err(MultilevelError::InvalidState(
                "smoothing parameters must be positive".into(),
            ));
        }
        for (x, psi, name) in [
            (&self.x1, &self.psi1, "psi1"),
            (&self.x2, &self.psi2, "psi2"),
        ] {
            if x.ncols() == 0 {
                continue;
            }
            let (p, _) = stiefel::polar_decompose(&x.view())?;
            let diff = linalg::max_abs_diff(&p.matrix().view(), &psi.view());
            if diff > 1e-10 {
                return Err(MultilevelError::InvalidState(format!(
                    "cached {name} deviates from polar factor by {diff:.3e}"
                )));
            }
            if linalg::orthonormality_defect(&psi.view()) > 1e-8 {
                return Err(MultilevelError::InvalidState(format!(
                    "{name} columns are not orthonormal"
                )));
            }
        }
        Ok(())
    }
}

/// Fitted values mu + eta_j + Phi1 xi_i + Phi2 zeta_ij for every row.
pub fn fitted_matrix(
    state: &MfpcaState,
    data: &MultilevelDataset,
    basis: &BasisSystem,
) -> Array2<f64> {
    let mu = basis.b.dot(&state.w_mu);
    let phi1 = basis.b.dot(&state.psi1);
    let phi2 = basis.b.dot(&state.psi2);
    let rows = data.rows();
    let m = data.m();
    let mut fitted = Array2::zeros((rows, m));
    let eta_curves: Option<Array2<f64>> = state.eta.as_ref().map(|e| basis.b.dot(&e.t()));
    for r in 0..rows {
        let i = data.row_subject(r);
        for t in 0..m {
            let mut v = mu[t];
            if let Some(ec) = &eta_curves {
                v += ec[[t, data.row_visit(r)]];
            }
            for k in 0..state.k1() {
                v += state.xi[[i, k]] * phi1[[t, k]];
            }
            for l in 0..state.k2() {
                v += state.zeta[[r, l]] * phi2[[t, l]];
            }
            fitted[[r, t]] = v;
        }
    }
    fitted
}

fn residual_matrix(
    state: &MfpcaState,
    data: &MultilevelDataset,
    basis: &BasisSystem,
) -> Array2<f64> {
    data.y() - &fitted_matrix(state, data, basis)
}

fn check_shapes(
    state: &MfpcaState,
    data: &MultilevelDataset,
    basis: &BasisSystem,
) -> Result<(), MultilevelError> {
    if basis.m() != data.m() {
        return Err(MultilevelError::DimensionMismatch(format!(
            "basis rows {} vs data columns {}",
            basis.m(),
            data.m()
        )));
    }
    if state.q() != basis.q() {
        return Err(MultilevelError::DimensionMismatch(format!(
            "state Q {} vs basis Q {}",
            state.q(),
            basis.q()
        )));
    }
    if state.xi.nrows() != data.n_subjects() || state.zeta.nrows() != data.rows() {
        return Err(MultilevelError::DimensionMismatch(
            "score matrices do not match the dataset".into(),
        ));
    }
    if state.k1() + state.k2() > basis.q() {
        return Err(MultilevelError::TooManyComponents {
            total: state.k1() + state.k2(),
            q: basis.q(),
        });
    }
    Ok(())
}

/// Log joint posterior of the multilevel model up to an additive constant,
/// with both Stiefel indicators replaced by standard normal densities of
/// the latent matrices.
pub fn mfpca_log_posterior(
    state: &MfpcaState,
    data: &MultilevelDataset,
    basis: &BasisSystem,
    prior: &PriorConfig,
) -> Result<f64, MultilevelError> {
    check_shapes(state, data, basis)?;
    let pen = basis
        .penalties()
        .ok_or(ModelError::MissingPenalties)
        .map_err(MultilevelError::Model)?;
    let resid = residual_matrix(state, data, basis);
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let total_obs = (data.rows() * data.m()) as f64;
    let mut lp = -0.5 * total_obs * (2.0 * std::f64::consts::PI * state.sigma2).ln()
        - rss / (2.0 * state.sigma2);

    lp += ln_inv_gamma_pdf(state.sigma2, prior.a_sigma, prior.b_sigma);

    // Level 1: scores, eigenvalues, smoothing, latent matrix.
    let n = data.n_subjects() as f64;
    for k in 0..state.k1() {
        let lam = state.lambda1[k];
        let ss: f64 = state.xi.column(k).iter().map(|x| x * x).sum();
        lp += -0.5 * n * (2.0 * std::f64::consts::PI * lam).ln() - ss / (2.0 * lam);
        lp += ln_inv_gamma_pdf(lam, prior.a_lambda, prior.b_lambda);
        let col = state.psi1.column(k);
        lp += -state.h1[k] * col.dot(&pen.palpha.dot(&col)) / (2.0 * state.sigma2);
        lp += ln_gamma_pdf(state.h1[k], prior.a_psi, prior.b_psi);
    }
    // Level 2.
    let rows = data.rows() as f64;
    for l in 0..state.k2() {
        let lam = state.lambda2[l];
        let ss: f64 = state.zeta.column(l).iter().map(|x| x * x).sum();
        lp += -0.5 * rows * (2.0 * std::f64::consts::PI * lam).ln() - ss / (2.0 * lam);
        lp += ln_inv_gamma_pdf(lam, prior.a_lambda, prior.b_lambda);
        let col = state.psi2.column(l);
        lp += -state.h2[l] * col.dot(&pen.palpha.dot(&col)) / (2.0 * state.sigma2);
        lp += ln_gamma_pdf(state.h2[l], prior.a_psi, prior.b_psi);
    }

    let wquad = state.w_mu.dot(&pen.palpha.dot(&state.w_mu));
    lp += -state.h_mu * wquad / (2.0 * state.sigma2);
    lp += ln_gamma_pdf(state.h_mu, prior.a_mu, prior.b_mu);

    if let Some(eta) = &state.eta {
        let h_eta = state.h_eta.unwrap_or(1.0);
        let mut equad = 0.0;
        for j in 0..eta.nrows() {
            let row = eta.row(j);
            equad += row.dot(&pen.palpha.dot(&row));
        }
        lp += -h_eta * equad / (2.0 * state.sigma2);
        lp += ln_gamma_pdf(h_eta, ETA_SMOOTH_SHAPE, ETA_SMOOTH_RATE);
    }

    for x in [&state.x1, &state.x2] {
        let ss: f64 = x.iter().map(|v| v * v).sum();
        lp += -0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * ss;
    }
    Ok(lp)
}

/// Gaussian conditionals for the subject scores: independent over (i, k)
/// with var = lambda1_k sigma^2 / (J_i lambda1_k + sigma^2).
pub fn conditional_scores_level1(
    state: &MfpcaState,
    data: &MultilevelDataset,
    basis: &BasisSystem,
) -> Result<(Array2<f64>, Array2<f64>), MultilevelError> {
    check_shapes(state, data, basis)?;
    let k1 = state.k1();
    let n = data.n_subjects();
    // Residual without the level-1 contribution.
    let mut partial = state.clone();
    partial.xi = Array2::zeros((n, k1));
    let resid = residual_matrix(&partial, data, basis);
    let phi1 = basis.b.dot(&state.psi1);
    let proj = resid.dot(&phi1); // rows×K1
    let mut mean = Array2::zeros((n, k1));
    let mut var = Array2::zeros((n, k1));
    for i in 0..n {
        let ji = data.subject_rows(i).len() as f64;
        for k in 0..k1 {
            let lam = state.lambda1[k];
            let mut s = 0.0;
            for &r in data.subject_rows(i) {
                s += proj[[r, k]];
            }
            let denom = ji * lam + state.sigma2;
            mean[[i, k]] = lam * s / denom;
            var[[i, k]] = lam * state.sigma2 / denom;
        }
    }
    Ok((mean, var))
}

/// Gaussian conditionals for the visit scores: independent over (row, l)
/// with var = lambda2_l sigma^2 / (lambda2_l + sigma^2).
pub fn conditional_scores_level2(
    state: &MfpcaState,
    data: &MultilevelDataset,
    basis: &BasisSystem,
) -> Result<(Array2<f64>, Array1<f64>), MultilevelError> {
    check_shapes(state, data, basis)?;
    let k2 = state.k2();
    let rows = data.rows();
    let mut partial = state.clone();
    partial.zeta = Array2::zeros((rows, k2));
    let resid = residual_matrix(&partial, data, basis);
    let phi2 = basis.b.dot(&state.psi2);
    let proj = resid.dot(&phi2);
    let mut mean = proj;
    let mut var = Array1::zeros(k2);
    for l in 0..k2 {
        let lam = state.lambda2[l];
        let shrink = lam / (lam + state.sigma2);
        for r in 0..rows {
            mean[[r, l]] *= shrink;
        }
        var[l] = lam * state.sigma2 / (lam + state.sigma2);
    }
    Ok((mean, var))
}

fn sample_gaussian_vector<R: Rng>(
    precision: &Array2<f64>,
    rhs: &Array1<f64>,
    sigma2: f64,
    rng: &mut R,
) -> Result<Array1<f64>, MultilevelError> {
    // Mean = precision^{-1} rhs, covariance = sigma^2 precision^{-1};
    // draw via the Cholesky factor of the precision.
    let l = linalg::cholesky(&precision.view())?;
    let y = linalg::solve_lower(&l.view(), rhs)?;
    let mean = linalg::solve_upper(&l.t(), &y)?;
    let q = rhs.len();
    let z = Array1::from_shape_fn(q, |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * sigma2.sqrt()
    });
    let u = linalg::solve_upper(&l.t(), &z)?;
    Ok(&mean + &u)
}

/// Conditional target of one latent matrix given everything else.
fn x_target_multilevel(
    x: &Array2<f64>,
    psi: &Array2<f64>,
    h: &Array1<f64>,
    state: &MfpcaState,
    data: &MultilevelDataset,
    basis: &BasisSystem,
    level: usize,
) -> Result<f64, MultilevelError> {
    let pen = basis
        .penalties()
        .ok_or(ModelError::MissingPenalties)
        .map_err(MultilevelError::Model)?;
    let mut probe = state.clone();
    if level == 1 {
        probe.psi1 = psi.clone();
    } else {
        probe.psi2 = psi.clone();
    }
    let resid = residual_matrix(&probe, data, basis);
    let rss: f64 = resid.iter().map(|r| r * r).sum();
    let mut penalty = 0.0;
    for j in 0..psi.ncols() {
        let col = psi.column(j);
        penalty += h[j] * col.dot(&pen.palpha.dot(&col));
    }
    let xss: f64 = x.iter().map(|v| v * v).sum();
    Ok(-(rss + penalty) / (2.0 * state.sigma2) - 0.5 * xss)
}

fn update_x_level<R: Rng>(
    state: &mut MfpcaState,
    data: &MultilevelDataset,
    basis: &BasisSystem,
    tuner: &mut ProposalTuner,
    level: usize,
    rng: &mut R,
) -> Result<(bool, f64), MultilevelError> {
    let (x, psi, h) = if level == 1 {
        (state.x1.clone(), state.psi1.clone(), state.h1.clone())
    } else {
        (state.x2.clone(), state.psi2.clone(), state.h2.clone())
    };
    if x.ncols() == 0 {
        return Ok((true, 1.0));
    }
    let scale = tuner.scale();
    let noise = Array2::from_shape_simple_fn(x.dim(), || {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    });
    let proposal = &x + &noise;
    let proposal_psi = match stiefel::polar_decompose(&proposal.view()) {
        Ok((p, _)) => p.into_matrix(),
        Err(StiefelError::PolarUndefined(_)) => {
            tuner.adapt(0.0);
            return Ok((false, 0.0));
        }
        Err(e) => return Err(MultilevelError::Stiefel(e)),
    };
    let current = x_target_multilevel(&x, &psi, &h, state, data, basis, level)?;
    let cand = x_target_multilevel(&proposal, &proposal_psi, &h, state, data, basis, level)?;
    let log_ratio = cand - current;
    let accept_prob = log_ratio.exp().min(1.0);
    let accepted = rng.random::<f64>().ln() < log_ratio;
    if accepted {
        if level == 1 {
            state.x1 = proposal;
            state.psi1 = proposal_psi;
        } else {
            state.x2 = proposal;
            state.psi2 = proposal_psi;
        }
    }
    tuner.adapt(accept_prob);
    Ok((accepted, accept_prob))
}

fn sample_truncated_ladder<R: Rng>(
    lambda: &mut Array1<f64>,
    shape_base: f64,
    score_ss: &[f64],
    prior: &PriorConfig,
    rng: &mut R,
) -> u64 {
    let k = lambda.len();
    let mut stalls = 0;
    for j in 0..k {
        let upper = if j == 0 { f64::INFINITY } else { lambda[j - 1] };
        let lower = if j + 1 == k { 0.0 } else { lambda[j + 1] };
        let shape = shape_base + prior.a_lambda;
        let scale = 0.5 * score_ss[j] + prior.b_lambda;
        match dist::sample_truncated_inv_gamma(rng, shape, scale, lower, upper, lambda[j]) {
            TruncatedDraw::Sampled(v) => lambda[j] = v,
            TruncatedDraw::Stalled => stalls += 1,
        }
    }
    stalls
}

/// Bookkeeping from one multilevel sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct MlSweepOutcome {
    pub x1_accepted: bool,
    pub x1_accept_prob: f64,
    pub x2_accepted: bool,
    pub x2_accept_prob: f64,
    pub stalls: u64,
}

/// One full sweep of the multilevel Gibbs sampler.
pub fn mfpca_gibbs_sweep<R: Rng>(
    state: &mut MfpcaState,
    data: &MultilevelDataset,
    basis: &BasisSystem,
    prior: &PriorConfig,
    tuner1: &mut ProposalTuner,
    tuner2: &mut ProposalTuner,
    rng: &mut R,
) -> Result<MlSweepOutcome, MultilevelError> {
    check_shapes(state, data, basis)?;
    let pen = basis
        .penalties()
        .ok_or(ModelError::MissingPenalties)
        .map_err(MultilevelError::Model)?;
    let mut out = MlSweepOutcome::default();

    let (a1, p1) = update_x_level(state, data, basis, tuner1, 1, rng)?;
    out.x1_accepted = a1;
    out.x1_accept_prob = p1;
    let (a2, p2) = update_x_level(state, data, basis, tuner2, 2, rng)?;
    out.x2_accepted = a2;
    out.x2_accept_prob = p2;

    // Subject scores.
    if state.k1() > 0 {
        let (mean, var) = conditional_scores_level1(state, data, basis)?;
        for i in 0..mean.nrows() {
            for k in 0..mean.ncols() {
                state.xi[[i, k]] = dist::sample_normal(rng, mean[[i, k]], var[[i, k]]);
            }
        }
    }
    // Visit scores.
    if state.k2() > 0 {
        let (mean, var) = conditional_scores_level2(state, data, basis)?;
        for r in 0..mean.nrows() {
            for l in 0..mean.ncols() {
                state.zeta[[r, l]] = dist::sample_normal(rng, mean[[r, l]], var[l]);
            }
        }
    }

    // Mean coefficients: precision (R I + h_mu P), rhs summed in
    // coefficient space with every other component subtracted.
    {
        let q = basis.q();
        let rows = data.rows() as f64;
        let mut precision = pen.palpha.clone() * state.h_mu;
        for i in 0..q {
            precision[[i, i]] += rows;
        }
        let mut probe = state.clone();
        probe.w_mu = Array1::zeros(q);
        let resid = residual_matrix(&probe, data, basis);
        let col_sums = resid.t().dot(&Array1::ones(data.rows()));
        let rhs = basis.b.t().dot(&col_sums);
        state.w_mu = sample_gaussian_vector(&precision, &rhs, state.sigma2, rng)?;
    }

    // Visit deviations, when enabled.
    if state.eta.is_some() {
        let q = basis.q();
        let h_eta = state.h_eta.unwrap_or(1.0);
        let mut probe = state.clone();
        if let Some(e) = probe.eta.as_mut() {
            e.fill(0.0);
        }
        let resid = residual_matrix(&probe, data, basis);
        let n_visits = data.n_visits();
        let mut new_eta = state.eta.clone().unwrap();
        for v in 0..n_visits {
            let rows: Vec<usize> = (0..data.rows()).filter(|&r| data.row_visit(r) == v).collect();
            let mut precision = pen.palpha.clone() * h_eta;
            for i in 0..q {
                precision[[i, i]] += rows.len() as f64;
            }
            let mut sum = Array1::zeros(data.m());
            for &r in &rows {
                sum += &resid.row(r);
            }
            let rhs = basis.b.t().dot(&sum);
            let draw = sample_gaussian_vector(&precision, &rhs, state.sigma2, rng)?;
            for c in 0..q {
                new_eta[[v, c]] = draw[c];
            }
        }
        state.eta = Some(new_eta);
    }

    // Eigenvalue ladders.
    let ss1: Vec<f64> = (0..state.k1())
        .map(|k| state.xi.column(k).iter().map(|x| x * x).sum())
        .collect();
    out.stalls += sample_truncated_ladder(
        &mut state.lambda1,
        0.5 * data.n_subjects() as f64,
        &ss1,
        prior,
        rng,
    );
    let ss2: Vec<f64> = (0..state.k2())
        .map(|l| state.zeta.column(l).iter().map(|x| x * x).sum())
        .collect();
    out.stalls += sample_truncated_ladder(
        &mut state.lambda2,
        0.5 * data.rows() as f64,
        &ss2,
        prior,
        rng,
    );

    // Noise variance.
    {
        let resid = residual_matrix(state, data, basis);
        let rss: f64 = resid.iter().map(|r| r * r).sum();
        let wquad = state.w_mu.dot(&pen.palpha.dot(&state.w_mu));
        let mut pquad = 0.0;
        for k in 0..state.k1() {
            let col = state.psi1.column(k);
            pquad += state.h1[k] * col.dot(&pen.palpha.dot(&col));
        }
        for l in 0..state.k2() {
            let col = state.psi2.column(l);
            pquad += state.h2[l] * col.dot(&pen.palpha.dot(&col));
        }
        let mut equad = 0.0;
        if let (Some(eta), Some(h_eta)) = (&state.eta, state.h_eta) {
            for j in 0..eta.nrows() {
                let row = eta.row(j);
                equad += h_eta * row.dot(&pen.palpha.dot(&row));
            }
        }
        let nm = (data.rows() * data.m()) as f64;
        let shape = 0.5 * nm + prior.a_sigma;
        let scale = 0.5 * (rss + state.h_mu * wquad + pquad + equad + 2.0 * prior.b_sigma);
        state.sigma2 = dist::sample_inv_gamma(rng, shape, scale);
    }

    // Smoothing parameters.
    {
        let wquad = state.w_mu.dot(&pen.palpha.dot(&state.w_mu));
        let cond = GammaConditional {
            shape: prior.a_mu,
            rate: wquad / (2.0 * state.sigma2) + prior.b_mu,
        };
        state.h_mu = cond.sample(rng);
        for k in 0..state.k1() {
            let col = state.psi1.column(k);
            let quad = col.dot(&pen.palpha.dot(&col));
            let cond = GammaConditional {
                shape: prior.a_psi,
                rate: quad / (2.0 * state.sigma2) + prior.b_psi,
            };
            state.h1[k] = cond.sample(rng);
        }
        for l in 0..state.k2() {
            let col = state.psi2.column(l);
            let quad = col.dot(&pen.palpha.dot(&col));
            let cond = GammaConditional {
                shape: prior.a_psi,
                rate: quad / (2.0 * state.sigma2) + prior.b_psi,
            };
            state.h2[l] = cond.sample(rng);
        }
        if let Some(eta) = &state.eta {
            let mut equad = 0.0;
            for j in 0..eta.nrows() {
                let row = eta.row(j);
                equad += row.dot(&pen.palpha.dot(&row));
            }
            let cond = GammaConditional {
                shape: ETA_SMOOTH_SHAPE,
                rate: equad / (2.0 * state.sigma2) + ETA_SMOOTH_RATE,
            };
            state.h_eta = Some(cond.sample(rng));
        }
    }
    Ok(out)
}

fn eig_directions(
    resid: &Array2<f64>,
    k: usize,
    data_scale: f64,
    label: &str,
) -> Result<Array2<f64>, SamplerError> {
    let (rows, m) = resid.dim();
    let rank_tol = 1e-10;
    let floor = 1e-12 * data_scale + f64::MIN_POSITIVE;
    if m <= rows {
        let gram = resid.t().dot(resid);
        let (vals, vecs) = linalg::symmetric_eigen(&gram.view())?;
        let attainable = vals
            .iter()
            .filter(|&&v| v > rank_tol * vals[0].max(f64::MIN_POSITIVE) && v > floor)
            .count();
        if k > attainable {
            return Err(SamplerError::InvalidConfig(format!(
                "{label}: requested K = {k}, attainable K = {attainable}"
            )));
        }
        let mut rv = Array2::zeros((m, k));
        for j in 0..k {
            for i in 0..m {
                rv[[i, j]] = vecs[[i, j]];
            }
        }
        Ok(rv)
    } else {
        let gram = resid.dot(&resid.t());
        let (vals, vecs) = linalg::symmetric_eigen(&gram.view())?;
        let attainable = vals
            .iter()
            .filter(|&&v| v > rank_tol * vals[0].max(f64::MIN_POSITIVE) && v > floor)
            .count();
        if k > attainable {
            return Err(SamplerError::InvalidConfig(format!(
                "{label}: requested K = {k}, attainable K = {attainable}"
            )));
        }
        let mut rv = Array2::zeros((m, k));
        for j in 0..k {
            let scale = vals[j].sqrt().recip();
            for t in 0..m {
                let mut s = 0.0;
                for i in 0..rows {
                    s += resid[[i, t]] * vecs[[i, j]];
                }
                rv[[t, j]] = s * scale;
            }
        }
        Ok(rv)
    }
}

fn empirical_ordered_variances(scores: &Array2<f64>) -> Array1<f64> {
    let (n, k) = scores.dim();
    let mut lambda = Array1::zeros(k);
    for j in 0..k {
        let col = scores.column(j);
        let mean = col.sum() / n as f64;
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        lambda[j] = (col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / denom).max(1e-12);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| lambda[j].partial_cmp(&lambda[i]).unwrap());
    let mut out = Array1::from_iter(order.iter().map(|&i| lambda[i]));
    let tied = (0..k.saturating_sub(1)).any(|j| out[j] <= out[j + 1]);
    if tied && k > 0 {
        let top = out[0];
        for j in 0..k {
            out[j] += 1e-6 * top * (k - j) as f64;
        }
    }
    out
}

/// Initialize a multilevel chain: mean from the grand average, level-1
/// components from subject-average residuals, level-2 components from
/// within-subject residuals.
pub fn init_multilevel_state<R: Rng>(
    data: &MultilevelDataset,
    basis: &BasisSystem,
    k1: usize,
    k2: usize,
    visit_means: bool,
    rng: &mut R,
) -> Result<MfpcaState, SamplerError> {
    let q = basis.q();
    if k1 + k2 > q {
        return Err(SamplerError::InvalidConfig(format!(
            "K1 + K2 = {} must not exceed Q = {q}",
            k1 + k2
        )));
    }
    let pen = basis
        .penalties()
        .ok_or(ModelError::MissingPenalties)
        .map_err(SamplerError::Model)?;
    let rows = data.rows();
    let m = data.m();
    let n = data.n_subjects();
    if rows == 0 {
        return Err(SamplerError::InvalidConfig(
            "multilevel dataset has no rows".into(),
        ));
    }

    let data_scale: f64 = data.y().iter().map(|v| v * v).sum::<f64>();
    let ybar = data.y().t().dot(&Array1::from_elem(rows, 1.0 / rows as f64));
    let mut a = pen.palpha.clone() * 1e-8;
    for i in 0..q {
        a[[i, i]] += 1.0;
    }
    let w_mu = linalg::solve_spd(&a.view(), &basis.b.t().dot(&ybar))?;
    let mu = basis.b.dot(&w_mu);

    // Subject averages of demeaned rows drive level 1.
    let mut subj_avg = Array2::zeros((n, m));
    for i in 0..n {
        let rws = data.subject_rows(i);
        for &r in rws {
            for t in 0..m {
                subj_avg[[i, t]] += data.y()[[r, t]] - mu[t];
            }
        }
        let ji = rws.len() as f64;
        for t in 0..m {
            subj_avg[[i, t]] /= ji;
        }
    }

    let jitter = |mat: &Array2<f64>, rng: &mut R| -> Result<(Array2<f64>, Array2<f64>), SamplerError> {
        let psi0 = stiefel::project_stiefel(&mat.view())?;
        let noise = Array2::from_shape_simple_fn(psi0.matrix().dim(), || {
            let v: f64 = StandardNormal.sample(rng);
            v * 0.005
        });
        let x = psi0.matrix() + &noise;
        match stiefel::polar_decompose(&x.view()) {
            Ok((p, _)) => Ok((x, p.into_matrix())),
            Err(_) => Ok((psi0.matrix().clone(), psi0.matrix().clone())),
        }
    };

    let (x1, psi1) = if k1 > 0 {
        let dirs = eig_directions(&subj_avg, k1, data_scale, "level 1")?;
        let proj = basis.b.t().dot(&dirs);
        jitter(&proj, rng)?
    } else {
        (Array2::zeros((q, 0)), Array2::zeros((q, 0)))
    };
    let phi1 = basis.b.dot(&psi1);
    let xi = subj_avg.dot(&phi1);

    // Row-level residuals after the level-1 fit drive level 2.
    let mut resid = Array2::zeros((rows, m));
    for r in 0..rows {
        let i = data.row_subject(r);
        for t in 0..m {
            let mut v = data.y()[[r, t]] - mu[t];
            for k in 0..k1 {
                v -= xi[[i, k]] * phi1[[t, k]];
            }
            resid[[r, t]] = v;
        }
    }
    let (x2, psi2) = if k2 > 0 {
        let dirs = eig_directions(&resid, k2, data_scale, "level 2")?;
        let proj = basis.b.t().dot(&dirs);
        jitter(&proj, rng)?
    } else {
        (Array2::zeros((q, 0)), Array2::zeros((q, 0)))
    };
    let phi2 = basis.b.dot(&psi2);
    let zeta = resid.dot(&phi2);

    let lambda1 = empirical_ordered_variances(&xi);
    let lambda2 = empirical_ordered_variances(&zeta);

    let final_resid = &resid - &zeta.dot(&phi2.t());
    let sigma2 = (final_resid.iter().map(|r| r * r).sum::<f64>() / (rows * m) as f64).max(1e-8);

    Ok(MfpcaState {
        w_mu,
        eta: if visit_means {
            Some(Array2::zeros((data.n_visits(), q)))
        } else {
            None
        },
        x1,
        psi1,
        x2,
        psi2,
        xi,
        zeta,
        lambda1,
        lambda2,
        sigma2,
        h_mu: 1.0,
        h1: Array1::from_elem(k1, 1.0),
        h2: Array1::from_elem(k2, 1.0),
        h_eta: if visit_means { Some(1.0) } else { None },
    })
}

struct MlChainRun {
    draws: Vec<MfpcaState>,
    accept1: f64,
    accept2: f64,
    stalls: u64,
    diverged: bool,
}

fn ml_state_is_finite(state: &MfpcaState) -> bool {
    state.sigma2.is_finite()
        && state.lambda1.iter().all(|v| v.is_finite())
        && state.lambda2.iter().all(|v| v.is_finite())
        && state.w_mu.iter().all(|v| v.is_finite())
        && state.x1.iter().all(|v| v.is_finite())
        && state.x2.iter().all(|v| v.is_finite())
        && state.xi.iter().all(|v| v.is_finite())
        && state.zeta.iter().all(|v| v.is_finite())
}

#[allow(clippy::too_many_arguments)]
fn run_ml_chain(
    chain: usize,
    data: &MultilevelDataset,
    basis: &BasisSystem,
    prior: &PriorConfig,
    config: &SamplerConfig,
    k1: usize,
    k2: usize,
    visit_means: bool,
) -> Result<MlChainRun, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64 + 1);
    let mut state = init_multilevel_state(data, basis, k1, k2, visit_means, &mut rng)?;
    let lp = mfpca_log_posterior(&state, data, basis, prior)
        .map_err(|e| SamplerError::InvalidConfig(e.to_string()))?;
    if !lp.is_finite() {
        return Err(SamplerError::NonFiniteInit { chain });
    }
    let mut tuner1 = ProposalTuner::new(0.1, config.target_accept);
    let mut tuner2 = ProposalTuner::new(0.1, config.target_accept);

    for _ in 0..config.n_warmup {
        mfpca_gibbs_sweep(&mut state, data, basis, prior, &mut tuner1, &mut tuner2, &mut rng)
            .map_err(|e| SamplerError::InvalidConfig(e.to_string()))?;
    }
    tuner1.freeze();
    tuner2.freeze();

    let mut draws = Vec::with_capacity(config.n_samples);
    let (mut acc1, mut acc2) = (0.0, 0.0);
    let mut stalls = 0u64;
    let post = config.n_samples * config.thinning;
    for sweep in 0..post {
        let out =
            mfpca_gibbs_sweep(&mut state, data, basis, prior, &mut tuner1, &mut tuner2, &mut rng)
                .map_err(|e| SamplerError::InvalidConfig(e.to_string()))?;
        acc1 += if out.x1_accepted { 1.0 } else { 0.0 };
        acc2 += if out.x2_accepted { 1.0 } else { 0.0 };
        stalls += out.stalls;
        if !ml_state_is_finite(&state) {
            return Ok(MlChainRun {
                draws,
                accept1: acc1 / (sweep + 1) as f64,
                accept2: acc2 / (sweep + 1) as f64,
                stalls,
                diverged: true,
            });
        }
        if (sweep + 1) % config.thinning == 0 {
            draws.push(state.clone());
        }
    }
    Ok(MlChainRun {
        draws,
        accept1: acc1 / post.max(1) as f64,
        accept2: acc2 / post.max(1) as f64,
        stalls,
        diverged: false,
    })
}

/// Run the multilevel sampler across chains with per-level diagnostics.
pub fn run_multilevel(
    data: &MultilevelDataset,
    basis: &BasisSystem,
    prior: &PriorConfig,
    config: &SamplerConfig,
    k1: usize,
    k2: usize,
    visit_means: bool,
) -> Result<(PosteriorSamples<MfpcaState>, ChainDiagnostics), SamplerError> {
    config.validate()?;
    prior.validate().map_err(SamplerError::Model)?;
    if !data.has_replication() && k2 > 0 {
        eprintln!(
            "warning: no subject has two or more visits; level-2 variance is weakly identified"
        );
    }

    let runs: Vec<Result<MlChainRun, SamplerError>> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_ml_chain(c, data, basis, prior, config, k1, k2, visit_means))
        .collect();
    let mut chains = Vec::with_capacity(config.n_chains);
    let (mut acc1, mut acc2) = (0.0, 0.0);
    let mut stalls = 0u64;
    let mut complete = true;
    for r in runs {
        let r = r?;
        acc1 += r.accept1;
        acc2 += r.accept2;
        stalls += r.stalls;
        complete &= !r.diverged;
        chains.push(r.draws);
    }
    let samples = PosteriorSamples {
        chains,
        n_warmup: config.n_warmup,
        thinning: config.thinning,
        seed: config.seed,
        complete,
    };

    // Monitored traces: sigma2, both ladders, both sets of eigenfunction
    // points (aligned per level to the first retained draw).
    let mut traces: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    let idx = monitor_indices(basis.m());
    let tpoints = basis.grid().points();
    let mut sigma_chains = Vec::new();
    for chain in &samples.chains {
        sigma_chains.push(chain.iter().map(|s| s.sigma2).collect::<Vec<f64>>());
    }
    traces.insert("sigma2".into(), sigma_chains);
    for level in [1usize, 2] {
        let klen = if level == 1 { k1 } else { k2 };
        let lambda_of = |s: &MfpcaState, j: usize| {
            if level == 1 {
                s.lambda1[j]
            } else {
                s.lambda2[j]
            }
        };
        for j in 0..klen {
            let mut per_chain = Vec::new();
            for chain in &samples.chains {
                per_chain.push(chain.iter().map(|s| lambda_of(s, j)).collect::<Vec<f64>>());
            }
            traces.insert(format!("lambda{level}_{}", j + 1), per_chain);
        }
        if klen > 0 && klen <= 6 {
            if let Some(first) = samples.first_draw() {
                fn psi_of(s: &MfpcaState, level: usize) -> &Array2<f64> {
                    if level == 1 {
                        &s.psi1
                    } else {
                        &s.psi2
                    }
                }
                let reference = basis.b.dot(psi_of(first, level));
                let mut phi_chains: Vec<Vec<Vec<f64>>> = vec![Vec::new(); klen * idx.len()];
                for chain in &samples.chains {
                    let phis: Vec<Array2<f64>> =
                        chain.iter().map(|s| basis.b.dot(psi_of(s, level))).collect();
                    let (aligned, _) = stiefel::align_samples(&phis, &reference.view())?;
                    for j in 0..klen {
                        for (pi, &p) in idx.iter().enumerate() {
                            phi_chains[j * idx.len() + pi]
                                .push(aligned.iter().map(|a| a[[p, j]]).collect());
                        }
                    }
                }
                for j in 0..klen {
                    for (pi, &p) in idx.iter().enumerate() {
                        traces.insert(
                            format!("phi{level}_{}@t{:.3}", j + 1, tpoints[p]),
                            phi_chains[j * idx.len() + pi].clone(),
                        );
                    }
                }
            }
        }
    }
    let mut ess = BTreeMap::new();
    let mut rhat = BTreeMap::new();
    for (key, tr) in &traces {
        ess.insert(key.clone(), diagnostics::ess(tr));
        if config.n_chains >= 2 {
            rhat.insert(key.clone(), diagnostics::rhat(tr));
        }
    }
    let diag = ChainDiagnostics {
        acceptance_rate_x: acc1 / config.n_chains as f64,
        acceptance_rate_x2: Some(acc2 / config.n_chains as f64),
        ess,
        rhat,
        stall_count: stalls,
    };
    Ok((samples, diag))
}
