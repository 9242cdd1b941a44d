//! Simulation scenarios with known truth and the replication-study harness.
//!
//! Scenario truths are the closed forms evaluated on the default grid
//! t_m = (m-1)/(M-1) and then projected onto the Stiefel manifold, so the
//! discretely observed eigenfunctions are exactly orthonormal and coverage
//! targets are well defined.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use rayon::prelude::*;

use crate::basis::{self, Grid};
use crate::inference::{self, CurveSummary};
use crate::model::{FunctionalDataset, ModelError, PriorConfig};
use crate::multilevel::{self, MultilevelDataset, MultilevelError};
use crate::sampler::{self, SamplerConfig};
use crate::stiefel::{self, StiefelError};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("unknown scenario name: {0}")]
    UnknownScenario(String),
    #[error("grid of {m} points cannot support {k} components")]
    GridTooSmall { m: usize, k: usize },
    #[error("scenario {0:?} is single-level; use the multilevel accessor")]
    NotMultilevel(ScenarioName),
    #[error(transparent)]
    Stiefel(#[from] StiefelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Multilevel(#[from] MultilevelError),
    #[error("study failure: {0}")]
    Study(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Named simulation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScenarioName {
    S1,
    S2,
    Ml,
}

impl std::str::FromStr for ScenarioName {
    type Err = SimulateError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(ScenarioName::S1),
            "S2" => Ok(ScenarioName::S2),
            "ML" => Ok(ScenarioName::Ml),
            other => Err(SimulateError::UnknownScenario(other.to_string())),
        }
    }
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioName::S1 => write!(f, "S1"),
            ScenarioName::S2 => write!(f, "S2"),
            ScenarioName::Ml => write!(f, "ML"),
        }
    }
}

/// Truth for one level: exactly orthonormal discrete eigenfunctions and
/// strictly decreasing eigenvalues.
#[derive(Debug, Clone)]
pub struct LevelTruth {
    /// M×K matrix of discretely orthonormal eigenfunctions.
    pub phi: Array2<f64>,
    pub lambda: Vec<f64>,
}

/// Generative truth for a replication study.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub n: usize,
    pub m: usize,
    /// Visits per subject (multilevel only).
    pub j: Option<usize>,
    pub grid: Grid,
    pub mu: Array1<f64>,
    pub level1: LevelTruth,
    pub level2: Option<LevelTruth>,
    pub sigma2: f64,
}

impl ScenarioSpec {
    pub fn is_multilevel(&self) -> bool {
        self.level2.is_some()
    }

    /// Override the number of visits per subject (multilevel scenarios).
    pub fn with_visits(mut self, j: usize) -> Self {
        self.j = Some(j);
        self
    }
}

/// Legendre polynomial of order k rescaled from [-1, 1] to [0, 1], by the
/// standard recurrence.
pub fn legendre01(order: usize, t: f64) -> f64 {
    let x = 2.0 * t - 1.0;
    match order {
        0 => 1.0,
        1 => x,
        _ => {
            let mut pm1 = 1.0;
            let mut p = x;
            for n in 1..order {
                let next = ((2 * n + 1) as f64 * x * p - n as f64 * pm1) / (n + 1) as f64;
                pm1 = p;
                p = next;
            }
            p
        }
    }
}

fn project_truth(raw: Array2<f64>) -> Result<Array2<f64>, SimulateError> {
    Ok(stiefel::project_stiefel(&raw.view())?.into_matrix())
}

/// Build the stated scenario truth on the default grid. Deterministic.
pub fn make_scenario(name: ScenarioName, n: usize, m: usize) -> Result<ScenarioSpec, SimulateError> {
    let grid = Grid::uniform(m);
    let ts = grid.points().to_vec();
    let mf = m as f64;
    let tau = std::f64::consts::TAU; // 2 pi

    match name {
        ScenarioName::S1 => {
            if m < 3 {
                return Err(SimulateError::GridTooSmall { m, k: 3 });
            }
            let mut raw = Array2::zeros((m, 3));
            for (r, &t) in ts.iter().enumerate() {
                raw[[r, 0]] = (1.0 / mf).sqrt() * legendre01(0, t);
                raw[[r, 1]] =
                    (84.0 / (31.0 * mf)).sqrt() * (legendre01(1, t) - 0.5 * legendre01(3, t));
                raw[[r, 2]] = -(5.0 / mf).sqrt() * legendre01(2, t);
            }
            let phi = project_truth(raw)?;
            let mu = Array1::from_iter(ts.iter().map(|&t| 140.0 - 10.0 * legendre01(2, t)));
            Ok(ScenarioSpec {
                name,
                n,
                m,
                j: None,
                grid,
                mu,
                level1: LevelTruth {
                    phi,
                    lambda: vec![45000.0, 7000.0, 2000.0],
                },
                level2: None,
                sigma2: 4.0,
            })
        }
        ScenarioName::S2 => {
            if m < 2 {
                return Err(SimulateError::GridTooSmall { m, k: 2 });
            }
            let mut raw = Array2::zeros((m, 2));
            for (r, &t) in ts.iter().enumerate() {
                raw[[r, 0]] = (1.0 / (3.0 * mf)).sqrt() * (1.0 - 2.0 * (tau * t).cos());
                raw[[r, 1]] = (1.0 / (15.0 * mf)).sqrt()
                    * (5.0 * (tau * t).sin() - (2.0 * tau * t).sin() - 2.0 * (tau * t).cos());
            }
            let phi = project_truth(raw)?;
            let mu = Array1::from_iter(
                ts.iter()
                    .map(|&t| 10.0 - 5.0 * (tau * t).sin() - 5.0 * (tau * t).cos()),
            );
            Ok(ScenarioSpec {
                name,
                n,
                m,
                j: None,
                grid,
                mu,
                level1: LevelTruth {
                    phi,
                    lambda: vec![25000.0, 8500.0],
                },
                level2: None,
                sigma2: 121.0,
            })
        }
        ScenarioName::Ml => {
            if m < 2 {
                return Err(SimulateError::GridTooSmall { m, k: 2 });
            }
            let scale = (2.0 / mf).sqrt();
            let mut raw1 = Array2::zeros((m, 2));
            let mut raw2 = Array2::zeros((m, 2));
            for (r, &t) in ts.iter().enumerate() {
                raw1[[r, 0]] = scale * (tau * t).sin();
                raw1[[r, 1]] = scale * (tau * t).cos();
                raw2[[r, 0]] = scale * (2.0 * tau * t).sin();
                raw2[[r, 1]] = scale * (2.0 * tau * t).cos();
            }
            let phi1 = project_truth(raw1)?;
            let phi2 = project_truth(raw2)?;
            let mu = Array1::from_iter(
                ts.iter()
                    .map(|&t| 5.0 * legendre01(1, t) - 3.0 * legendre01(2, t)),
            );
            Ok(ScenarioSpec {
                name,
                n,
                m,
                j: Some(5),
                grid,
                mu,
                level1: LevelTruth {
                    phi: phi1,
                    lambda: vec![10000.0, 2000.0],
                },
                level2: Some(LevelTruth {
                    phi: phi2,
                    lambda: vec![8000.0, 4000.0],
                }),
                sigma2: 16.0,
            })
        }
    }
}

/// A single-level dataset together with the exact scores that generated it.
#[derive(Debug, Clone)]
pub struct GeneratedSingle {
    pub data: FunctionalDataset,
    /// N×K true scores.
    pub scores: Array2<f64>,
}

/// A multilevel dataset with true scores at both levels.
#[derive(Debug, Clone)]
pub struct GeneratedMultilevel {
    pub data: MultilevelDataset,
    /// N×K1 subject scores.
    pub scores1: Array2<f64>,
    /// R×K2 visit scores, row-aligned with the dataset rows.
    pub scores2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub enum GeneratedData {
    Single(GeneratedSingle),
    Multilevel(GeneratedMultilevel),
}

/// Draw one dataset from the scenario's generative model.
pub fn generate_dataset(spec: &ScenarioSpec, seed: u64) -> Result<GeneratedData, SimulateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = spec.m;
    let noise_sd = spec.sigma2.sqrt();
    match &spec.level2 {
        None => {
            let k = spec.level1.lambda.len();
            let n = spec.n;
            let mut scores = Array2::zeros((n, k));
            for i in 0..n {
                for j in 0..k {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scores[[i, j]] = z * spec.level1.lambda[j].sqrt();
                }
            }
            let mut y = scores.dot(&spec.level1.phi.t());
            for mut row in y.rows_mut() {
                row += &spec.mu;
            }
            for v in y.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += z * noise_sd;
            }
            let ids = (0..n).map(|i| format!("curve{i}")).collect();
            let data = FunctionalDataset::new(y, spec.grid.clone(), ids)?;
            Ok(GeneratedData::Single(GeneratedSingle { data, scores }))
        }
        Some(level2) => {
            let k1 = spec.level1.lambda.len();
            let k2 = level2.lambda.len();
            let n = spec.n;
            let j_per = spec.j.unwrap_or(5);
            let total = n * j_per;
            let mut scores1 = Array2::zeros((n, k1));
            for i in 0..n {
                for j in 0..k1 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scores1[[i, j]] = z * spec.level1.lambda[j].sqrt();
                }
            }
            let mut scores2 = Array2::zeros((total, k2));
            let mut y = Array2::zeros((total, m));
            let mut keys = Vec::with_capacity(total);
            let mut r = 0;
            for i in 0..n {
                let subj_dev = spec.level1.phi.dot(
                    &Array1::from_iter((0..k1).map(|j| scores1[[i, j]])),
                );
                for v in 0..j_per {
                    for l in 0..k2 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scores2[[r, l]] = z * level2.lambda[l].sqrt();
                    }
                    let visit_dev = level2.phi.dot(
                        &Array1::from_iter((0..k2).map(|l| scores2[[r, l]])),
                    );
                    for t in 0..m {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        y[[r, t]] = spec.mu[t] + subj_dev[t] + visit_dev[t] + z * noise_sd;
                    }
                    keys.push((format!("subj{i}"), format!("visit{v}")));
                    r += 1;
                }
            }
            let data = MultilevelDataset::new(y, keys, spec.grid.clone())?;
            Ok(GeneratedData::Multilevel(GeneratedMultilevel {
                data,
                scores1,
                scores2,
            }))
        }
    }
}

/// Model-fitting configuration shared by the study harness and the CLI.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    pub q: usize,
    pub degree: usize,
    pub prior: PriorConfig,
    pub sampler: SamplerConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            q: 10,
            degree: 3,
            prior: PriorConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Accuracy and coverage metrics for one level of one replicate.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LevelMetrics {
    pub ise_phi: Vec<f64>,
    pub cov_phi: Vec<f64>,
    /// |correlation| between the aligned posterior-mean eigenfunction and
    /// the truth.
    pub corr_phi: Vec<f64>,
    pub score_cov: Vec<f64>,
    pub lambda_mean: Vec<f64>,
}

/// One replicate's row in the study report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub ise_mu: f64,
    pub cov_mu: f64,
    pub sigma2_mean: f64,
    pub level1: LevelMetrics,
    pub level2: Option<LevelMetrics>,
    /// Posterior mean of sum(lambda1) + sum(lambda2) + sigma^2 (multilevel).
    pub total_variance_mean: Option<f64>,
}

/// Full study output: per-replicate rows plus aggregate means over the
/// successful replicates.
#[derive(Debug, Clone)]
pub struct StudyReport {
    pub scenario: ScenarioName,
    pub rows: Vec<ReplicateRow>,
    pub n_failed: usize,
}

impl StudyReport {
    /// Mean of a metric over successful replicates.
    pub fn mean_over_ok<F: Fn(&ReplicateRow) -> f64>(&self, f: F) -> f64 {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.ok).map(f).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    /// Median of a metric over successful replicates.
    pub fn median_over_ok<F: Fn(&ReplicateRow) -> f64>(&self, f: F) -> f64 {
        let mut vals: Vec<f64> = self.rows.iter().filter(|r| r.ok).map(f).collect();
        if vals.is_empty() {
            return f64::NAN;
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = vals.len();
        if n % 2 == 1 {
            vals[n / 2]
        } else {
            0.5 * (vals[n / 2 - 1] + vals[n / 2])
        }
    }
}

/// Format a float with 17 significant digits (round-trip exact for f64).
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn flip_band(lo: &[f64], hi: &[f64], sign: f64) -> (Vec<f64>, Vec<f64>) {
    if sign >= 0.0 {
        (lo.to_vec(), hi.to_vec())
    } else {
        (
            hi.iter().map(|v| -v).collect(),
            lo.iter().map(|v| -v).collect(),
        )
    }
}

fn abs_corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    (cov / (va.sqrt() * vb.sqrt())).abs()
}

/// Metrics for one level, aligning the (already internally consistent)
/// draws and summaries to the scenario truth before comparing.
fn level_metrics(
    components: &[CurveSummary],
    point_estimate: &Array2<f64>,
    score_draws: &[Array2<f64>],
    lambda_draws: &[Array1<f64>],
    truth: &LevelTruth,
    true_scores: &Array2<f64>,
) -> Result<LevelMetrics, SimulateError> {
    let k = truth.lambda.len();
    let perm = stiefel::best_alignment(&point_estimate.view(), &truth.phi.view())
        .map_err(SimulateError::Stiefel)?;
    let est = perm.apply_columns(&point_estimate.view());

    let mut ise_phi = Vec::with_capacity(k);
    let mut cov_phi = Vec::with_capacity(k);
    let mut corr_phi = Vec::with_capacity(k);
    for j in 0..k {
        let truth_col: Vec<f64> = truth.phi.column(j).iter().copied().collect();
        let est_col: Vec<f64> = est.column(j).iter().copied().collect();
        ise_phi.push(inference::ise(&est_col, &truth_col).map_err(to_study_err)?);
        corr_phi.push(abs_corr(&est_col, &truth_col));
        let src = perm.perm[j];
        let (lo, hi) = flip_band(
            &components[src].lo95,
            &components[src].hi95,
            perm.signs[j],
        );
        cov_phi.push(inference::pointwise_coverage(&lo, &hi, &truth_col).map_err(to_study_err)?);
    }

    // Scores and eigenvalues follow the same signed permutation.
    let permuted_scores: Vec<Array2<f64>> = score_draws
        .iter()
        .map(|s| perm.apply_columns(&s.view()))
        .collect();
    let score_cov = inference::score_coverage(&permuted_scores, true_scores)
        .map_err(to_study_err)?;

    let mut lambda_mean = vec![0.0; k];
    for l in lambda_draws {
        let p = perm.apply_values(l);
        for j in 0..k {
            lambda_mean[j] += p[j];
        }
    }
    for v in lambda_mean.iter_mut() {
        *v /= lambda_draws.len() as f64;
    }

    Ok(LevelMetrics {
        ise_phi,
        cov_phi,
        corr_phi,
        score_cov,
        lambda_mean,
    })
}

fn to_study_err(e: inference::InferenceError) -> SimulateError {
    SimulateError::Study(e.to_string())
}

fn run_single_replicate(
    spec: &ScenarioSpec,
    fit: &FitConfig,
    replicate: usize,
    seed: u64,
) -> Result<ReplicateRow, SimulateError> {
    let generated = match generate_dataset(spec, seed)? {
        GeneratedData::Single(g) => g,
        GeneratedData::Multilevel(_) => {
            return Err(SimulateError::Study("expected single-level scenario".into()))
        }
    };
    let basis = basis::orthonormal_basis(&spec.grid, fit.q, fit.degree, fit.prior.alpha)
        .map_err(|e| SimulateError::Study(e.to_string()))?;
    let mut config = fit.sampler.clone();
    config.seed = seed;
    let k = spec.level1.lambda.len();
    let (samples, _diag) = sampler::run(&generated.data, &basis, &fit.prior, &config, k)
        .map_err(|e| SimulateError::Study(e.to_string()))?;
    if !samples.complete {
        return Err(SimulateError::Study("chain diverged".into()));
    }
    let aligned = inference::align_draws(&samples, &basis).map_err(to_study_err)?;
    let summary = inference::summarize(&samples, &basis).map_err(to_study_err)?;

    let truth_mu: Vec<f64> = spec.mu.iter().copied().collect();
    let ise_mu = inference::ise(&summary.mu.mean, &truth_mu).map_err(to_study_err)?;
    let cov_mu = inference::pointwise_coverage(&summary.mu.lo95, &summary.mu.hi95, &truth_mu)
        .map_err(to_study_err)?;
    let sigma2_mean = aligned.sigma2.iter().sum::<f64>() / aligned.sigma2.len() as f64;

    let level1 = level_metrics(
        &summary.components,
        &summary.phi_point_estimate,
        &aligned.scores,
        &aligned.lambda,
        &spec.level1,
        &generated.scores,
    )?;

    Ok(ReplicateRow {
        replicate,
        seed,
        ok: true,
        error: None,
        ise_mu,
        cov_mu,
        sigma2_mean,
        level1,
        level2: None,
        total_variance_mean: None,
    })
}

fn run_multilevel_replicate(
    spec: &ScenarioSpec,
    fit: &FitConfig,
    replicate: usize,
    seed: u64,
) -> Result<ReplicateRow, SimulateError> {
    let generated = match generate_dataset(spec, seed)? {
        GeneratedData::Multilevel(g) => g,
        GeneratedData::Single(_) => {
            return Err(SimulateError::Study("expected multilevel scenario".into()))
        }
    };
    let level2_truth = spec.level2.as_ref().expect("multilevel scenario");
    let basis = basis::orthonormal_basis(&spec.grid, fit.q, fit.degree, fit.prior.alpha)
        .map_err(|e| SimulateError::Study(e.to_string()))?;
    let mut config = fit.sampler.clone();
    config.seed = seed;
    let k1 = spec.level1.lambda.len();
    let k2 = level2_truth.lambda.len();
    let (samples, _diag) = multilevel::run_multilevel(
        &generated.data,
        &basis,
        &fit.prior,
        &config,
        k1,
        k2,
        false,
    )
    .map_err(|e| SimulateError::Study(e.to_string()))?;
    if !samples.complete {
        return Err(SimulateError::Study("chain diverged".into()));
    }
    let aligned = inference::align_multilevel_draws(&samples, &basis).map_err(to_study_err)?;
    let summary = inference::summarize_multilevel(&samples, &basis).map_err(to_study_err)?;

    let truth_mu: Vec<f64> = spec.mu.iter().copied().collect();
    let ise_mu = inference::ise(&summary.mu.mean, &truth_mu).map_err(to_study_err)?;
    let cov_mu = inference::pointwise_coverage(&summary.mu.lo95, &summary.mu.hi95, &truth_mu)
        .map_err(to_study_err)?;
    let sigma2_mean = aligned.sigma2.iter().sum::<f64>() / aligned.sigma2.len() as f64;

    let level1 = level_metrics(
        &summary.level1.components,
        &summary.level1.phi_point_estimate,
        &aligned.scores1,
        &aligned.lambda1,
        &spec.level1,
        &generated.scores1,
    )?;
    let level2 = level_metrics(
        &summary.level2.components,
        &summary.level2.phi_point_estimate,
        &aligned.scores2,
        &aligned.lambda2,
        level2_truth,
        &generated.scores2,
    )?;

    let mut total = 0.0;
    let n_draws = aligned.sigma2.len();
    for d in 0..n_draws {
        total += aligned.lambda1[d].sum() + aligned.lambda2[d].sum() + aligned.sigma2[d];
    }

    Ok(ReplicateRow {
        replicate,
        seed,
        ok: true,
        error: None,
        ise_mu,
        cov_mu,
        sigma2_mean,
        level1,
        level2: Some(level2),
        total_variance_mean: Some(total / n_draws as f64),
    })
}

fn failed_row(replicate: usize, seed: u64, err: &SimulateError, k1: usize, k2: usize) -> ReplicateRow {
    let nanv = |k: usize| vec![f64::NAN; k];
    ReplicateRow {
        replicate,
        seed,
        ok: false,
        error: Some(err.to_string()),
        ise_mu: f64::NAN,
        cov_mu: f64::NAN,
        sigma2_mean: f64::NAN,
        level1: LevelMetrics {
            ise_phi: nanv(k1),
            cov_phi: nanv(k1),
            corr_phi: nanv(k1),
            score_cov: nanv(k1),
            lambda_mean: nanv(k1),
        },
        level2: if k2 > 0 {
            Some(LevelMetrics {
                ise_phi: nanv(k2),
                cov_phi: nanv(k2),
                corr_phi: nanv(k2),
                score_cov: nanv(k2),
                lambda_mean: nanv(k2),
            })
        } else {
            None
        },
        total_variance_mean: None,
    }
}

fn study_csv(report: &StudyReport) -> String {
    let k1 = report
        .rows
        .first()
        .map(|r| r.level1.ise_phi.len())
        .unwrap_or(0);
    let k2 = report
        .rows
        .first()
        .and_then(|r| r.level2.as_ref().map(|l| l.ise_phi.len()))
        .unwrap_or(0);
    let prefix1 = if k2 > 0 { "phi1_" } else { "phi" };
    let mut header = vec![
        "replicate".to_string(),
        "seed".to_string(),
        "ok".to_string(),
        "error".to_string(),
        "ise_mu".to_string(),
        "cov_mu".to_string(),
        "sigma2_mean".to_string(),
    ];
    for j in 1..=k1 {
        header.push(format!("ise_{prefix1}{j}"));
        header.push(format!("cov_{prefix1}{j}"));
        header.push(format!("corr_{prefix1}{j}"));
        header.push(format!("score_cov_{prefix1}{j}"));
        header.push(format!("lambda1_{j}_mean"));
    }
    for j in 1..=k2 {
        header.push(format!("ise_phi2_{j}"));
        header.push(format!("cov_phi2_{j}"));
        header.push(format!("corr_phi2_{j}"));
        header.push(format!("score_cov_phi2_{j}"));
        header.push(format!("lambda2_{j}_mean"));
    }
    if k2 > 0 {
        header.push("total_variance_mean".to_string());
    }
    let mut out = header.join(",");
    out.push('\n');

    let push_level = |cells: &mut Vec<String>, l: &LevelMetrics| {
        for j in 0..l.ise_phi.len() {
            cells.push(fmt_f64(l.ise_phi[j]));
            cells.push(fmt_f64(l.cov_phi[j]));
            cells.push(fmt_f64(l.corr_phi[j]));
            cells.push(fmt_f64(l.score_cov[j]));
            cells.push(fmt_f64(l.lambda_mean[j]));
        }
    };

    for row in &report.rows {
        let mut cells = vec![
            row.replicate.to_string(),
            row.seed.to_string(),
            row.ok.to_string(),
            row.error.clone().unwrap_or_default().replace(',', ";"),
            fmt_f64(row.ise_mu),
            fmt_f64(row.cov_mu),
            fmt_f64(row.sigma2_mean),
        ];
        push_level(&mut cells, &row.level1);
        if let Some(l2) = &row.level2 {
            push_level(&mut cells, l2);
            cells.push(fmt_f64(row.total_variance_mean.unwrap_or(f64::NAN)));
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }

    // Aggregate means over successful replicates.
    let ok_rows: Vec<&ReplicateRow> = report.rows.iter().filter(|r| r.ok).collect();
    if !ok_rows.is_empty() {
        let nf = ok_rows.len() as f64;
        let mean = |f: &dyn Fn(&ReplicateRow) -> f64| -> f64 {
            ok_rows.iter().map(|r| f(r)).sum::<f64>() / nf
        };
        let mut cells = vec![
            "mean".to_string(),
            String::new(),
            "true".to_string(),
            String::new(),
            fmt_f64(mean(&|r| r.ise_mu)),
            fmt_f64(mean(&|r| r.cov_mu)),
            fmt_f64(mean(&|r| r.sigma2_mean)),
        ];
        for j in 0..k1 {
            cells.push(fmt_f64(mean(&|r| r.level1.ise_phi[j])));
            cells.push(fmt_f64(mean(&|r| r.level1.cov_phi[j])));
            cells.push(fmt_f64(mean(&|r| r.level1.corr_phi[j])));
            cells.push(fmt_f64(mean(&|r| r.level1.score_cov[j])));
            cells.push(fmt_f64(mean(&|r| r.level1.lambda_mean[j])));
        }
        for j in 0..k2 {
            cells.push(fmt_f64(mean(&|r| r.level2.as_ref().unwrap().ise_phi[j])));
            cells.push(fmt_f64(mean(&|r| r.level2.as_ref().unwrap().cov_phi[j])));
            cells.push(fmt_f64(mean(&|r| r.level2.as_ref().unwrap().corr_phi[j])));
            cells.push(fmt_f64(mean(&|r| r.level2.as_ref().unwrap().score_cov[j])));
            cells.push(fmt_f64(mean(&|r| r.level2.as_ref().unwrap().lambda_mean[j])));
        }
        if k2 > 0 {
            cells.push(fmt_f64(mean(&|r| r.total_variance_mean.unwrap_or(f64::NAN))));
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Run B replicates of the scenario: generate, fit, summarize, score.
/// Failed replicates are recorded with their error and excluded from
/// aggregates. When `out_dir` is given, writes `study.csv` and
/// `manifest.json` there.
pub fn replicate_study(
    spec: &ScenarioSpec,
    b: usize,
    fit: &FitConfig,
    out_dir: Option<&std::path::Path>,
) -> Result<StudyReport, SimulateError> {
    if b < 1 {
        return Err(SimulateError::Study("need at least one replicate".into()));
    }
    let started = std::time::Instant::now();
    let study_seed = fit.sampler.seed;
    let k1 = spec.level1.lambda.len();
    let k2 = spec.level2.as_ref().map(|l| l.lambda.len()).unwrap_or(0);

    let rows: Vec<ReplicateRow> = (0..b)
        .into_par_iter()
        .map(|r| {
            let seed = study_seed.wrapping_mul(1_000_000).wrapping_add(r as u64);
            let result = if spec.is_multilevel() {
                run_multilevel_replicate(spec, fit, r, seed)
            } else {
                run_single_replicate(spec, fit, r, seed)
            };
            match result {
                Ok(row) => row,
                Err(e) => failed_row(r, seed, &e, k1, k2),
            }
        })
        .collect();

    let n_failed = rows.iter().filter(|r| !r.ok).count();
    let report = StudyReport {
        scenario: spec.name,
        rows,
        n_failed,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("study.csv"), study_csv(&report))?;
        let manifest = serde_json::json!({
            "command": "replicate_study",
            "scenario": spec.name,
            "n": spec.n,
            "m": spec.m,
            "j": spec.j,
            "replicates": b,
            "study_seed": study_seed,
            "replicate_seeds": (0..b)
                .map(|r| study_seed.wrapping_mul(1_000_000).wrapping_add(r as u64))
                .collect::<Vec<u64>>(),
            "fit": fit,
            "grid_convention": "t_m = (m-1)/(M-1), endpoints inclusive",
            "failed_replicates": n_failed,
            "version": env!("CARGO_PKG_VERSION"),
            "elapsed_seconds": started.elapsed().as_secs_f64(),
        });
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
    }
    Ok(report)
}
