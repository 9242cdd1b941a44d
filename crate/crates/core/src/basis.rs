//! Discretely orthonormal spline basis and the smoothing penalties built
//! from it.
//!
//! The raw basis is a cubic-by-default B-spline family with equally spaced
//! knots over [0, 1]. Orthogonalization is a thin QR of the evaluation matrix
//! with a fixed sign convention, so `b^t b = I` exactly in the unweighted
//! discrete inner product of the grid. Second derivatives ride along through
//! the same change of basis, which keeps the roughness penalty consistent
//! with the orthonormal coefficients.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("grid needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("grid points must be strictly increasing (violated at index {0})")]
    NotIncreasing(usize),
    #[error("grid points must be finite")]
    NonFinitePoint,
    #[error("grid point {0} lies outside [0, 1]")]
    OutOfDomain(f64),
    #[error("overcomplete basis: Q = {q} exceeds M = {m} grid points")]
    Overcomplete { q: usize, m: usize },
    #[error("Q = {q} is below the minimum {min} for a degree-{degree} spline basis")]
    TooSmall { q: usize, min: usize, degree: usize },
    #[error("spline degree must be at least 2 so second derivatives exist, got {0}")]
    DegreeTooLow(usize),
    #[error("penalty weight alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("spline evaluation matrix is rank-deficient on this grid (column {0})")]
    RankDeficient(usize),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Shared observation grid, strictly increasing inside [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
}

impl Grid {
    pub fn new(points: Vec<f64>) -> Result<Self, BasisError> {
        if points.len() < 2 {
            return Err(BasisError::TooFewPoints(points.len()));
        }
        for (i, &t) in points.iter().enumerate() {
            if !t.is_finite() {
                return Err(BasisError::NonFinitePoint);
            }
            if !(0.0..=1.0).contains(&t) {
                return Err(BasisError::OutOfDomain(t));
            }
            if i > 0 && t <= points[i - 1] {
                return Err(BasisError::NotIncreasing(i));
            }
        }
        Ok(Grid { points })
    }

    /// Equally spaced grid t_m = (m-1)/(M-1), inclusive of both endpoints.
    pub fn uniform(m: usize) -> Self {
        assert!(m >= 2, "uniform grid needs at least 2 points");
        let pts = (0..m).map(|i| i as f64 / (m - 1) as f64).collect();
        Grid { points: pts }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

/// Penalty matrices assembled for one weight `alpha`.
#[derive(Debug, Clone)]
pub struct Penalties {
    /// Zero-order penalty (1/M) b^t b.
    pub p0: Array2<f64>,
    /// Second-derivative penalty (1/M) b2^t b2.
    pub p2: Array2<f64>,
    /// alpha * p0 + (1 - alpha) * p2.
    pub palpha: Array2<f64>,
    pub alpha: f64,
}

/// Orthonormal spline basis evaluated on a grid, with optional penalties.
#[derive(Debug, Clone)]
pub struct BasisSystem {
    grid: Grid,
    degree: usize,
    /// M×Q evaluation matrix with orthonormal columns.
    pub b: Array2<f64>,
    /// M×Q second derivatives of the raw basis pushed through the same
    /// change of basis as `b`.
    pub b2: Array2<f64>,
    penalties: Option<Penalties>,
}

impl BasisSystem {
    pub fn m(&self) -> usize {
        self.b.nrows()
    }

    pub fn q(&self) -> usize {
        self.b.ncols()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn penalties(&self) -> Option<&Penalties> {
        self.penalties.as_ref()
    }

    /// The assembled smoothing penalty, if `build_penalty` has run.
    pub fn palpha(&self) -> Option<&Array2<f64>> {
        self.penalties.as_ref().map(|p| &p.palpha)
    }
}

/// Evaluate B-spline `i` of degree `p` over `knots` at `x`, or one of its
/// derivatives. Uses the Cox-de Boor recursion; the right endpoint closes
/// the last nonempty interval.
fn bspline(knots: &[f64], i: usize, p: usize, x: f64, order: usize) -> f64 {
    if order > 0 {
        let mut v = 0.0;
        let d1 = knots[i + p] - knots[i];
        if d1 > 0.0 {
            v += p as f64 / d1 * bspline(knots, i, p - 1, x, order - 1);
        }
        let d2 = knots[i + p + 1] - knots[i + 1];
        if d2 > 0.0 {
            v -= p as f64 / d2 * bspline(knots, i + 1, p - 1, x, order - 1);
        }
        return v;
    }
    if p == 0 {
        let last = *knots.last().unwrap();
        let closes_domain = x == last && knots[i] < x && knots[i + 1] == last;
        if (knots[i] <= x && x < knots[i + 1]) || closes_domain {
            return 1.0;
        }
        return 0.0;
    }
    let mut v = 0.0;
    let d1 = knots[i + p] - knots[i];
    if d1 > 0.0 {
        v += (x - knots[i]) / d1 * bspline(knots, i, p - 1, x, 0);
    }
    let d2 = knots[i + p + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + p + 1] - x) / d2 * bspline(knots, i + 1, p - 1, x, 0);
    }
    v
}

/// Open uniform knot vector on [0, 1] for `q` basis functions of `degree`.
fn uniform_knots(q: usize, degree: usize) -> Vec<f64> {
    let interior = q - degree - 1;
    let mut knots = Vec::with_capacity(q + degree + 1);
    knots.extend(std::iter::repeat(0.0).take(degree + 1));
    for i in 1..=interior {
        knots.push(i as f64 / (interior + 1) as f64);
    }
    knots.extend(std::iter::repeat(1.0).take(degree + 1));
    knots
}

/// Raw (pre-orthogonalization) evaluation matrices: values and second
/// derivatives of the B-spline family on the grid.
fn raw_matrices(grid: &Grid, q: usize, degree: usize) -> (Array2<f64>, Array2<f64>) {
    let knots = uniform_knots(q, degree);
    let m = grid.len();
    let mut n = Array2::zeros((m, q));
    let mut n2 = Array2::zeros((m, q));
    for (r, &t) in grid.points().iter().enumerate() {
        for j in 0..q {
            n[[r, j]] = bspline(&knots, j, degree, t, 0);
            n2[[r, j]] = bspline(&knots, j, degree, t, 2);
        }
    }
    (n, n2)
}

/// Construct the orthonormal spline basis on `grid` with `q` functions.
///
/// Penalties are not filled; follow with [`build_penalty`]. The sign of each
/// column is fixed so its largest-magnitude entry is positive, which makes
/// the factorization deterministic.
pub fn build_basis(grid: &Grid, q: usize, degree: usize) -> Result<BasisSystem, BasisError> {
    let m = grid.len();
    if degree < 2 {
        return Err(BasisError::DegreeTooLow(degree));
    }
    if q > m {
        return Err(BasisError::Overcomplete { q, m });
    }
    if q < degree + 1 {
        return Err(BasisError::TooSmall {
            q,
            min: degree + 1,
            degree,
        });
    }
    let (n, n2) = raw_matrices(grid, q, degree);
    let (mut b, r) = linalg::thin_qr(&n.view())?;
    let scale = r
        .diag()
        .iter()
        .fold(0.0f64, |acc, x| acc.max(x.abs()))
        .max(f64::MIN_POSITIVE);
    for j in 0..q {
        if r[[j, j]].abs() <= 1e-12 * scale {
            return Err(BasisError::RankDeficient(j));
        }
    }
    // b2 = n2 * r^{-1}, then the same column signs as b.
    let mut b2 = linalg::solve_right_upper(&n2.view(), &r.view())?;
    for j in 0..q {
        let mut idx = 0;
        let mut best = -1.0f64;
        for i in 0..m {
            let a = b[[i, j]].abs();
            if a > best {
                best = a;
                idx = i;
            }
        }
        if b[[idx, j]] < 0.0 {
            for i in 0..m {
                b[[i, j]] = -b[[i, j]];
                b2[[i, j]] = -b2[[i, j]];
            }
        }
    }
    Ok(BasisSystem {
        grid: grid.clone(),
        degree,
        b,
        b2,
        penalties: None,
    })
}

/// Fill in the penalty matrices for weight `alpha`.
pub fn build_penalty(basis: BasisSystem, alpha: f64) -> Result<BasisSystem, BasisError> {
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(BasisError::AlphaOutOfRange(alpha));
    }
    let m = basis.m() as f64;
    let symmetrize = |mut a: Array2<f64>| {
        let n = a.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (a[[i, j]] + a[[j, i]]);
                a[[i, j]] = avg;
                a[[j, i]] = avg;
            }
        }
        a
    };
    let p0 = symmetrize(basis.b.t().dot(&basis.b) / m);
    let p2 = symmetrize(basis.b2.t().dot(&basis.b2) / m);
    let palpha = symmetrize(alpha * &p0 + (1.0 - alpha) * &p2);
    Ok(BasisSystem {
        penalties: Some(Penalties {
            p0,
            p2,
            palpha,
            alpha,
        }),
        ..basis
    })
}

/// Convenience: basis plus penalties in one call.
pub fn orthonormal_basis(
    grid: &Grid,
    q: usize,
    degree: usize,
    alpha: f64,
) -> Result<BasisSystem, BasisError> {
    build_penalty(build_basis(grid, q, degree)?, alpha)
}

/// Project an observed curve onto the basis: coefficients `b^t y`.
pub fn project(basis: &BasisSystem, y: &Array1<f64>) -> Array1<f64> {
    basis.b.t().dot(y)
}
