//! Dense linear-algebra kernels for the small matrices this crate works with
//! (spline coefficient blocks and component Grams, Q and K in the tens).
//!
//! Everything here is plain f64 on `ndarray` storage: cyclic Jacobi for
//! symmetric eigenproblems, Householder QR for thin orthogonalization, and
//! Cholesky for SPD solves.

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix must be symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("Jacobi eigensolver did not converge in {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },
    #[error("triangular solve hit a zero diagonal at index {0}")]
    SingularTriangular(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns eigenvalues in descending order with matching eigenvector columns,
/// so `a = v * diag(values) * v^t`.
pub fn symmetric_eigen(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>), LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }
    let asym = max_asymmetry(a);
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if asym > 1e-8 * scale.max(1.0) {
        return Err(LinalgError::NotSymmetric(asym));
    }

    let mut m = a.to_owned();
    // Work on the exactly symmetric part so rotations stay consistent.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
    let mut v = Array2::eye(n);

    const MAX_SWEEPS: usize = 64;
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = f64::EPSILON * frob.max(f64::MIN_POSITIVE);

    for _sweep in 0..MAX_SWEEPS {
        let off: f64 = {
            let mut s = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    s += m[[p, q]] * m[[p, q]];
                }
            }
            (2.0 * s).sqrt()
        };
        if off <= tol {
            let (values, vectors) = sort_descending(&m, &v);
            return Ok((values, vectors));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for i in 0..n {
                    let mpi = m[[p, i]];
                    let mqi = m[[q, i]];
                    m[[p, i]] = c * mpi - s * mqi;
                    m[[q, i]] = s * mpi + c * mqi;
                }
                // Rotation leaves the (p,q) entry analytically zero.
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    Err(LinalgError::NoConvergence(MAX_SWEEPS))
}

fn sort_descending(m: &Array2<f64>, v: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let mut values = Array1::zeros(n);
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = m[[src, src]];
        for r in 0..n {
            vectors[[r, dst]] = v[[r, src]];
        }
    }
    (values, vectors)
}

fn max_asymmetry(a: &ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Thin QR factorization `a = q * r` by Householder reflections.
///
/// `a` is m×n with m ≥ n; `q` is m×n with orthonormal columns and `r` is n×n
/// upper triangular.
pub fn thin_qr(a: &ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>), LinalgError> {
    let m = a.nrows();
    let n = a.ncols();
    if m < n {
        return Err(LinalgError::DimensionMismatch(format!(
            "thin QR needs rows >= cols, got {m}x{n}"
        )));
    }
    let mut work = a.to_owned();
    // Householder vectors, one per column.
    let mut vs: Vec<Array1<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = Array1::zeros(m);
        let norm_x: f64 = (j..m).map(|i| work[[i, j]] * work[[i, j]]).sum::<f64>().sqrt();
        if norm_x > 0.0 {
            let alpha = if work[[j, j]] >= 0.0 { -norm_x } else { norm_x };
            for i in j..m {
                v[i] = work[[i, j]];
            }
            v[j] -= alpha;
            let vnorm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vnorm > 0.0 {
                v.mapv_inplace(|x| x / vnorm);
                for col in j..n {
                    let dot: f64 = (j..m).map(|i| v[i] * work[[i, col]]).sum();
                    for i in j..m {
                        work[[i, col]] -= 2.0 * v[i] * dot;
                    }
                }
            }
        }
        vs.push(v);
    }
    let mut r = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            r[[i, j]] = work[[i, j]];
        }
    }
    // Accumulate q = H_0 H_1 ... H_{n-1} applied to the first n identity columns.
    let mut q = Array2::zeros((m, n));
    for j in 0..n {
        q[[j, j]] = 1.0;
    }
    for v in vs.iter().rev() {
        for col in 0..n {
            let dot: f64 = (0..m).map(|i| v[i] * q[[i, col]]).sum();
            if dot != 0.0 {
                for i in 0..m {
                    q[[i, col]] -= 2.0 * v[i] * dot;
                }
            }
        }
    }
    Ok((q, r))
}

/// Cholesky factorization of an SPD matrix, returning lower-triangular `l`
/// with `a = l * l^t`.
pub fn cholesky(a: &ArrayView2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    let mut l = Array2::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite {
                pivot: diag,
                index: j,
            });
        }
        let d = diag.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Solve `l * x = b` with `l` lower triangular.
pub fn solve_lower(l: &ArrayView2<f64>, b: &Array1<f64>) -> Result<Array1<f64>, LinalgError> {
    let n = l.nrows();
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let lik = l[[i, k]];
            x[i] -= lik * x[k];
        }
        let d = l[[i, i]];
        if d == 0.0 {
            return Err(LinalgError::SingularTriangular(i));
        }
        x[i] /= d;
    }
    Ok(x)
}

/// Solve `u * x = b` with `u` upper triangular.
pub fn solve_upper(u: &ArrayView2<f64>, b: &Array1<f64>) -> Result<Array1<f64>, LinalgError> {
    let n = u.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let uik = u[[i, k]];
            x[i] -= uik * x[k];
        }
        let d = u[[i, i]];
        if d == 0.0 {
            return Err(LinalgError::SingularTriangular(i));
        }
        x[i] /= d;
    }
    Ok(x)
}

/// Solve `a * x = b` for SPD `a` via Cholesky.
pub fn solve_spd(a: &ArrayView2<f64>, b: &Array1<f64>) -> Result<Array1<f64>, LinalgError> {
    let l = cholesky(a)?;
    let y = solve_lower(&l.view(), b)?;
    solve_upper(&l.t(), &y)
}

/// Inverse of an SPD matrix via Cholesky, symmetrized on the way out.
pub fn inverse_spd(a: &ArrayView2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = a.nrows();
    let l = cholesky(a)?;
    let mut inv = Array2::zeros((n, n));
    for j in 0..n {
        let mut e = Array1::zeros(n);
        e[j] = 1.0;
        let y = solve_lower(&l.view(), &e)?;
        let x = solve_upper(&l.t(), &y)?;
        for i in 0..n {
            inv[[i, j]] = x[i];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = avg;
            inv[[j, i]] = avg;
        }
    }
    Ok(inv)
}

/// Right division `x = b * r^{-1}` with `r` upper triangular, solved column
/// by column against `r^t`.
pub fn solve_right_upper(
    b: &ArrayView2<f64>,
    r: &ArrayView2<f64>,
) -> Result<Array2<f64>, LinalgError> {
    let n = r.nrows();
    if b.ncols() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "right solve: b has {} cols, r is {}x{}",
            b.ncols(),
            n,
            r.ncols()
        )));
    }
    let rt = r.t();
    let mut out = Array2::zeros((b.nrows(), n));
    for i in 0..b.nrows() {
        let row = Array1::from_iter(b.row(i).iter().copied());
        let solved = solve_lower(&rt, &row)?;
        for j in 0..n {
            out[[i, j]] = solved[j];
        }
    }
    Ok(out)
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Largest absolute deviation of `u^t u` from the identity.
pub fn orthonormality_defect(u: &ArrayView2<f64>) -> f64 {
    let gram = u.t().dot(u);
    let k = gram.nrows();
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[[i, j]] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(5, 2, 1) conjugated by a fixed rotation has eigenvalues 5, 2, 1.
        let a = array![[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen(&a.view()).unwrap();
        // Reconstruct and compare.
        let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        assert!(max_abs_diff(&recon.view(), &a.view()) < 1e-12);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        assert!(orthonormality_defect(&vecs.view()) < 1e-12);
    }

    #[test]
    fn jacobi_2x2_analytic() {
        // Eigenvalues of [[2, 1], [1, 2]] are 3 and 1.
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, _) = symmetric_eigen(&a.view()).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-13);
        assert!((vals[1] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn thin_qr_reconstructs() {
        let a = array![
            [1.0, 2.0],
            [3.0, 4.0],
            [5.0, 6.0],
            [7.0, 9.0]
        ];
        let (q, r) = thin_qr(&a.view()).unwrap();
        let recon = q.dot(&r);
        assert!(max_abs_diff(&recon.view(), &a.view()) < 1e-12);
        assert!(orthonormality_defect(&q.view()) < 1e-12);
        // r upper triangular
        assert_eq!(r[[1, 0]], 0.0);
    }

    #[test]
    fn cholesky_solve_roundtrip() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let b = array![1.0, -2.0, 0.5];
        let x = solve_spd(&a.view(), &b).unwrap();
        let back = a.dot(&x);
        for i in 0..3 {
            assert!((back[i] - b[i]).abs() < 1e-12);
        }
        let inv = inverse_spd(&a.view()).unwrap();
        let prod = a.dot(&inv);
        assert!(max_abs_diff(&prod.view(), &Array2::eye(3).view()) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(
            cholesky(&a.view()),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn right_solve_matches_forward_product() {
        let r = array![[2.0, 1.0, 0.5], [0.0, 3.0, -1.0], [0.0, 0.0, 1.5]];
        let x = array![[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]];
        let b = x.dot(&r);
        let x2 = solve_right_upper(&b.view(), &r.view()).unwrap();
        assert!(max_abs_diff(&x.view(), &x2.view()) < 1e-12);
    }
}
