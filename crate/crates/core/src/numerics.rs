//! Dense linear algebra and integration kernel.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. The SVD is a one-sided (Hestenes)
//! Jacobi iteration: deterministic, accurate to working precision for the
//! small Hankel and input-stack matrices this crate factors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative truncation for pseudo-inverses.
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 80;

/// Reduced singular value decomposition `a = left * diag(singular_values) * right'`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m x k`, orthonormal columns, `k = min(m, n)`.
    pub left: Matrix,
    /// Non-negative, non-increasing.
    pub singular_values: Vec<f64>,
    /// `n x k`, orthonormal columns.
    pub right: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut scaled = self.left.clone();
        for (j, s) in self.singular_values.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        scaled * self.right.transpose()
    }

    /// Number of singular values strictly above `tol * sigma_max`.
    pub fn rank(&self, tol: f64) -> usize {
        let smax = self.singular_values.first().copied().unwrap_or(0.0);
        if smax <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .take_while(|s| **s > tol * smax)
            .count()
    }
}

fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} contains non-finite entries")))
    }
}

/// Singular value decomposition by one-sided Jacobi rotations.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    ensure_finite(a, "svd input")?;
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::Dimension("svd of an empty matrix".into()));
    }
    if a.nrows() < a.ncols() {
        let t = svd_tall(&a.transpose())?;
        return Ok(SvdResult {
            left: t.right,
            singular_values: t.singular_values,
            right: t.left,
        });
    }
    svd_tall(a)
}

/// Jacobi SVD for `m >= n`.
fn svd_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut u = a.clone();
    let mut v = Matrix::identity(n, n);
    let eps = f64::EPSILON;

    let mut converged = n == 1;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let ci = u.column(i);
                    let cj = u.column(j);
                    (ci.norm_squared(), cj.norm_squared(), ci.dot(&cj))
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut u, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "jacobi svd did not converge in {JACOBI_MAX_SWEEPS} sweeps ({m}x{n})"
        )));
    }

    let norms: Vec<f64> = (0..n).map(|j| u.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the result deterministic for tied values.
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let smax = norms[order[0]];
    let zero_floor = smax * eps * (m.max(n) as f64);
    let mut left = Matrix::zeros(m, n);
    let mut right = Matrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        right.set_column(dst, &v.column(src));
        if s > zero_floor && s > 0.0 {
            left.set_column(dst, &(u.column(src) / s));
            singular_values.push(s);
        } else {
            singular_values.push(if s > 0.0 { s } else { 0.0 });
            deficient.push(dst);
        }
    }
    complete_orthonormal(&mut left, &deficient);
    Ok(SvdResult {
        left,
        singular_values,
        right,
    })
}

fn rotate_columns(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let a = m[(r, i)];
        let b = m[(r, j)];
        m[(r, i)] = c * a - s * b;
        m[(r, j)] = s * a + c * b;
    }
}

/// Fills the listed columns with unit vectors orthogonal to every other column.
fn complete_orthonormal(q: &mut Matrix, missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let m = q.nrows();
    let mut filled: Vec<usize> = (0..q.ncols()).filter(|c| !missing.contains(c)).collect();
    let mut candidate = 0;
    for &col in missing {
        loop {
            assert!(candidate < m, "orthonormal completion ran out of basis vectors");
            let mut e = Vector::zeros(m);
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let proj = q.column(f).dot(&e);
                    e.axpy(-proj, &q.column(f).into_owned(), 1.0);
                }
            }
            let norm = e.norm();
            if norm > 0.5 {
                q.set_column(col, &(e / norm));
                filled.push(col);
                break;
            }
        }
    }
}

/// Moore-Penrose pseudo-inverse, truncating singular values at or below
/// `tol * sigma_max`.
pub fn pinv(a: &Matrix, tol: f64) -> Result<Matrix> {
    if tol < 0.0 {
        return Err(Error::Config(format!("pinv tolerance must be >= 0, got {tol}")));
    }
    let f = svd(a)?;
    let rank = f.rank(tol);
    let (m, n) = a.shape();
    let mut out = Matrix::zeros(n, m);
    for j in 0..rank {
        let s = f.singular_values[j];
        let vcol = f.right.column(j);
        let ucol = f.left.column(j);
        out.ger(1.0 / s, &vcol, &ucol, 1.0);
    }
    Ok(out)
}

/// Minimum-norm solution `H` of `min ||Y - H U||_F`, computed as `Y pinv(U)`.
pub fn lstsq_right(y: &Matrix, u: &Matrix, tol: f64) -> Result<Matrix> {
    if y.ncols() != u.ncols() {
        return Err(Error::Dimension(format!(
            "lstsq_right: Y has {} columns but U has {}",
            y.ncols(),
            u.ncols()
        )));
    }
    Ok(y * pinv(u, tol)?)
}

/// One classical Runge-Kutta step of `dx/dt = deriv(x, u)` with `u` held
/// constant over the step.
pub fn rk4_step<F>(deriv: F, x: &Vector, u: &Vector, dt: f64) -> Result<Vector>
where
    F: Fn(&Vector, &Vector) -> Vector,
{
    if !(dt > 0.0) {
        return Err(Error::Config(format!("rk4 step size must be > 0, got {dt}")));
    }
    let k1 = deriv(x, u);
    let k2 = deriv(&(x + &k1 * (0.5 * dt)), u);
    let k3 = deriv(&(x + &k2 * (0.5 * dt)), u);
    let k4 = deriv(&(x + &k3 * dt), u);
    for k in [&k1, &k2, &k3, &k4] {
        if !k.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite derivative in rk4 step".into()));
        }
    }
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    Ok(next)
}

/// Fixed-size RK4 step used on the simulation hot path; `rk4_step` is the
/// general entry point.
pub fn rk4_array<const N: usize, F>(deriv: F, x: &[f64; N], dt: f64) -> [f64; N]
where
    F: Fn(&[f64; N]) -> [f64; N],
{
    let offset = |base: &[f64; N], k: &[f64; N], h: f64| {
        let mut out = *base;
        for i in 0..N {
            out[i] += h * k[i];
        }
        out
    };
    let k1 = deriv(x);
    let k2 = deriv(&offset(x, &k1, 0.5 * dt));
    let k3 = deriv(&offset(x, &k2, 0.5 * dt));
    let k4 = deriv(&offset(x, &k3, dt));
    let mut out = *x;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Solves `a x = b` for symmetric positive definite `a`. Returns `None` when
/// the Cholesky factorization fails.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Option<Matrix> {
    let chol = symmetrize(a).cholesky()?;
    Some(chol.solve(b))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &Matrix) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn rms(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}
