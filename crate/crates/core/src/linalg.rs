//! Small dense helpers: the continuous Lyapunov equation and a matrix
//! exponential used as an integration oracle in tests and verification suites.

use nalgebra::{DMatrix, DVector};

/// Solve `A^T P + P A + Q = 0` for symmetric `P` by Kronecker vectorization.
/// Returns `None` when the Lyapunov operator is singular (some eigenvalue pair
/// of `A` sums to zero), which cannot happen for Hurwitz `A`.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    assert!(a.is_square(), "A must be square");
    assert!(q.nrows() == n && q.ncols() == n, "Q must match A");

    // vec(A^T P + P A) = (I (x) A^T + A^T (x) I) vec(P), column-major vec.
    let eye = DMatrix::identity(n, n);
    let at = a.transpose();
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_column_slice(q.as_slice()).scale(-1.0);
    let sol = op.lu().solve(&rhs)?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    Some((&p + p.transpose()).scale(0.5))
}

/// Matrix exponential by scaling and squaring with a Taylor series on the
/// scaled matrix. Accuracy is far below 1e-10 relative for the moderate norms
/// used here; this is deliberately independent of the adaptive integrator.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert!(a.is_square(), "A must be square");

    let norm = (0..n)
        .map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let b = a * 2.0_f64.powi(-s);

    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..200 {
        term = (&term * &b) / k as f64;
        sum += &term;
        if term.norm() <= 1e-18 * sum.norm() {
            break;
        }
    }
    let mut result = sum;
    for _ in 0..s {
        result = &result * &result;
    }
    result
}

/// Symmetric inverse square root of a positive-definite matrix.
pub fn inv_sqrt_spd(p: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = p.clone().symmetric_eigen();
    let mut d = DMatrix::zeros(p.nrows(), p.ncols());
    for (i, lam) in eig.eigenvalues.iter().enumerate() {
        assert!(*lam > 0.0, "matrix must be positive definite");
        d[(i, i)] = 1.0 / lam.sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Largest real part among the eigenvalues of `a`.
pub fn max_re_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}
