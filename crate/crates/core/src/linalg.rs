//! Small dense complex linear-algebra helpers on top of `nalgebra`.
//!
//! Vectors are column vectors; `a.dotc(&b)` is `aᴴb`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CVector = DVector<Complex64>;
pub type CMatrix = DMatrix<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Builds a complex vector from real parts.
pub fn real_vector(values: &[f64]) -> CVector {
    CVector::from_iterator(values.len(), values.iter().map(|&v| c(v, 0.0)))
}

/// `aᴴb`
#[inline]
pub fn inner(a: &CVector, b: &CVector) -> Complex64 {
    a.dotc(b)
}

/// `u vᴴ`
pub fn outer(u: &CVector, v: &CVector) -> CMatrix {
    u * v.adjoint()
}

/// Hermitian part of `u vᴴ`, i.e. `(u vᴴ + v uᴴ)/2`.
pub fn hermitian_outer(u: &CVector, v: &CVector) -> CMatrix {
    let m = outer(u, v);
    (&m + m.adjoint()).scale(0.5)
}

pub fn hermitian_deviation(m: &CMatrix) -> f64 {
    (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Returns `u` scaled to unit norm, or `None` for a (numerically) zero vector.
pub fn normalized(u: &CVector) -> Option<CVector> {
    let n = u.norm();
    if n > 0.0 && n.is_finite() {
        Some(u.unscale(n))
    } else {
        None
    }
}

/// Rotates `u` by a common phase so that `hᴴu` is real and nonnegative.
pub fn phase_align(u: &CVector, h: &CVector) -> CVector {
    let p = inner(h, u);
    if p.norm() == 0.0 {
        return u.clone();
    }
    let rot = p.conj() / p.norm();
    u * rot
}

/// Square root of a Hermitian positive-semidefinite matrix. Eigenvalues down to
/// `-1e-12` are accepted and clamped to zero.
pub fn hermitian_psd_sqrt(m: &CMatrix) -> Result<CMatrix> {
    if !m.is_square() {
        return Err(Error::InvalidModel("covariance is not square".into()));
    }
    let dev = hermitian_deviation(m);
    if dev > 1e-12 {
        return Err(Error::InvalidModel(format!(
            "covariance is not Hermitian (deviation {dev:.3e})"
        )));
    }
    let herm = (m + m.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(herm);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-12 {
        return Err(Error::InvalidModel(format!(
            "covariance is not positive semidefinite (eigenvalue {min:.3e})"
        )));
    }
    let n = m.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    Ok(&scaled * eig.eigenvectors.adjoint())
}

/// Eigenpair of a Hermitian matrix with the largest (algebraic) eigenvalue.
pub fn principal_eigenpair_dense(m: &CMatrix) -> (f64, CVector) {
    let herm = (m + m.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(herm);
    let (idx, &val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty matrix");
    (val, eig.eigenvectors.column(idx).into_owned())
}

/// Power iteration for the largest algebraic eigenvalue of a Hermitian
/// operator given only through its action `apply`. `shift` must bound the
/// spectral norm so that `A + shift·I` is positive semidefinite.
///
/// Returns `None` when the residual has not dropped below `tol` within
/// `max_iters` steps.
pub fn power_iteration<F>(
    apply: F,
    start: &CVector,
    shift: f64,
    tol: f64,
    max_iters: usize,
) -> Option<(f64, CVector)>
where
    F: Fn(&CVector) -> CVector,
{
    let mut u = normalized(start)?;
    for _ in 0..max_iters {
        let au = apply(&u);
        let lambda = inner(&u, &au).re;
        let residual = (&au - &u * c(lambda, 0.0)).norm();
        if residual <= tol {
            return Some((lambda, u));
        }
        let next = au + &u * c(shift, 0.0);
        u = normalized(&next)?;
    }
    None
}

/// Inverts a real square matrix, rejecting it when the reciprocal condition
/// estimate (from the singular values) falls below `rcond`.
pub fn checked_inverse(m: &DMatrix<f64>, rcond: f64) -> Option<DMatrix<f64>> {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if max == 0.0 || !(min / max > rcond) {
        return None;
    }
    m.clone().try_inverse()
}

/// Spectral radius of a real square matrix (largest eigenvalue modulus).
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Solves `m x = b` for a complex square system by LU.
pub fn solve_complex(m: &CMatrix, b: &CVector) -> Option<CVector> {
    m.clone().lu().solve(b)
}
