//! Small shared helpers for symmetric positive definite matrices.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::{Error, Result};

/// Cholesky factorization with escalating diagonal jitter.
///
/// Tries the plain factorization first, then retries up to three times with
/// `jitter * I` added to the diagonal, escalating the jitter tenfold each
/// time.
pub(crate) fn cholesky_with_jitter(m: &DMatrix<f64>, jitter: f64) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let mut eps = jitter;
    for _ in 0..3 {
        let mut jittered = m.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += eps;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(chol);
        }
        eps *= 10.0;
    }
    Err(Error::Numerical(format!(
        "{0}x{0} matrix not positive definite after jitter up to {1:.1e}",
        m.nrows(),
        eps / 10.0
    )))
}

/// `log |M|` from a Cholesky factor of `M`.
pub(crate) fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    2.0 * acc
}

/// `dst += scale * src` without allocating.
pub(crate) fn add_scaled(dst: &mut DMatrix<f64>, src: &DMatrix<f64>, scale: f64) {
    debug_assert_eq!(dst.shape(), src.shape());
    dst.zip_apply(src, |d, s| *d += scale * s);
}

/// In-place symmetrization `m <- (m + m^T) / 2`.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}
