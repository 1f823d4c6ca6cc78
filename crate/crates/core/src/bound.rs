//! Softmax / log-sum-exp primitives and the fixed-curvature quadratic upper
//! bound on log-sum-exp.
//!
//! For a length-`D` vector `eta` the bound is
//!
//! ```text
//! lse(eta) <= 0.5 eta' A eta - b' eta + c,
//! A = 0.5 (I - 11'/(D+1)),
//! b = A phi - softmax(phi),
//! c = 0.5 phi' A phi - softmax(phi)' phi + lse(phi),
//! ```
//!
//! where `phi` is a free expansion point at which the bound is tight in both
//! value and gradient. The curvature matrix `A` depends only on `D` and
//! dominates the softmax Hessian `diag(p) - pp'` in the Loewner order, which
//! is what makes the inequality valid for the full overparameterized softmax
//! (the tight bound for `D` categories is `0.5 (I - 11'/D)`, and replacing
//! `1/D` by `1/(D+1)` only adds a PSD rank-one term). `A` is never
//! materialized in hot paths; applications use its scale-plus-rank-one
//! structure in O(D).

use nalgebra::{DMatrix, DVector};

/// Softmax and log-sum-exp in one pass, with max-subtraction for stability.
pub fn softmax_lse(eta: &DVector<f64>) -> (DVector<f64>, f64) {
    assert!(!eta.is_empty(), "softmax/lse: empty input");
    assert!(
        eta.iter().all(|v| v.is_finite()),
        "softmax/lse: non-finite input"
    );
    let max = eta.max();
    let mut p = eta.map(|v| (v - max).exp());
    let total = p.sum();
    p /= total;
    (p, max + total.ln())
}

/// Numerically stable softmax; entries are positive and sum to one.
pub fn softmax(eta: &DVector<f64>) -> DVector<f64> {
    softmax_lse(eta).0
}

/// Numerically stable log-sum-exp, `ln(sum_d exp(eta_d))`.
pub fn lse(eta: &DVector<f64>) -> f64 {
    softmax_lse(eta).1
}

/// The fixed curvature matrix `A = 0.5 (I - 11'/(D+1))`, stored implicitly.
///
/// Its inverse has the closed form `A^{-1} = 2 (I + 11')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HessianBound {
    dim: usize,
}

impl HessianBound {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "curvature matrix requires dimension >= 1");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `A v` in O(D).
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim, "dimension mismatch");
        let shift = v.sum() / (self.dim as f64 + 1.0);
        v.map(|x| 0.5 * (x - shift))
    }

    /// `A^{-1} v = 2 (v + sum(v) 1)` in O(D).
    pub fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.dim, "dimension mismatch");
        let total = v.sum();
        v.map(|x| 2.0 * (x + total))
    }

    /// `A^{-1} M` column-wise for a `D x q` matrix.
    pub fn apply_inverse_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.dim, "dimension mismatch");
        let col_totals = m.row_sum();
        let mut out = m * 2.0;
        for j in 0..out.ncols() {
            let add = 2.0 * col_totals[j];
            for i in 0..out.nrows() {
                out[(i, j)] += add;
            }
        }
        out
    }

    /// Quadratic form `v' A v` in O(D).
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        assert_eq!(v.len(), self.dim, "dimension mismatch");
        let total = v.sum();
        0.5 * (v.norm_squared() - total * total / (self.dim as f64 + 1.0))
    }

    /// `Theta' A Theta` for a `D x q` loading matrix, in O(D q^2).
    pub fn gram(&self, theta: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(theta.nrows(), self.dim, "dimension mismatch");
        let mut g = theta.tr_mul(theta);
        let col_totals = theta.row_sum();
        let coef = 1.0 / (self.dim as f64 + 1.0);
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                g[(i, j)] = 0.5 * (g[(i, j)] - coef * col_totals[i] * col_totals[j]);
            }
        }
        g
    }

    /// Dense `A`, for small-dimension oracles and exports.
    pub fn dense(&self) -> DMatrix<f64> {
        let d = self.dim;
        let coef = 1.0 / (d as f64 + 1.0);
        DMatrix::from_fn(d, d, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            0.5 * (id - coef)
        })
    }

    /// Dense `A^{-1} = 2 (I + 11')`.
    pub fn dense_inverse(&self) -> DMatrix<f64> {
        let d = self.dim;
        DMatrix::from_fn(d, d, |i, j| if i == j { 4.0 } else { 2.0 })
    }
}

/// Builds the curvature matrix for dimension `dim`.
pub fn hessian_bound(dim: usize) -> HessianBound {
    HessianBound::new(dim)
}

/// Bound coefficients at an expansion point; `b` and `c` are deterministic
/// functions of `phi`.
#[derive(Debug, Clone)]
pub struct BoundCoefficients {
    pub phi: DVector<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

/// `b` and `c` without retaining the expansion point (hot-path form).
pub(crate) fn bound_b_c(phi: &DVector<f64>) -> (DVector<f64>, f64) {
    let a = HessianBound::new(phi.len());
    let (p, lse_phi) = softmax_lse(phi);
    let c = 0.5 * a.quad_form(phi) - p.dot(phi) + lse_phi;
    let mut b = a.apply(phi);
    b -= &p;
    (b, c)
}

/// Computes `b = A phi - softmax(phi)` and
/// `c = 0.5 phi' A phi - softmax(phi)' phi + lse(phi)`.
pub fn bound_coefficients(phi: &DVector<f64>) -> BoundCoefficients {
    let (b, c) = bound_b_c(phi);
    BoundCoefficients {
        phi: phi.clone(),
        b,
        c,
    }
}

/// Evaluates the quadratic upper bound `0.5 eta' A eta - b' eta + c` with the
/// expansion point `phi`. Satisfies `result >= lse(eta)`, with equality at
/// `eta = phi`.
pub fn lse_quadratic_upper(eta: &DVector<f64>, phi: &DVector<f64>) -> f64 {
    assert_eq!(eta.len(), phi.len(), "lse_quadratic_upper: length mismatch");
    let a = HessianBound::new(eta.len());
    let coeffs = bound_coefficients(phi);
    0.5 * a.quad_form(eta) - coeffs.b.dot(eta) + coeffs.c
}
