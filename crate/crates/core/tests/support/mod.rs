#![allow(clippy::needless_range_loop)]
//! Shared helpers and independent oracles for the acceptance suite.
//!
//! Everything here is deliberately independent of the library's solve paths:
//! the dense solver is plain Gaussian elimination, the posterior oracle is
//! numerical quadrature, and clustering quality is scored by a self-contained
//! k-means plus adjusted Rand index.

use fuselvm::inference::{fit, FitOptions, FittedModel};
use fuselvm::CountDataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

/// Fits and asserts the universal fit invariants: a monotone ELBO trace and
/// positive definite prior and posterior covariances.
pub fn fit_checked(data: &CountDataset, d_z: usize, opts: &FitOptions) -> FittedModel {
    let model = fit(data, d_z, opts).expect("fit failed");
    assert_trace_monotone(&model.report.elbo_trace);
    for (k, cond) in model.params.conditions.iter().enumerate() {
        assert!(
            min_eigenvalue(&cond.sigma) > 0.0,
            "prior covariance of condition {k} not PD"
        );
        for (i, post) in model.posteriors.samples[k].iter().enumerate() {
            assert!(
                min_eigenvalue(&post.s) > 0.0,
                "posterior covariance ({k}, {i}) not PD"
            );
        }
    }
    model
}

/// No iteration may decrease the bound by more than 1e-8 relative.
pub fn assert_trace_monotone(trace: &[f64]) {
    for (t, w) in trace.windows(2).enumerate() {
        assert!(
            w[1] >= w[0] - 1e-8 * w[0].abs(),
            "ELBO decreased at iteration {}: {} -> {}",
            t + 1,
            w[0],
            w[1]
        );
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal(rng: &mut ChaCha20Rng, n: usize) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let g = DMatrix::from_fn(n, n, |_, _| normal.sample(rng));
    g.qr().q()
}

/// Dense symmetric solve by plain Gaussian elimination with partial
/// pivoting; independent of the library's Cholesky path.
pub fn gaussian_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.nrows(), n);
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| aug[(i, col)].abs().total_cmp(&aug[(j, col)].abs()))
            .unwrap();
        if pivot != col {
            aug.swap_rows(pivot, col);
        }
        let p = aug[(col, col)];
        assert!(p.abs() > 1e-300, "singular matrix in oracle solve");
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = aug[(row, col)] / p;
            for j in col..(n + m) {
                aug[(row, j)] -= factor * aug[(col, j)];
            }
        }
    }
    DMatrix::from_fn(n, m, |i, j| aug[(i, n + j)] / aug[(i, i)])
}

/// Dense `A` matrix of the quadratic bound, built from its definition.
pub fn dense_bound_matrix(d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        0.5 * (id - 1.0 / (d as f64 + 1.0))
    })
}

/// Posterior mean and variance of the 1-D latent model by Simpson quadrature
/// over `z in [mu - 8 sigma, mu + 8 sigma]`, using the same unnormalized
/// multinomial convention as the library (no factorial constant).
pub struct QuadraturePosterior {
    pub mean: f64,
    pub variance: f64,
    /// `log integral p(z) prod_d p_d(z)^{x_d} dz` (evidence without the
    /// multinomial normalization constant).
    pub log_evidence: f64,
}

pub fn quadrature_posterior_1d(
    mu: f64,
    sigma: f64,
    theta: &DMatrix<f64>,
    x: &DVector<f64>,
) -> QuadraturePosterior {
    let grid = 4001;
    let lo = mu - 8.0 * sigma;
    let hi = mu + 8.0 * sigma;
    let h = (hi - lo) / (grid - 1) as f64;
    let d = theta.nrows();
    let logw: Vec<f64> = (0..grid)
        .map(|g| {
            let z = lo + g as f64 * h;
            let eta: Vec<f64> = (0..d).map(|j| theta[(j, 0)] * z).collect();
            let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + eta.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
            let log_prior = -0.5 * ((z - mu) / sigma).powi(2)
                - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
            let log_lik: f64 = (0..d).map(|j| x[j] * (eta[j] - lse)).sum();
            log_prior + log_lik
        })
        .collect();
    let max_logw = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weight = |g: usize| -> f64 {
        let simpson = if g == 0 || g == grid - 1 {
            1.0
        } else if g % 2 == 1 {
            4.0
        } else {
            2.0
        };
        simpson * (logw[g] - max_logw).exp()
    };
    let mut z0 = 0.0;
    let mut z1 = 0.0;
    let mut z2 = 0.0;
    for g in 0..grid {
        let z = lo + g as f64 * h;
        let w = weight(g);
        z0 += w;
        z1 += w * z;
        z2 += w * z * z;
    }
    let mean = z1 / z0;
    QuadraturePosterior {
        mean,
        variance: z2 / z0 - mean * mean,
        log_evidence: max_logw + (z0 * h / 3.0).ln(),
    }
}

/// Self-contained k-means (k-means++ seeding, Lloyd iterations, best of
/// `restarts` by inertia).
pub fn kmeans(data: &DMatrix<f64>, k: usize, seed: u64, restarts: usize) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = data.nrows();
    let d = data.ncols();
    let mut best: (f64, Vec<usize>) = (f64::INFINITY, vec![0; n]);
    for _ in 0..restarts {
        let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
        centers.push(data.row(rng.random_range(0..n)).transpose());
        while centers.len() < k {
            let d2: Vec<f64> = (0..n)
                .map(|i| {
                    let row = data.row(i).transpose();
                    centers
                        .iter()
                        .map(|c| (&row - c).norm_squared())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = d2.iter().sum();
            let mut target = rng.random_range(0.0..total.max(f64::MIN_POSITIVE));
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target <= *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            centers.push(data.row(chosen).transpose());
        }
        let mut assign = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for i in 0..n {
                let row = data.row(i).transpose();
                let (mut bi, mut bd) = (0usize, f64::INFINITY);
                for (c, center) in centers.iter().enumerate() {
                    let dist = (&row - center).norm_squared();
                    if dist < bd {
                        bd = dist;
                        bi = c;
                    }
                }
                if assign[i] != bi {
                    assign[i] = bi;
                    changed = true;
                }
            }
            for (c, center) in centers.iter_mut().enumerate() {
                let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                let mut mean = DVector::zeros(d);
                for &i in &members {
                    mean += data.row(i).transpose();
                }
                mean /= members.len() as f64;
                *center = mean;
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..n)
            .map(|i| (&data.row(i).transpose() - &centers[assign[i]]).norm_squared())
            .sum();
        if inertia < best.0 {
            best = (inertia, assign);
        }
    }
    best.1
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let comb2 = |v: usize| (v * v.saturating_sub(1)) / 2;
    let sum_ij: usize = table.iter().flatten().map(|&v| comb2(v)).sum();
    let sum_a: usize = table.iter().map(|row| comb2(row.iter().sum())).sum();
    let sum_b: usize = (0..kb)
        .map(|j| comb2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = comb2(a.len());
    let expected = sum_a as f64 * sum_b as f64 / total as f64;
    let max = 0.5 * (sum_a + sum_b) as f64;
    (sum_ij as f64 - expected) / (max - expected)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
