//! Reference covariance estimators and the matrix-RMSE comparison harness.
//!
//! The empirical estimator is the maximum-likelihood sample covariance
//! (`1/n`); the shrinkage estimator pulls it toward a scaled identity with
//! the closed-form optimal coefficient of Ledoit & Wolf (2004). Both are
//! conventionally run on standardized data ("standardized" meaning z-scored:
//! centered and divided by the maximum-likelihood standard deviation).
//!
//! `compare_on_community` reruns the whole comparison on fresh community
//! simulations: baselines see the standardized stacked counts, the proposed
//! model is fitted on the raw counts and contributes its low-rank signal
//! covariance. RMSE is elementwise over all entries including the diagonal.
//! Precision estimates are jitter-stabilized inverses; for the proposed
//! model the full predictive covariance (which is strictly positive
//! definite) is inverted, and the reference precision is the inverse of the
//! true predictive covariance.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bound::HessianBound;
use crate::data::CountDataset;
use crate::inference::{fit, FitOptions};
use crate::linalg;
use crate::predictive::{inter_covariance, low_rank_covariance};
use crate::simulate::{simulate_community, CommunityConfig};
use crate::{Error, Result};

/// Covariance estimator tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovMethod {
    Empirical,
    LedoitWolf,
    Proposed,
}

impl CovMethod {
    pub fn name(&self) -> &'static str {
        match self {
            CovMethod::Empirical => "empirical",
            CovMethod::LedoitWolf => "ledoit_wolf",
            CovMethod::Proposed => "proposed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(CovMethod::Empirical),
            "ledoit_wolf" => Ok(CovMethod::LedoitWolf),
            "proposed" => Ok(CovMethod::Proposed),
            other => Err(Error::InvalidConfig(format!(
                "unknown method '{other}' (expected empirical, ledoit_wolf, proposed)"
            ))),
        }
    }
}

/// Normalization of the sample covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovNormalization {
    /// `1/n`, matching the model's covariance update convention.
    #[default]
    MaximumLikelihood,
    /// `1/(n-1)`.
    Unbiased,
}

/// A covariance estimate with an optional stabilized precision.
#[derive(Debug, Clone)]
pub struct CovEstimate {
    pub method: CovMethod,
    pub covariance: DMatrix<f64>,
    /// Present when the covariance is invertible after jitter stabilization.
    pub precision: Option<DMatrix<f64>>,
    /// Shrinkage coefficient in [0, 1] (Ledoit-Wolf only).
    pub shrinkage: Option<f64>,
}

/// Standardized data plus the indices of constant columns, which are only
/// centered (their variance is zero).
#[derive(Debug, Clone)]
pub struct Standardized {
    pub data: DMatrix<f64>,
    pub constant_columns: Vec<usize>,
}

fn center(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = x.clone();
    for j in 0..x.ncols() {
        let mean = x.column(j).sum() / n as f64;
        for i in 0..n {
            out[(i, j)] -= mean;
        }
    }
    out
}

/// Z-scores each column: subtract the mean, divide by the maximum-likelihood
/// standard deviation. Constant columns are left centered and flagged.
pub fn standardize(x: &DMatrix<f64>) -> Result<Standardized> {
    if x.nrows() < 2 {
        return Err(Error::InvalidConfig(
            "standardize requires at least 2 samples".into(),
        ));
    }
    let n = x.nrows() as f64;
    let mut out = center(x);
    let mut constant_columns = Vec::new();
    for j in 0..out.ncols() {
        let var = out.column(j).map(|v| v * v).sum() / n;
        if var > 0.0 {
            let inv_std = 1.0 / var.sqrt();
            for i in 0..out.nrows() {
                out[(i, j)] *= inv_std;
            }
        } else {
            constant_columns.push(j);
        }
    }
    Ok(Standardized {
        data: out,
        constant_columns,
    })
}

fn stabilized_precision(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    linalg::cholesky_with_jitter(cov, 1e-8)
        .ok()
        .map(|chol| chol.inverse())
}

/// Sample covariance with the given normalization.
pub fn empirical_cov_with(x: &DMatrix<f64>, norm: CovNormalization) -> Result<CovEstimate> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "covariance requires at least 2 samples".into(),
        ));
    }
    let centered = center(x);
    let denom = match norm {
        CovNormalization::MaximumLikelihood => n as f64,
        CovNormalization::Unbiased => (n - 1) as f64,
    };
    let covariance = centered.tr_mul(&centered) / denom;
    Ok(CovEstimate {
        method: CovMethod::Empirical,
        precision: stabilized_precision(&covariance),
        covariance,
        shrinkage: None,
    })
}

/// Maximum-likelihood sample covariance.
pub fn empirical_cov(x: &DMatrix<f64>) -> Result<CovEstimate> {
    empirical_cov_with(x, CovNormalization::MaximumLikelihood)
}

/// Ledoit-Wolf shrinkage toward the scaled identity `mu I`,
/// `mu = tr(S)/p`, with the closed-form optimal coefficient
/// `min(beta^2, delta^2) / delta^2` where `delta^2 = ||S - mu I||_F^2 / p`
/// and `beta^2 = (sum_t ||x_t||^4 - n ||S||_F^2) / (n^2 p)`.
pub fn ledoit_wolf(x: &DMatrix<f64>) -> Result<CovEstimate> {
    let n = x.nrows();
    let p = x.ncols();
    if n < 2 {
        return Err(Error::InvalidConfig(
            "covariance requires at least 2 samples".into(),
        ));
    }
    let centered = center(x);
    let s = centered.tr_mul(&centered) / n as f64;
    let mu = s.trace() / p as f64;

    let mut delta2 = 0.0;
    for i in 0..p {
        for j in 0..p {
            let target = if i == j { mu } else { 0.0 };
            delta2 += (s[(i, j)] - target).powi(2);
        }
    }
    delta2 /= p as f64;

    let s_frob2: f64 = s.iter().map(|v| v * v).sum();
    let fourth: f64 = (0..n)
        .map(|t| centered.row(t).norm_squared().powi(2))
        .sum();
    let beta_bar2 = (fourth - n as f64 * s_frob2) / (n as f64 * n as f64 * p as f64);
    let beta2 = beta_bar2.min(delta2).max(0.0);
    let shrinkage = if delta2 > 0.0 { beta2 / delta2 } else { 0.0 };

    let mut covariance = s * (1.0 - shrinkage);
    for i in 0..p {
        covariance[(i, i)] += shrinkage * mu;
    }
    Ok(CovEstimate {
        method: CovMethod::LedoitWolf,
        precision: stabilized_precision(&covariance),
        covariance,
        shrinkage: Some(shrinkage),
    })
}

/// Elementwise root mean squared difference over all entries.
pub fn rmse_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rmse_matrix: shape mismatch");
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
    (sum / (a.nrows() * a.ncols()) as f64).sqrt()
}

/// Per-method RMSE across seeds.
#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: CovMethod,
    pub covariance_rmse: Vec<f64>,
    pub precision_rmse: Vec<f64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

impl MethodSummary {
    pub fn covariance_mean(&self) -> f64 {
        mean(&self.covariance_rmse)
    }

    pub fn covariance_std(&self) -> f64 {
        sample_std(&self.covariance_rmse)
    }

    pub fn precision_mean(&self) -> f64 {
        mean(&self.precision_rmse)
    }

    pub fn precision_std(&self) -> f64 {
        sample_std(&self.precision_rmse)
    }
}

/// Comparison outcome over a seed battery.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub methods: Vec<MethodSummary>,
    pub n_seeds: usize,
}

impl CompareReport {
    /// One row per method with means, standard deviations, and the per-seed
    /// values joined by `;`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(
            w,
            "method,covariance_rmse_mean,covariance_rmse_std,precision_rmse_mean,\
             precision_rmse_std,covariance_rmse_seeds,precision_rmse_seeds"
        )?;
        for m in &self.methods {
            let join = |v: &[f64]| {
                v.iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(";")
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                m.method.name(),
                m.covariance_mean(),
                m.covariance_std(),
                m.precision_mean(),
                m.precision_std(),
                join(&m.covariance_rmse),
                join(&m.precision_rmse),
            )?;
        }
        Ok(())
    }
}

/// Stacks all species blocks of one condition into a samples-by-features
/// matrix (species blocks side by side), cast to `f64`.
pub fn stack_condition_counts(ds: &CountDataset, k: usize) -> DMatrix<f64> {
    let i_k = ds.replicates()[k];
    let total: usize = ds.dims().iter().sum();
    let mut out = DMatrix::zeros(i_k, total);
    let mut offset = 0;
    for l in 0..ds.n_species() {
        let block = ds.counts(k, l);
        for i in 0..i_k {
            for j in 0..block.ncols() {
                out[(i, offset + j)] = block[(i, j)] as f64;
            }
        }
        offset += block.ncols();
    }
    out
}

/// True predictive covariance `blockdiag(A_l^{-1}) + signal` for a community
/// ground truth.
fn true_predictive_cov(signal: &DMatrix<f64>, dims: &[usize]) -> DMatrix<f64> {
    let mut cov = signal.clone();
    let mut offset = 0;
    for &d_l in dims {
        let a_inv = HessianBound::new(d_l).dense_inverse();
        for i in 0..d_l {
            for j in 0..d_l {
                cov[(offset + i, offset + j)] += a_inv[(i, j)];
            }
        }
        offset += d_l;
    }
    cov
}

/// Runs the covariance comparison on `n_seeds` fresh community realizations
/// (data seeds `cfg.seed + s`, fit seeds `opts.seed + s`). The proposed
/// model is fitted at the given rank.
pub fn compare_on_community(
    cfg: &CommunityConfig,
    n_seeds: usize,
    methods: &[CovMethod],
    rank: usize,
    opts: &FitOptions,
) -> Result<CompareReport> {
    if n_seeds == 0 {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods selected".into()));
    }

    struct SeedOutcome {
        per_method: Vec<(f64, f64)>,
    }

    let outcomes: Result<Vec<SeedOutcome>> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|s| {
            let data_cfg = CommunityConfig {
                seed: cfg.seed.wrapping_add(s),
                ..cfg.clone()
            };
            let (data, truth) = simulate_community(&data_cfg)?;
            let signal_truth = &truth.true_cov[0];
            let predictive_truth = true_predictive_cov(signal_truth, data.dims());
            let truth_precision = linalg::cholesky_with_jitter(&predictive_truth, 1e-8)?.inverse();

            let standardized = standardize(&stack_condition_counts(&data, 0))?;
            let mut per_method = Vec::with_capacity(methods.len());
            for method in methods {
                let (cov_est, prec_est) = match method {
                    CovMethod::Empirical => {
                        let est = empirical_cov(&standardized.data)?;
                        (est.covariance.clone(), est.precision)
                    }
                    CovMethod::LedoitWolf => {
                        let est = ledoit_wolf(&standardized.data)?;
                        (est.covariance.clone(), est.precision)
                    }
                    CovMethod::Proposed => {
                        let fit_opts = FitOptions {
                            seed: opts.seed.wrapping_add(s),
                            ..opts.clone()
                        };
                        let model = fit(&data, rank, &fit_opts)?;
                        let cov = low_rank_covariance(&model.params, 0)?;
                        let predictive = inter_covariance(&model.params, 0)?.covariance;
                        let prec = stabilized_precision(&predictive);
                        (cov, prec)
                    }
                };
                let cov_rmse = rmse_matrix(&cov_est, signal_truth);
                let prec_rmse = match prec_est {
                    Some(p) => rmse_matrix(&p, &truth_precision),
                    None => f64::NAN,
                };
                per_method.push((cov_rmse, prec_rmse));
            }
            Ok(SeedOutcome { per_method })
        })
        .collect();
    let outcomes = outcomes?;

    let methods = methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| MethodSummary {
            method,
            covariance_rmse: outcomes.iter().map(|o| o.per_method[mi].0).collect(),
            precision_rmse: outcomes.iter().map(|o| o.per_method[mi].1).collect(),
        })
        .collect();
    Ok(CompareReport {
        methods,
        n_seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    fn random_matrix(rng: &mut ChaCha20Rng, n: usize, p: usize, std: f64) -> DMatrix<f64> {
        let normal = Normal::new(0.0, std).unwrap();
        DMatrix::from_fn(n, p, |_, _| normal.sample(rng))
    }

    #[test]
    fn standardize_simple_column() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let out = standardize(&x).unwrap();
        // ML std of [-1, 1] is 1, so the z-scores are exactly [-1, 1].
        assert_relative_eq!(out.data[(0, 0)], -1.0, epsilon = 1e-12);
        assert_relative_eq!(out.data[(1, 0)], 1.0, epsilon = 1e-12);
        assert!(out.constant_columns.is_empty());
    }

    #[test]
    fn standardize_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = random_matrix(&mut rng, 20, 4, 3.0);
        let once = standardize(&x).unwrap().data;
        let twice = standardize(&once).unwrap().data;
        assert_relative_eq!(once, twice, epsilon = 1e-12);
    }

    #[test]
    fn standardize_flags_constant_columns() {
        let x = DMatrix::from_row_slice(3, 2, &[5.0, 1.0, 5.0, 2.0, 5.0, 3.0]);
        let out = standardize(&x).unwrap();
        assert_eq!(out.constant_columns, vec![0]);
        for i in 0..3 {
            assert_eq!(out.data[(i, 0)], 0.0);
        }
    }

    #[test]
    fn standardize_requires_two_samples() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(standardize(&x).is_err());
    }

    #[test]
    fn empirical_cov_hand_computed() {
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]);
        let est = empirical_cov(&x).unwrap();
        assert_relative_eq!(est.covariance[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(est.covariance[(0, 1)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(est.covariance[(1, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn empirical_cov_single_feature_is_variance() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let est = empirical_cov(&x).unwrap();
        assert_relative_eq!(est.covariance[(0, 0)], 1.25, epsilon = 1e-12);
        let unbiased = empirical_cov_with(&x, CovNormalization::Unbiased).unwrap();
        assert_relative_eq!(unbiased.covariance[(0, 0)], 5.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn ledoit_wolf_vanishes_with_many_samples() {
        // Anisotropic data keeps the identity-target mismatch bounded away
        // from zero, so the coefficient decays like 1/n.
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut x = random_matrix(&mut rng, 2000, 3, 1.0);
        for i in 0..x.nrows() {
            x[(i, 1)] *= 2.0;
            x[(i, 2)] *= 3.0;
        }
        let est = ledoit_wolf(&x).unwrap();
        let shrinkage = est.shrinkage.unwrap();
        assert!((0.0..=1.0).contains(&shrinkage));
        assert!(shrinkage < 0.05, "shrinkage {shrinkage}");
        let emp = empirical_cov(&x).unwrap();
        assert!(rmse_matrix(&est.covariance, &emp.covariance) < 0.05);
    }

    #[test]
    fn ledoit_wolf_saturates_with_tiny_samples() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 3, 50, 1.0);
        let est = ledoit_wolf(&x).unwrap();
        let shrinkage = est.shrinkage.unwrap();
        assert!(shrinkage > 0.25, "shrinkage {shrinkage}");
        assert!(shrinkage <= 1.0);
        let mu = empirical_cov(&x).unwrap().covariance.trace() / 50.0;
        let target = DMatrix::<f64>::identity(50, 50) * mu;
        // The estimate is the convex combination, so its distance to the
        // target contracts by exactly (1 - shrinkage).
        let emp_dist = rmse_matrix(&empirical_cov(&x).unwrap().covariance, &target);
        assert_relative_eq!(
            rmse_matrix(&est.covariance, &target),
            (1.0 - shrinkage) * emp_dist,
            max_relative = 1e-10
        );
    }

    #[test]
    fn ledoit_wolf_two_samples_is_degenerate() {
        // With n = 2, centering makes both outer products identical, so the
        // dispersion estimate (and hence the coefficient) is exactly zero.
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 2, 50, 1.0);
        let est = ledoit_wolf(&x).unwrap();
        assert!(est.shrinkage.unwrap().abs() < 1e-10);
    }

    #[test]
    fn ledoit_wolf_eigenvalues_are_convex_combinations() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 15, 6, 2.0);
        let emp = empirical_cov(&x).unwrap().covariance;
        let lw = ledoit_wolf(&x).unwrap().covariance;
        let mu = emp.trace() / 6.0;
        let emp_eigs = emp.symmetric_eigen().eigenvalues;
        let lo = emp_eigs.min().min(mu) - 1e-10;
        let hi = emp_eigs.max().max(mu) + 1e-10;
        for v in lw.symmetric_eigen().eigenvalues.iter() {
            assert!((lo..=hi).contains(v), "eigenvalue {v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn estimators_are_permutation_equivariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 25, 4, 1.5);
        let perm = [2usize, 0, 3, 1];
        let xp = DMatrix::from_fn(25, 4, |i, j| x[(i, perm[j])]);
        for f in [empirical_cov, ledoit_wolf] {
            let c = f(&x).unwrap().covariance;
            let cp = f(&xp).unwrap().covariance;
            for i in 0..4 {
                for j in 0..4 {
                    assert_relative_eq!(cp[(i, j)], c[(perm[i], perm[j])], epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn rmse_matrix_basics() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rmse_matrix(&a, &a), 0.0);
        let b = a.map(|v| v + 1.0);
        assert_relative_eq!(rmse_matrix(&a, &b), 1.0, epsilon = 1e-12);
        // Homogeneity: scaling both inputs scales the output.
        let a3 = &a * 3.0;
        let b3 = &b * 3.0;
        assert_relative_eq!(rmse_matrix(&a3, &b3), 3.0, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn rmse_matrix_rejects_shape_mismatch() {
        let a = DMatrix::<f64>::zeros(2, 2);
        let b = DMatrix::<f64>::zeros(2, 3);
        rmse_matrix(&a, &b);
    }

    #[test]
    fn comparison_harness_runs_all_methods() {
        let cfg = CommunityConfig {
            d_z: 2,
            dims: vec![4, 3],
            replicates: 30,
            poisson_rate: 100.0,
            seed: 10,
            ..Default::default()
        };
        let opts = FitOptions {
            max_outer_iters: 60,
            ..Default::default()
        };
        let report = compare_on_community(
            &cfg,
            2,
            &[CovMethod::Empirical, CovMethod::LedoitWolf, CovMethod::Proposed],
            2,
            &opts,
        )
        .unwrap();
        assert_eq!(report.methods.len(), 3);
        for m in &report.methods {
            assert_eq!(m.covariance_rmse.len(), 2);
            assert!(m.covariance_mean().is_finite());
            assert!(m.precision_mean().is_finite());
        }
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
    }
}
