//! Model-predicted density and downstream analyses.
//!
//! The quadratic bound turns each species' likelihood into a Gaussian in the
//! transformed sample `x~ = A^{-1}(b + x)`, so marginalizing the latent gives
//! a Gaussian predictive density whose covariance is `A^{-1} + Theta Sigma
//! Theta'` per species (intra scope) or, with species stacked,
//! `blockdiag(A_l^{-1}) + stacked(Theta) Sigma stacked(Theta)'` (inter
//! scope). Converting to correlations and thresholding yields correlation
//! networks; softmax of the predicted mean gives per-species composition
//! distributions compared via Hellinger distance.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::bound::{softmax, HessianBound};
use crate::inference::ModelParams;
use crate::{Error, Result};

/// Which block of the predictive covariance a [`MarginalGaussian`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovScope {
    Intra { condition: usize, species: usize },
    Inter { condition: usize },
}

/// Gaussian predictive density over transformed counts.
#[derive(Debug, Clone)]
pub struct MarginalGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub scope: CovScope,
}

/// Transformed sample `x~ = A^{-1}(b + x)`, the coordinates in which the
/// bounded likelihood is Gaussian.
pub fn transform_sample(x: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    assert_eq!(x.len(), b.len(), "transform_sample: length mismatch");
    HessianBound::new(x.len()).apply_inverse(&(b + x))
}

fn check_condition(params: &ModelParams, k: usize) -> Result<()> {
    if k >= params.conditions.len() {
        return Err(Error::InvalidConfig(format!(
            "unknown condition {k} ({} conditions)",
            params.conditions.len()
        )));
    }
    Ok(())
}

/// Predictive density of one species in one condition:
/// mean `Theta mu`, covariance `A^{-1} + Theta Sigma Theta'`.
pub fn intra_covariance(params: &ModelParams, k: usize, l: usize) -> Result<MarginalGaussian> {
    check_condition(params, k)?;
    let cond = &params.conditions[k];
    if l >= cond.theta.len() {
        return Err(Error::InvalidConfig(format!(
            "unknown species {l} ({} species)",
            cond.theta.len()
        )));
    }
    let theta = &cond.theta[l];
    let a_inv = HessianBound::new(theta.nrows()).dense_inverse();
    let covariance = a_inv + theta * &cond.sigma * theta.transpose();
    Ok(MarginalGaussian {
        mean: theta * &cond.mu,
        covariance,
        scope: CovScope::Intra {
            condition: k,
            species: l,
        },
    })
}

/// Predictive density over all species stacked: block-diagonal `A_l^{-1}`
/// plus the full low-rank term. The (l, m) off-diagonal block is exactly
/// `Theta_l Sigma Theta_m'`.
pub fn inter_covariance(params: &ModelParams, k: usize) -> Result<MarginalGaussian> {
    check_condition(params, k)?;
    let cond = &params.conditions[k];
    let stacked = crate::simulate::stack_loadings(&cond.theta);
    let mut covariance = &stacked * &cond.sigma * stacked.transpose();
    let mut offset = 0;
    for theta in &cond.theta {
        let d_l = theta.nrows();
        // Add the block-diagonal A_l^{-1} = 2 (I + 11').
        for i in 0..d_l {
            for j in 0..d_l {
                covariance[(offset + i, offset + j)] += if i == j { 4.0 } else { 2.0 };
            }
        }
        offset += d_l;
    }
    Ok(MarginalGaussian {
        mean: &stacked * &cond.mu,
        covariance,
        scope: CovScope::Inter { condition: k },
    })
}

/// The low-rank signal part `stacked(Theta) Sigma stacked(Theta)'` of the
/// inter-species covariance, the model's estimate of the generative signal
/// covariance.
pub fn low_rank_covariance(params: &ModelParams, k: usize) -> Result<DMatrix<f64>> {
    check_condition(params, k)?;
    let cond = &params.conditions[k];
    let stacked = crate::simulate::stack_loadings(&cond.theta);
    Ok(&stacked * &cond.sigma * stacked.transpose())
}

/// `diag(C)^{-1/2} C diag(C)^{-1/2}`: unit diagonal, entries in [-1, 1].
pub fn to_correlation(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(Error::InvalidConfig("correlation of non-square matrix".into()));
    }
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let v = c[(i, i)];
        // Negated so NaN diagonals are also rejected.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(v > 0.0) {
            return Err(Error::Numerical(format!(
                "nonpositive diagonal entry {v} at {i}"
            )));
        }
        inv_std.push(1.0 / v.sqrt());
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            c[(i, j)] * inv_std[i] * inv_std[j]
        }
    }))
}

/// Correlation network: vertices are features, edges are correlations at or
/// above the threshold (in magnitude unless `signed`).
#[derive(Debug, Clone)]
pub struct CorrelationNetwork {
    pub labels: Vec<String>,
    /// Edges `(i, j, correlation)` with `i < j`.
    pub edges: Vec<(usize, usize, f64)>,
    pub degrees: Vec<usize>,
    pub threshold: f64,
    pub signed: bool,
}

impl CorrelationNetwork {
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.edges.iter().any(|&(x, y, _)| (x, y) == (a, b))
    }

    /// Edge list CSV: `vertex_a,vertex_b,correlation`.
    pub fn write_edges_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "vertex_a,vertex_b,correlation")?;
        for &(i, j, corr) in &self.edges {
            writeln!(w, "{},{},{}", self.labels[i], self.labels[j], corr)?;
        }
        Ok(())
    }

    /// Degree CSV: `vertex,degree`.
    pub fn write_degrees_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "vertex,degree")?;
        for (label, degree) in self.labels.iter().zip(&self.degrees) {
            writeln!(w, "{label},{degree}")?;
        }
        Ok(())
    }
}

/// Thresholds a correlation matrix into a network. Requires a square
/// symmetric matrix with unit diagonal and `0 < tau <= 1`; edge `(i, j)`
/// exists iff `|corr_ij| >= tau` (or `corr_ij >= tau` when `signed`).
pub fn threshold_network(
    corr: &DMatrix<f64>,
    tau: f64,
    labels: &[String],
    signed: bool,
) -> Result<CorrelationNetwork> {
    let n = corr.nrows();
    if corr.ncols() != n || labels.len() != n {
        return Err(Error::InvalidConfig(
            "correlation matrix and labels must agree in size".into(),
        ));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold {tau} outside (0, 1]"
        )));
    }
    for i in 0..n {
        if (corr[(i, i)] - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidConfig(format!(
                "diagonal entry {} at {i} is not 1",
                corr[(i, i)]
            )));
        }
        for j in (i + 1)..n {
            if (corr[(i, j)] - corr[(j, i)]).abs() > 1e-8 {
                return Err(Error::InvalidConfig(format!(
                    "correlation matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut edges = Vec::new();
    let mut degrees = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = corr[(i, j)];
            let hit = if signed { v >= tau } else { v.abs() >= tau };
            if hit {
                edges.push((i, j, v));
                degrees[i] += 1;
                degrees[j] += 1;
            }
        }
    }
    Ok(CorrelationNetwork {
        labels: labels.to_vec(),
        edges,
        degrees,
        threshold: tau,
        signed,
    })
}

/// One vertex's degrees in two networks and their signed difference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeDiffEntry {
    pub label: String,
    pub degree_a: usize,
    pub degree_b: usize,
    /// `degree_b - degree_a`.
    pub diff: i64,
}

/// Per-vertex degree differences, sorted by decreasing difference, plus the
/// increase/decrease asymmetry counts.
#[derive(Debug, Clone)]
pub struct DegreeDiffReport {
    pub entries: Vec<DegreeDiffEntry>,
    pub increased: usize,
    pub decreased: usize,
    pub unchanged: usize,
}

impl DegreeDiffReport {
    /// CSV: `vertex,degree_a,degree_b,diff`, sorted by decreasing diff.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "vertex,degree_a,degree_b,diff")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{}", e.label, e.degree_a, e.degree_b, e.diff)?;
        }
        Ok(())
    }
}

/// Compares vertex degrees of two networks over the same vertex set;
/// differences are `degree_b - degree_a`.
pub fn degree_difference(
    net_a: &CorrelationNetwork,
    net_b: &CorrelationNetwork,
) -> Result<DegreeDiffReport> {
    if net_a.labels.len() != net_b.labels.len() {
        return Err(Error::InvalidConfig(
            "networks have different vertex counts".into(),
        ));
    }
    let index_b: HashMap<&str, usize> = net_b
        .labels
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut entries = Vec::with_capacity(net_a.labels.len());
    for (ia, label) in net_a.labels.iter().enumerate() {
        let ib = *index_b.get(label.as_str()).ok_or_else(|| {
            Error::InvalidConfig(format!("vertex '{label}' missing from second network"))
        })?;
        let degree_a = net_a.degrees[ia];
        let degree_b = net_b.degrees[ib];
        entries.push(DegreeDiffEntry {
            label: label.clone(),
            degree_a,
            degree_b,
            diff: degree_b as i64 - degree_a as i64,
        });
    }
    entries.sort_by(|a, b| b.diff.cmp(&a.diff).then(a.label.cmp(&b.label)));
    let increased = entries.iter().filter(|e| e.diff > 0).count();
    let decreased = entries.iter().filter(|e| e.diff < 0).count();
    let unchanged = entries.len() - increased - decreased;
    Ok(DegreeDiffReport {
        entries,
        increased,
        decreased,
        unchanged,
    })
}

/// Composition distribution of species `l` in condition `k`:
/// `softmax(Theta mu)`.
pub fn composition_distribution(params: &ModelParams, k: usize, l: usize) -> Result<DVector<f64>> {
    check_condition(params, k)?;
    let cond = &params.conditions[k];
    if l >= cond.theta.len() {
        return Err(Error::InvalidConfig(format!(
            "unknown species {l} ({} species)",
            cond.theta.len()
        )));
    }
    Ok(softmax(&(&cond.theta[l] * &cond.mu)))
}

/// Hellinger distance `sqrt(1 - sum_d sqrt(p_d q_d))`, in [0, 1].
pub fn hellinger(p: &DVector<f64>, q: &DVector<f64>) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidConfig(
            "hellinger: probability vectors of different lengths".into(),
        ));
    }
    for v in p.iter().chain(q.iter()) {
        if *v < 0.0 || !v.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "hellinger: invalid probability entry {v}"
            )));
        }
    }
    for (name, vec) in [("p", p), ("q", q)] {
        if (vec.sum() - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidConfig(format!(
                "hellinger: {name} sums to {}, expected 1",
                vec.sum()
            )));
        }
    }
    let bc: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a * b).sqrt()).sum();
    Ok((1.0 - bc).max(0.0).sqrt().clamp(0.0, 1.0))
}

/// Row-major matrix CSV with a header of labels.
pub fn write_matrix_csv<W: Write>(
    w: &mut W,
    labels: &[String],
    m: &DMatrix<f64>,
) -> std::io::Result<()> {
    writeln!(w, "{}", labels.join(","))?;
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
