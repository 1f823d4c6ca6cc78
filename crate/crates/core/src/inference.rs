//! Variational EM for the multinomial-Gaussian latent variable model.
//!
//! Conditions are statistically independent, so the engine fits one parameter
//! block per condition while tracking a single bound-substituted evidence
//! lower bound (ELBO) across all of them. Each outer iteration is exact block
//! coordinate ascent:
//!
//! * E-step, per sample: posterior covariance
//!   `S = [Sigma^{-1} + sum_l N_l Theta_l' A_l Theta_l]^{-1}`,
//!   posterior mean `m = S [Sigma^{-1} mu + sum_l Theta_l' (x_l + N_l b_l)]`,
//!   and expansion point `Phi_l = Theta_l m`, iterated to a fixed point. The
//!   precision does not depend on `Phi`, so `S` is computed once per call;
//!   expansion points are warm-started across outer iterations.
//! * M-step, per condition:
//!   `Theta_l = A_l^{-1} [sum_i (x + N b) m'] [sum_i N (m m' + S)]^{-1}`,
//!   `mu = mean(m_i)`, `Sigma = mean((m_i - mu)(m_i - mu)' + S_i)`.
//!
//! Every step maximizes the same objective, so the ELBO trace is
//! non-decreasing up to floating-point noise. The multinomial normalization
//! constant is omitted from the ELBO: it is constant in the parameters and
//! the posteriors, so traces, convergence checks, and BIC comparisons are
//! unaffected, but reported values are comparable only within this
//! convention.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bound::HessianBound;
use crate::data::{CountDataset, DatasetFingerprint};
use crate::linalg;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Parameters of one condition: prior mean, prior covariance, and one loading
/// matrix (`d_l x d_z`) per species.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionParams {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub theta: Vec<DMatrix<f64>>,
}

/// All model parameters; conditions are independent blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d_z: usize,
    pub conditions: Vec<ConditionParams>,
}

impl ModelParams {
    /// Seeded initialization: `mu = 0`, `Sigma = I`, loading entries i.i.d.
    /// Gaussian with standard deviation `0.1 / sqrt(d_z)`, drawn from a
    /// ChaCha20 stream in (condition, species, row, column) order.
    pub fn init(dims: &[usize], n_conditions: usize, d_z: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1 / (d_z as f64).sqrt()).unwrap();
        let conditions = (0..n_conditions)
            .map(|_| {
                let theta = dims
                    .iter()
                    .map(|&d_l| {
                        let mut t = DMatrix::zeros(d_l, d_z);
                        for i in 0..d_l {
                            for j in 0..d_z {
                                t[(i, j)] = normal.sample(&mut rng);
                            }
                        }
                        t
                    })
                    .collect();
                ConditionParams {
                    mu: DVector::zeros(d_z),
                    sigma: DMatrix::identity(d_z, d_z),
                    theta,
                }
            })
            .collect();
        Self { d_z, conditions }
    }
}

/// Variational posterior of one sample: Gaussian moments plus the per-species
/// expansion points of the quadratic bound.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePosterior {
    pub m: DVector<f64>,
    pub s: DMatrix<f64>,
    pub phi: Vec<DVector<f64>>,
}

/// Posterior state for every sample, indexed `[condition][replicate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    pub samples: Vec<Vec<SamplePosterior>>,
}

impl PosteriorState {
    /// Posteriors at the prior: `m = mu`, `S = Sigma`, `Phi_l = Theta_l mu`.
    pub fn at_prior(params: &ModelParams, replicates: &[usize]) -> Self {
        let samples = params
            .conditions
            .iter()
            .zip(replicates)
            .map(|(cond, &i_k)| {
                let entry = SamplePosterior {
                    m: cond.mu.clone(),
                    s: cond.sigma.clone(),
                    phi: cond.theta.iter().map(|t| t * &cond.mu).collect(),
                };
                vec![entry; i_k]
            })
            .collect();
        Self { samples }
    }
}

/// Convergence trace and metadata from one fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Seconds, not persisted to disk.
    pub wall_time: f64,
    pub seed: u64,
    pub d_z: usize,
}

/// Loop controls for the EM fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_outer_iters: usize,
    /// Relative ELBO change below which the outer loop stops.
    pub rel_tol: f64,
    pub max_inner_iters: usize,
    /// Sup-norm change of the expansion points below which the inner
    /// fixed-point loop stops.
    pub inner_tol: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_outer_iters: 500,
            rel_tol: 1e-6,
            max_inner_iters: 50,
            inner_tol: 1e-6,
            jitter: 1e-8,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters < 1 || self.max_inner_iters < 1 {
            return Err(Error::InvalidConfig("iteration caps must be >= 1".into()));
        }
        for (name, v) in [
            ("rel_tol", self.rel_tol),
            ("inner_tol", self.inner_tol),
            ("jitter", self.jitter),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Labels and dataset digest carried alongside fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub condition_labels: Vec<String>,
    pub species_labels: Vec<String>,
    pub feature_labels: Vec<Vec<String>>,
    pub fingerprint: DatasetFingerprint,
}

impl ModelMeta {
    pub fn from_dataset(ds: &CountDataset) -> Self {
        Self {
            condition_labels: ds.condition_labels().to_vec(),
            species_labels: ds.species_labels().to_vec(),
            feature_labels: (0..ds.n_species())
                .map(|l| ds.feature_labels(l).to_vec())
                .collect(),
            fingerprint: ds.fingerprint(),
        }
    }
}

/// A fitted model: parameters, per-sample posteriors, and the fit report.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: ModelParams,
    pub posteriors: PosteriorState,
    pub report: FitReport,
    pub options: FitOptions,
    pub meta: ModelMeta,
}

impl FittedModel {
    /// The persistable subset (posteriors are recomputable from data and are
    /// not stored).
    pub fn saved(&self) -> SavedModel {
        SavedModel {
            params: self.params.clone(),
            report: self.report.clone(),
            options: self.options.clone(),
            meta: self.meta.clone(),
        }
    }
}

/// One sample's observed counts, one vector per species.
#[derive(Debug, Clone)]
pub struct SampleCounts {
    pub x: Vec<DVector<f64>>,
    pub totals: Vec<f64>,
}

impl SampleCounts {
    pub fn new(x: Vec<DVector<f64>>) -> Self {
        let totals = x.iter().map(|v| v.sum()).collect();
        Self { x, totals }
    }

    pub fn from_dataset(ds: &CountDataset, k: usize, i: usize) -> Self {
        Self::new((0..ds.n_species()).map(|l| ds.sample_vector(k, l, i)).collect())
    }
}

/// Per-condition quantities shared by every sample's E-step: the prior
/// factorization and the species Gram matrices `Theta' A Theta`.
struct ConditionContext {
    sigma_inv: DMatrix<f64>,
    sigma_inv_mu: DVector<f64>,
    gram: Vec<DMatrix<f64>>,
}

impl ConditionContext {
    fn new(cond: &ConditionParams, jitter: f64) -> Result<Self> {
        let sigma_chol = linalg::cholesky_with_jitter(&cond.sigma, jitter)?;
        let sigma_inv = sigma_chol.inverse();
        let sigma_inv_mu = &sigma_inv * &cond.mu;
        let gram = cond
            .theta
            .iter()
            .map(|t| HessianBound::new(t.nrows()).gram(t))
            .collect();
        Ok(Self {
            sigma_inv,
            sigma_inv_mu,
            gram,
        })
    }

    /// One sample's E-step: solve for `(S, m)` and iterate the expansion
    /// points to a fixed point.
    fn update_sample(
        &self,
        cond: &ConditionParams,
        x: &[DVector<f64>],
        totals: &[f64],
        previous: &SamplePosterior,
        opts: &FitOptions,
    ) -> Result<SamplePosterior> {
        let mut precision = self.sigma_inv.clone();
        for (l, g) in self.gram.iter().enumerate() {
            crate::linalg::add_scaled(&mut precision, g, totals[l]);
        }
        let prec_chol = linalg::cholesky_with_jitter(&precision, opts.jitter)?;
        let s = prec_chol.inverse();

        // The count contribution to the linear term is constant across the
        // inner loop; only the expansion-point term changes.
        let mut h_const = self.sigma_inv_mu.clone();
        for l in 0..x.len() {
            h_const += cond.theta[l].tr_mul(&x[l]);
        }

        let mut phi = previous.phi.clone();
        let mut m = previous.m.clone();
        for _ in 0..opts.max_inner_iters {
            let mut h = h_const.clone();
            for l in 0..x.len() {
                let (b, _) = crate::bound::bound_b_c(&phi[l]);
                h += cond.theta[l].tr_mul(&b) * totals[l];
            }
            m = prec_chol.solve(&h);
            let mut delta = 0.0f64;
            for l in 0..x.len() {
                let phi_new = &cond.theta[l] * &m;
                delta = delta.max((&phi_new - &phi[l]).amax());
                phi[l] = phi_new;
            }
            if delta < opts.inner_tol {
                break;
            }
        }
        Ok(SamplePosterior { m, s, phi })
    }
}

/// E-step for a single sample of condition `k`, starting from `state` (whose
/// expansion points are warm-started) and returning the updated posterior.
pub fn e_step_sample(
    params: &ModelParams,
    k: usize,
    sample: &SampleCounts,
    state: &SamplePosterior,
    opts: &FitOptions,
) -> Result<SamplePosterior> {
    opts.validate()?;
    let cond = params
        .conditions
        .get(k)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown condition {k}")))?;
    if sample.x.len() != cond.theta.len() {
        return Err(Error::InvalidConfig(format!(
            "sample has {} species blocks, model has {}",
            sample.x.len(),
            cond.theta.len()
        )));
    }
    for (l, x) in sample.x.iter().enumerate() {
        if x.len() != cond.theta[l].nrows() {
            return Err(Error::InvalidConfig(format!(
                "species {l}: sample dimension {} does not match loading rows {}",
                x.len(),
                cond.theta[l].nrows()
            )));
        }
    }
    let ctx = ConditionContext::new(cond, opts.jitter)?;
    ctx.update_sample(cond, &sample.x, &sample.totals, state, opts)
}

fn m_step_cast(
    posteriors: &[SamplePosterior],
    x: &[Vec<DVector<f64>>],
    totals: &[Vec<f64>],
    d_z: usize,
) -> Result<ConditionParams> {
    let i_k = posteriors.len();
    assert!(i_k > 0 && x.len() == i_k);
    let n_species = x[0].len();

    // Prior mean and covariance from the posterior moments.
    let mut mu = DVector::zeros(d_z);
    for post in posteriors {
        mu += &post.m;
    }
    mu /= i_k as f64;
    let mut sigma = DMatrix::zeros(d_z, d_z);
    for post in posteriors {
        let diff = &post.m - &mu;
        sigma.ger(1.0 / i_k as f64, &diff, &diff, 1.0);
        crate::linalg::add_scaled(&mut sigma, &post.s, 1.0 / i_k as f64);
    }
    linalg::symmetrize(&mut sigma);

    // Loading update per species.
    let mut theta = Vec::with_capacity(n_species);
    for l in 0..n_species {
        let d_l = x[0][l].len();
        let a = HessianBound::new(d_l);
        let mut accum = DMatrix::<f64>::zeros(d_l, d_z);
        let mut second = DMatrix::<f64>::zeros(d_z, d_z);
        for (i, post) in posteriors.iter().enumerate() {
            let n = totals[i][l];
            let (b, _) = crate::bound::bound_b_c(&post.phi[l]);
            accum.ger(1.0, &x[i][l], &post.m, 1.0);
            accum.ger(n, &b, &post.m, 1.0);
            second.ger(n, &post.m, &post.m, 1.0);
            crate::linalg::add_scaled(&mut second, &post.s, n);
        }
        linalg::symmetrize(&mut second);
        let chol = nalgebra::Cholesky::new(second).ok_or_else(|| {
            Error::Numerical(format!(
                "degenerate posteriors: singular second-moment matrix for species {l}"
            ))
        })?;
        // Theta = A^{-1} accum second^{-1}; solve on the transpose since
        // `second` is symmetric.
        let solved = chol.solve(&accum.transpose()); // d_z x d_l
        theta.push(a.apply_inverse_matrix(&solved.transpose()));
    }

    Ok(ConditionParams { mu, sigma, theta })
}

/// M-step for condition `k` from the posteriors of all its samples.
pub fn m_step(
    posteriors: &[SamplePosterior],
    data: &CountDataset,
    k: usize,
) -> Result<ConditionParams> {
    if k >= data.n_conditions() {
        return Err(Error::InvalidConfig(format!("unknown condition {k}")));
    }
    if posteriors.is_empty() || posteriors.len() != data.replicates()[k] {
        return Err(Error::InvalidConfig(format!(
            "{} posteriors for condition {k} with {} replicates",
            posteriors.len(),
            data.replicates()[k]
        )));
    }
    let d_z = posteriors[0].m.len();
    let (x, totals) = cast_condition(data, k);
    m_step_cast(posteriors, &x, &totals, d_z)
}

/// Per-condition counts cast to `f64`: `[replicate][species]` vectors and
/// their totals.
type ConditionCasts = (Vec<Vec<DVector<f64>>>, Vec<Vec<f64>>);

fn cast_condition(data: &CountDataset, k: usize) -> ConditionCasts {
    let i_k = data.replicates()[k];
    let mut x = Vec::with_capacity(i_k);
    let mut totals = Vec::with_capacity(i_k);
    for i in 0..i_k {
        let sample = SampleCounts::from_dataset(data, k, i);
        x.push(sample.x);
        totals.push(sample.totals);
    }
    (x, totals)
}

fn elbo_condition_cast(
    cond: &ConditionParams,
    posteriors: &[SamplePosterior],
    x: &[Vec<DVector<f64>>],
    totals: &[Vec<f64>],
) -> Result<f64> {
    let d_z = cond.mu.len();
    let sigma_chol = nalgebra::Cholesky::new(cond.sigma.clone())
        .ok_or_else(|| Error::Numerical("prior covariance not positive definite".into()))?;
    let sigma_inv = sigma_chol.inverse();
    let log_det_sigma = linalg::log_det(&sigma_chol);
    let gram: Vec<DMatrix<f64>> = cond
        .theta
        .iter()
        .map(|t| HessianBound::new(t.nrows()).gram(t))
        .collect();

    let mut total = 0.0;
    for (i, post) in posteriors.iter().enumerate() {
        // E_q[log p(z)].
        let diff = &post.m - &cond.mu;
        let trace_term = sigma_inv.dot(&post.s);
        let quad = diff.dot(&(&sigma_inv * &diff));
        total += -0.5 * (trace_term + quad + log_det_sigma + d_z as f64 * LN_2PI);

        // Gaussian entropy of the posterior.
        let s_chol = nalgebra::Cholesky::new(post.s.clone())
            .ok_or_else(|| Error::Numerical("posterior covariance not positive definite".into()))?;
        total += 0.5 * (d_z as f64 * (LN_2PI + 1.0) + linalg::log_det(&s_chol));

        // Bounded multinomial likelihood per species.
        for l in 0..cond.theta.len() {
            let n = totals[i][l];
            let eta_bar = &cond.theta[l] * &post.m;
            let (b, c) = crate::bound::bound_b_c(&post.phi[l]);
            let quad_mean = post.m.dot(&(&gram[l] * &post.m));
            let quad_cov = gram[l].dot(&post.s);
            total += x[i][l].dot(&eta_bar)
                - n * (0.5 * (quad_mean + quad_cov) - b.dot(&eta_bar) + c);
        }
    }
    Ok(total)
}

/// Bound-substituted ELBO per condition.
pub fn elbo_by_condition(
    params: &ModelParams,
    posteriors: &PosteriorState,
    data: &CountDataset,
) -> Result<Vec<f64>> {
    (0..data.n_conditions())
        .map(|k| {
            let (x, totals) = cast_condition(data, k);
            elbo_condition_cast(&params.conditions[k], &posteriors.samples[k], &x, &totals)
        })
        .collect()
}

/// Bound-substituted ELBO summed over all conditions and samples.
pub fn elbo(params: &ModelParams, posteriors: &PosteriorState, data: &CountDataset) -> Result<f64> {
    Ok(elbo_by_condition(params, posteriors, data)?.iter().sum())
}

/// Fits the model with latent dimension `d_z` by variational EM.
///
/// Deterministic given `(data, d_z, opts.seed)`: two runs produce bitwise
/// identical traces and parameters. The returned posteriors are refreshed
/// with one extra E-step under the final parameters; its ELBO is appended to
/// the trace, so the trace has one more entry than `iterations`.
pub fn fit(data: &CountDataset, d_z: usize, opts: &FitOptions) -> Result<FittedModel> {
    opts.validate()?;
    if d_z == 0 {
        return Err(Error::InvalidConfig("latent dimension must be >= 1".into()));
    }
    let total_dim: usize = data.dims().iter().sum();
    if d_z > total_dim {
        log::warn!("latent dimension {d_z} exceeds total feature dimension {total_dim}");
    }

    let start = Instant::now();
    let n_conditions = data.n_conditions();
    let mut params = ModelParams::init(data.dims(), n_conditions, d_z, opts.seed);
    let mut posteriors = PosteriorState::at_prior(&params, data.replicates());

    let casts: Vec<ConditionCasts> =
        (0..n_conditions).map(|k| cast_condition(data, k)).collect();

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_outer_iters {
        iterations += 1;
        for k in 0..n_conditions {
            let (x, totals) = &casts[k];
            em_sweep_condition(
                &mut params.conditions[k],
                &mut posteriors.samples[k],
                x,
                totals,
                d_z,
                opts,
            )?;
        }
        let mut value = 0.0;
        for k in 0..n_conditions {
            let (x, totals) = &casts[k];
            value += elbo_condition_cast(&params.conditions[k], &posteriors.samples[k], x, totals)?;
        }
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite ELBO at iteration {iterations}"
            )));
        }
        let done = trace
            .last()
            .is_some_and(|&prev| (value - prev).abs() <= opts.rel_tol * prev.abs());
        trace.push(value);
        if done {
            converged = true;
            break;
        }
    }

    // Refresh the posteriors under the final parameters so the returned
    // state is self-consistent (the loop ends on an M-step). A pure E-step
    // can only raise the bound, so the appended trace value keeps the trace
    // monotone.
    let mut refreshed_value = 0.0;
    for k in 0..n_conditions {
        let (x, totals) = &casts[k];
        e_step_condition(&params.conditions[k], &mut posteriors.samples[k], x, totals, opts)?;
        refreshed_value +=
            elbo_condition_cast(&params.conditions[k], &posteriors.samples[k], x, totals)?;
    }
    trace.push(refreshed_value);

    let report = FitReport {
        elbo_trace: trace,
        iterations,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
        seed: opts.seed,
        d_z,
    };
    Ok(FittedModel {
        params,
        posteriors,
        report,
        options: opts.clone(),
        meta: ModelMeta::from_dataset(data),
    })
}

/// E-step over all samples of one condition.
fn e_step_condition(
    cond: &ConditionParams,
    posteriors: &mut Vec<SamplePosterior>,
    x: &[Vec<DVector<f64>>],
    totals: &[Vec<f64>],
    opts: &FitOptions,
) -> Result<()> {
    let ctx = ConditionContext::new(cond, opts.jitter)?;
    let updated: Result<Vec<SamplePosterior>> = posteriors
        .par_iter()
        .enumerate()
        .map(|(i, prev)| ctx.update_sample(cond, &x[i], &totals[i], prev, opts))
        .collect();
    *posteriors = updated?;
    Ok(())
}

/// One EM sweep (E-step over all samples, then M-step) for one condition.
/// Shared by `fit` and the iteration-level complexity benchmark.
pub(crate) fn em_sweep_condition(
    cond: &mut ConditionParams,
    posteriors: &mut Vec<SamplePosterior>,
    x: &[Vec<DVector<f64>>],
    totals: &[Vec<f64>],
    d_z: usize,
    opts: &FitOptions,
) -> Result<()> {
    e_step_condition(cond, posteriors, x, totals, opts)?;
    *cond = m_step_cast(posteriors, x, totals, d_z)?;
    Ok(())
}

/// Median wall time in seconds of one EM iteration (E-step, M-step, and the
/// ELBO evaluation) at steady state: `warmup` sweeps run first, then
/// `trials` batches of `timed` sweeps are timed and the median per-iteration
/// time is returned. Used by the complexity measurements.
pub fn time_em_iteration(
    data: &CountDataset,
    d_z: usize,
    opts: &FitOptions,
    warmup: usize,
    timed: usize,
    trials: usize,
) -> Result<f64> {
    opts.validate()?;
    assert!(timed >= 1 && trials >= 1);
    let n_conditions = data.n_conditions();
    let mut params = ModelParams::init(data.dims(), n_conditions, d_z, opts.seed);
    let mut posteriors = PosteriorState::at_prior(&params, data.replicates());
    let casts: Vec<ConditionCasts> =
        (0..n_conditions).map(|k| cast_condition(data, k)).collect();

    let sweep = |params: &mut ModelParams, posteriors: &mut PosteriorState| -> Result<f64> {
        let mut value = 0.0;
        for k in 0..n_conditions {
            let (x, totals) = &casts[k];
            em_sweep_condition(
                &mut params.conditions[k],
                &mut posteriors.samples[k],
                x,
                totals,
                d_z,
                opts,
            )?;
            value += elbo_condition_cast(&params.conditions[k], &posteriors.samples[k], x, totals)?;
        }
        Ok(value)
    };

    for _ in 0..warmup {
        sweep(&mut params, &mut posteriors)?;
    }
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let start = Instant::now();
        for _ in 0..timed {
            sweep(&mut params, &mut posteriors)?;
        }
        samples.push(start.elapsed().as_secs_f64() / timed as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[samples.len() / 2])
}

/// Recomputes posteriors for `data` under fixed `params` (one E-step pass;
/// each sample's update runs its fixed point to convergence).
pub fn infer_posteriors(
    params: &ModelParams,
    data: &CountDataset,
    opts: &FitOptions,
) -> Result<PosteriorState> {
    opts.validate()?;
    let mut state = PosteriorState::at_prior(params, data.replicates());
    for k in 0..data.n_conditions() {
        let (x, totals) = cast_condition(data, k);
        e_step_condition(&params.conditions[k], &mut state.samples[k], &x, &totals, opts)?;
    }
    Ok(state)
}

/// Posterior means of condition `k`, one row per replicate.
pub fn get_embeddings(model: &FittedModel, k: usize) -> Result<DMatrix<f64>> {
    let samples = model
        .posteriors
        .samples
        .get(k)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown condition {k}")))?;
    let d_z = model.params.d_z;
    let mut out = DMatrix::zeros(samples.len(), d_z);
    for (i, post) in samples.iter().enumerate() {
        for j in 0..d_z {
            out[(i, j)] = post.m[j];
        }
    }
    Ok(out)
}

/// Fitted parameters and metadata as persisted to disk.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub params: ModelParams,
    pub report: FitReport,
    pub options: FitOptions,
    pub meta: ModelMeta,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    d_z: usize,
    conditions: Vec<ConditionFile>,
    species: Vec<SpeciesFile>,
    elbo_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    options: FitOptions,
    fingerprint: DatasetFingerprint,
}

#[derive(Serialize, Deserialize)]
struct ConditionFile {
    label: String,
    mu: Vec<f64>,
    /// Row-major `d_z x d_z`.
    sigma: Vec<f64>,
    /// Row-major `d_l x d_z`, one entry per species.
    theta: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SpeciesFile {
    label: String,
    dim: usize,
    feature_labels: Vec<String>,
}

const MODEL_FORMAT: &str = "fuselvm-model/1";

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

impl SavedModel {
    pub fn to_json(&self) -> Result<String> {
        let conditions = self
            .params
            .conditions
            .iter()
            .zip(&self.meta.condition_labels)
            .map(|(cond, label)| ConditionFile {
                label: label.clone(),
                mu: cond.mu.iter().copied().collect(),
                sigma: row_major(&cond.sigma),
                theta: cond.theta.iter().map(row_major).collect(),
            })
            .collect();
        let species = self
            .meta
            .species_labels
            .iter()
            .zip(&self.meta.feature_labels)
            .map(|(label, features)| SpeciesFile {
                label: label.clone(),
                dim: features.len(),
                feature_labels: features.clone(),
            })
            .collect();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            d_z: self.params.d_z,
            conditions,
            species,
            elbo_trace: self.report.elbo_trace.clone(),
            iterations: self.report.iterations,
            converged: self.report.converged,
            options: self.options.clone(),
            fingerprint: self.meta.fingerprint.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "unsupported model format '{}'",
                file.format
            )));
        }
        let d_z = file.d_z;
        let dims: Vec<usize> = file.species.iter().map(|s| s.dim).collect();
        let mut conditions = Vec::with_capacity(file.conditions.len());
        let mut condition_labels = Vec::with_capacity(file.conditions.len());
        for cond in &file.conditions {
            if cond.mu.len() != d_z || cond.sigma.len() != d_z * d_z {
                return Err(Error::InvalidConfig(
                    "model file has inconsistent latent dimensions".into(),
                ));
            }
            if cond.theta.len() != dims.len() {
                return Err(Error::InvalidConfig(
                    "model file has inconsistent species counts".into(),
                ));
            }
            let theta = cond
                .theta
                .iter()
                .zip(&dims)
                .map(|(flat, &d_l)| {
                    if flat.len() != d_l * d_z {
                        return Err(Error::InvalidConfig(
                            "model file has inconsistent loading shapes".into(),
                        ));
                    }
                    Ok(DMatrix::from_row_slice(d_l, d_z, flat))
                })
                .collect::<Result<Vec<_>>>()?;
            conditions.push(ConditionParams {
                mu: DVector::from_vec(cond.mu.clone()),
                sigma: DMatrix::from_row_slice(d_z, d_z, &cond.sigma),
                theta,
            });
            condition_labels.push(cond.label.clone());
        }
        let report = FitReport {
            elbo_trace: file.elbo_trace,
            iterations: file.iterations,
            converged: file.converged,
            wall_time: 0.0,
            seed: file.options.seed,
            d_z,
        };
        Ok(SavedModel {
            params: ModelParams { d_z, conditions },
            report,
            options: file.options,
            meta: ModelMeta {
                condition_labels,
                species_labels: file.species.iter().map(|s| s.label.clone()).collect(),
                feature_labels: file.species.into_iter().map(|s| s.feature_labels).collect(),
                fingerprint: file.fingerprint,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate_community, CommunityConfig};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn small_params(seed: u64) -> ModelParams {
        ModelParams::init(&[4, 3], 1, 2, seed)
    }

    fn zero_sample(dims: &[usize]) -> SampleCounts {
        SampleCounts::new(dims.iter().map(|&d| DVector::zeros(d)).collect())
    }

    #[test]
    fn e_step_with_zero_counts_recovers_prior() {
        let mut params = small_params(1);
        params.conditions[0].mu = DVector::from_vec(vec![0.3, -0.7]);
        params.conditions[0].sigma = DMatrix::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.8]);
        let state = PosteriorState::at_prior(&params, &[1]);
        let sample = zero_sample(&[4, 3]);
        let post =
            e_step_sample(&params, 0, &sample, &state.samples[0][0], &FitOptions::default())
                .unwrap();
        assert_relative_eq!(post.m, params.conditions[0].mu, epsilon = 1e-12);
        assert_relative_eq!(post.s, params.conditions[0].sigma, epsilon = 1e-10);
    }

    #[test]
    fn posterior_covariance_never_exceeds_prior() {
        // Sigma - S stays PSD: the data term only adds precision.
        let (data, _) = simulate_community(&CommunityConfig {
            dims: vec![6, 4],
            replicates: 8,
            poisson_rate: 60.0,
            ..CommunityConfig::default()
        })
        .unwrap();
        let model = fit(
            &data,
            2,
            &FitOptions {
                max_outer_iters: 20,
                ..Default::default()
            },
        )
        .unwrap();
        for (k, cond) in model.params.conditions.iter().enumerate() {
            for post in &model.posteriors.samples[k] {
                let diff = &cond.sigma - &post.s;
                let min_eig = diff.symmetric_eigen().eigenvalues.min();
                assert!(min_eig >= -1e-10, "prior dominance violated: {min_eig}");
            }
        }
    }

    #[test]
    fn m_step_with_identical_posteriors_recovers_moments() {
        let m_star = DVector::from_vec(vec![0.4, -0.2]);
        let s_star = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let data = crate::data::CountDataset::new(
            vec!["c0".into()],
            vec!["s0".into()],
            vec![vec!["a".into(), "b".into(), "c".into()]],
            vec![vec![DMatrix::from_row_slice(3, 3, &[1, 2, 3, 1, 2, 3, 1, 2, 3])]],
        )
        .unwrap();
        let posteriors: Vec<SamplePosterior> = (0..3)
            .map(|_| SamplePosterior {
                m: m_star.clone(),
                s: s_star.clone(),
                phi: vec![DVector::zeros(3)],
            })
            .collect();
        let cond = m_step(&posteriors, &data, 0).unwrap();
        assert_relative_eq!(cond.mu, m_star, epsilon = 1e-12);
        assert_relative_eq!(cond.sigma, s_star, epsilon = 1e-12);
    }

    #[test]
    fn m_step_single_sample_covariance_equals_posterior() {
        let data = crate::data::CountDataset::new(
            vec!["c0".into()],
            vec!["s0".into()],
            vec![vec!["a".into(), "b".into()]],
            vec![vec![DMatrix::from_row_slice(1, 2, &[3, 5])]],
        )
        .unwrap();
        let post = SamplePosterior {
            m: DVector::from_vec(vec![0.7]),
            s: DMatrix::from_row_slice(1, 1, &[0.25]),
            phi: vec![DVector::from_vec(vec![0.1, -0.1])],
        };
        let cond = m_step(std::slice::from_ref(&post), &data, 0).unwrap();
        assert_relative_eq!(cond.sigma, post.s, epsilon = 1e-14);
        assert_relative_eq!(cond.mu, post.m, epsilon = 1e-14);
    }

    #[test]
    fn m_step_rejects_degenerate_posteriors() {
        // All-zero totals make the second-moment matrix singular.
        let data = crate::data::CountDataset::new(
            vec!["c0".into()],
            vec!["s0".into()],
            vec![vec!["a".into(), "b".into()]],
            vec![vec![DMatrix::from_row_slice(2, 2, &[0, 0, 0, 0])]],
        )
        .unwrap();
        let posteriors: Vec<SamplePosterior> = (0..2)
            .map(|_| SamplePosterior {
                m: DVector::zeros(1),
                s: DMatrix::identity(1, 1),
                phi: vec![DVector::zeros(2)],
            })
            .collect();
        let err = m_step(&posteriors, &data, 0).unwrap_err().to_string();
        assert!(err.contains("degenerate"), "{err}");
    }

    #[test]
    fn elbo_is_zero_for_zero_data_at_prior() {
        // KL of identical Gaussians vanishes and every data term carries a
        // zero count factor.
        let params = small_params(3);
        let data = crate::data::CountDataset::new(
            vec!["c0".into()],
            vec!["s0".into(), "s1".into()],
            vec![
                vec!["a".into(), "b".into(), "c".into(), "d".into()],
                vec!["x".into(), "y".into(), "z".into()],
            ],
            vec![vec![DMatrix::zeros(2, 4), DMatrix::zeros(2, 3)]],
        )
        .unwrap();
        let posteriors = PosteriorState::at_prior(&params, &[2]);
        let value = elbo(&params, &posteriors, &data).unwrap();
        assert!(value.abs() < 1e-9, "expected 0, got {value}");
    }

    #[test]
    fn fit_rejects_zero_latent_dimension() {
        let (data, _) = simulate_community(&CommunityConfig {
            dims: vec![4],
            replicates: 4,
            poisson_rate: 20.0,
            ..CommunityConfig::default()
        })
        .unwrap();
        assert!(fit(&data, 0, &FitOptions::default()).is_err());
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let (data, _) = simulate_community(&CommunityConfig {
            dims: vec![5, 3],
            replicates: 10,
            poisson_rate: 40.0,
            seed: 9,
            ..CommunityConfig::default()
        })
        .unwrap();
        let opts = FitOptions {
            max_outer_iters: 30,
            seed: 42,
            ..Default::default()
        };
        let a = fit(&data, 2, &opts).unwrap();
        let b = fit(&data, 2, &opts).unwrap();
        assert_eq!(a.report.elbo_trace, b.report.elbo_trace);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn fit_trace_is_monotone_on_small_community() {
        let (data, _) = simulate_community(&CommunityConfig {
            dims: vec![6, 4],
            replicates: 15,
            poisson_rate: 80.0,
            seed: 4,
            ..CommunityConfig::default()
        })
        .unwrap();
        let model = fit(&data, 2, &FitOptions::default()).unwrap();
        let trace = &model.report.elbo_trace;
        for w in trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-8 * w[0].abs(),
                "ELBO decreased: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert!(model.report.converged);
    }

    #[test]
    fn embeddings_have_expected_shape_and_prior_fallback() {
        let mut params = small_params(5);
        params.conditions[0].mu = DVector::from_vec(vec![0.5, -1.0]);
        let data = crate::data::CountDataset::new(
            vec!["c0".into()],
            vec!["s0".into(), "s1".into()],
            vec![
                vec!["a".into(), "b".into(), "c".into(), "d".into()],
                vec!["x".into(), "y".into(), "z".into()],
            ],
            vec![vec![DMatrix::zeros(3, 4), DMatrix::zeros(3, 3)]],
        )
        .unwrap();
        let posteriors = infer_posteriors(&params, &data, &FitOptions::default()).unwrap();
        let model = FittedModel {
            params: params.clone(),
            posteriors,
            report: FitReport {
                elbo_trace: vec![],
                iterations: 0,
                converged: true,
                wall_time: 0.0,
                seed: 0,
                d_z: 2,
            },
            options: FitOptions::default(),
            meta: ModelMeta::from_dataset(&data),
        };
        let emb = get_embeddings(&model, 0).unwrap();
        assert_eq!((emb.nrows(), emb.ncols()), (3, 2));
        for i in 0..3 {
            assert_relative_eq!(emb[(i, 0)], 0.5, epsilon = 1e-12);
            assert_relative_eq!(emb[(i, 1)], -1.0, epsilon = 1e-12);
        }
        assert!(get_embeddings(&model, 1).is_err());
    }

    #[test]
    fn saved_model_roundtrips_through_json() {
        let (data, _) = simulate_community(&CommunityConfig {
            dims: vec![4, 3],
            replicates: 6,
            poisson_rate: 30.0,
            seed: 2,
            ..CommunityConfig::default()
        })
        .unwrap();
        let model = fit(
            &data,
            2,
            &FitOptions {
                max_outer_iters: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let saved = model.saved();
        let json = saved.to_json().unwrap();
        let loaded = SavedModel::from_json(&json).unwrap();
        assert_eq!(saved.params, loaded.params);
        assert_eq!(saved.meta, loaded.meta);
        assert_eq!(saved.report.elbo_trace, loaded.report.elbo_trace);
        // Serialization itself is deterministic.
        assert_eq!(json, loaded.to_json().unwrap());
    }
}
