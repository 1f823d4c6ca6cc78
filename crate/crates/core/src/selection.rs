//! BIC-penalized selection of the latent rank.
//!
//! Each candidate rank is fitted independently and scored by
//! `sum_k [ ELBO_k - 0.5 * dof * ln(I_k) ]`, the ELBO standing in for the
//! intractable log likelihood. The parameter count per condition is the full
//! free-parameter count of `{Theta_l}, mu, Sigma`:
//! `dof = d_z * sum_l d_l + d_z + d_z (d_z + 1) / 2`.

use std::io::Write;

use rayon::prelude::*;

use crate::data::CountDataset;
use crate::inference::{elbo_by_condition, fit, FitOptions, FittedModel};
use crate::{Error, Result};

/// Free parameters per condition at latent rank `d_z`: the loading blocks,
/// the prior mean, and the symmetric prior covariance.
pub fn dof(dims: &[usize], d_z: usize) -> usize {
    let loadings: usize = dims.iter().sum::<usize>() * d_z;
    loadings + d_z + d_z * (d_z + 1) / 2
}

/// BIC-penalized score of a fitted model:
/// `sum_k [ ELBO_k - 0.5 * dof * ln(I_k) ]`. Higher is better.
pub fn bic_score(model: &FittedModel, data: &CountDataset) -> Result<f64> {
    if model.meta.fingerprint != data.fingerprint() {
        return Err(Error::InvalidConfig(
            "model was fitted to a different dataset".into(),
        ));
    }
    let per_condition = elbo_by_condition(&model.params, &model.posteriors, data)?;
    let penalty_per_dof = dof(data.dims(), model.params.d_z) as f64;
    Ok(per_condition
        .iter()
        .zip(data.replicates())
        .map(|(l_k, &i_k)| l_k - 0.5 * penalty_per_dof * (i_k as f64).ln())
        .sum())
}

/// Outcome of one candidate rank in a sweep.
#[derive(Debug, Clone)]
pub struct RankSweepEntry {
    pub rank: usize,
    pub dof: usize,
    /// `None` when the fit failed; the failure is in `error`.
    pub score: Option<f64>,
    pub report: Option<crate::inference::FitReport>,
    pub error: Option<String>,
}

impl RankSweepEntry {
    pub fn elbo(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.elbo_trace.last().copied())
    }
}

/// Sweep outcomes plus the selected rank (argmax score, ties broken toward
/// the smaller rank).
#[derive(Debug, Clone)]
pub struct RankSweepResult {
    pub entries: Vec<RankSweepEntry>,
    pub selected: usize,
}

impl RankSweepResult {
    /// Selects from precomputed entries; fails if every fit failed.
    pub fn select(entries: Vec<RankSweepEntry>) -> Result<Self> {
        let mut best: Option<(usize, f64)> = None;
        for e in &entries {
            if let Some(score) = e.score {
                let better = match best {
                    None => true,
                    Some((rank, s)) => score > s || (score == s && e.rank < rank),
                };
                if better {
                    best = Some((e.rank, score));
                }
            }
        }
        let selected = best
            .ok_or_else(|| Error::Numerical("every candidate rank failed to fit".into()))?
            .0;
        Ok(Self { entries, selected })
    }

    /// Sweep CSV: `rank,elbo,dof,penalized_score,converged,iterations,wall_time`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "rank,elbo,dof,penalized_score,converged,iterations,wall_time")?;
        for e in &self.entries {
            let opt = |v: Option<String>| v.unwrap_or_default();
            let r = e.report.as_ref();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                e.rank,
                opt(e.elbo().map(|v| v.to_string())),
                e.dof,
                opt(e.score.map(|v| v.to_string())),
                opt(r.map(|r| r.converged.to_string())),
                opt(r.map(|r| r.iterations.to_string())),
                opt(r.map(|r| r.wall_time.to_string())),
            )?;
        }
        Ok(())
    }
}

/// Seed used for the fit at one candidate rank: `opts.seed + rank`.
pub fn rank_seed(base: u64, rank: usize) -> u64 {
    base.wrapping_add(rank as u64)
}

/// Fits every candidate rank (independently seeded, in parallel), scores
/// each by [`bic_score`], and selects the argmax. Individual fit failures
/// are recorded per rank; only an all-failure sweep is an error.
pub fn select_rank(
    data: &CountDataset,
    ranks: &[usize],
    opts: &FitOptions,
) -> Result<RankSweepResult> {
    if ranks.is_empty() {
        return Err(Error::InvalidConfig("empty rank list".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidConfig("candidate ranks must be >= 1".into()));
    }
    let entries: Vec<RankSweepEntry> = ranks
        .par_iter()
        .map(|&rank| {
            let rank_opts = FitOptions {
                seed: rank_seed(opts.seed, rank),
                ..opts.clone()
            };
            let rank_dof = dof(data.dims(), rank);
            match fit(data, rank, &rank_opts).and_then(|model| {
                let score = bic_score(&model, data)?;
                Ok((model, score))
            }) {
                Ok((model, score)) => RankSweepEntry {
                    rank,
                    dof: rank_dof,
                    score: Some(score),
                    report: Some(model.report),
                    error: None,
                },
                Err(err) => RankSweepEntry {
                    rank,
                    dof: rank_dof,
                    score: None,
                    report: None,
                    error: Some(err.to_string()),
                },
            }
        })
        .collect();
    RankSweepResult::select(entries)
}
