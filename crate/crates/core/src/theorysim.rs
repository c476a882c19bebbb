//! Numerical checks of the ensemble-accuracy and variance-partition results:
//! the Gaussian closed form, its K -> infinity ceiling, an exact
//! exchangeable-Bernoulli majority oracle with a Monte Carlo sampler, and
//! the additive-constraint variance identity.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::ConstraintContext;
use crate::error::{Error, Result};
use crate::pool::CandidatePool;
use crate::seed;
use crate::select::{score_pool, QualityScorer};

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let z = x.abs() / std::f64::consts::SQRT_2;
    let tail = 0.5 * libm::erfc(z);
    if x < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability that the mean of `k` correlated voters, each right with
/// probability `q` and pairwise correlation `rho`, ranks a pair correctly
/// (normal approximation).
pub fn p_ensemble_gaussian(k: usize, q: f64, rho: f64) -> f64 {
    let k = k as f64;
    let denom = (q * (1.0 - q) * (1.0 + (k - 1.0) * rho)).sqrt();
    if q == 0.5 {
        return 0.5;
    }
    normal_cdf(k.sqrt() * (q - 0.5) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("ceiling is 1 when voters are uncorrelated (rho = 0)")]
pub struct RhoZero;

/// Limit of [`p_ensemble_gaussian`] as `k` grows without bound.
pub fn p_infinity(q: f64, rho: f64) -> std::result::Result<f64, RhoZero> {
    if rho <= 0.0 {
        return Err(RhoZero);
    }
    Ok(normal_cdf((q - 0.5) / (q * (1.0 - q) * rho).sqrt()))
}

fn binomial_upper_tail(k: usize, q: f64) -> f64 {
    let mut total = 0.0;
    let mut coef = 1.0_f64;
    for j in 0..=k {
        if j > 0 {
            coef = coef * (k - j + 1) as f64 / j as f64;
        }
        if 2 * j > k {
            total += coef * q.powi(j as i32) * (1.0 - q).powi((k - j) as i32);
        }
    }
    total
}

/// Exact strict-majority probability under the exchangeable mixture: with
/// probability `rho` every voter copies one shared Bernoulli(q) draw, else
/// all voters are independent. The pairwise covariance of the vote
/// indicators is exactly `rho * q * (1 - q)`.
pub fn p_majority_exact(k: usize, q: f64, rho: f64) -> f64 {
    rho * q + (1.0 - rho) * binomial_upper_tail(k, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoterModel {
    pub k: usize,
    pub q: f64,
    pub rho: f64,
    pub trials: usize,
    pub seed: u64,
}

impl VoterModel {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if !(self.q > 0.5 && self.q < 1.0) {
            return Err(Error::InvalidConfig(format!("q = {} outside (0.5, 1)", self.q)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("rho = {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Pooled sample correlation between distinct voters' indicators
    /// (NaN for K = 1 or when every vote agrees).
    pub vote_correlation: f64,
}

const MC_CHUNK: usize = 8192;

#[derive(Default, Clone, Copy)]
struct McTally {
    trials: u64,
    majority: u64,
    votes: u64,
    vote_pairs: u64,
}

/// Monte Carlo estimate of the strict-majority probability under the
/// exchangeable mixture. Trials run in fixed-size chunks, each with its own
/// derived RNG stream, so the result does not depend on the thread count.
pub fn mc_majority(model: &VoterModel) -> Result<McEstimate> {
    model.validate()?;
    let chunks = model.trials.div_ceil(MC_CHUNK);
    let tallies: Vec<McTally> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = MC_CHUNK.min(model.trials - c * MC_CHUNK);
            let mut rng = seed::rng(seed::derive(model.seed, c as u64, "mc"));
            let mut t = McTally::default();
            for _ in 0..n {
                let correct = if rng.random::<f64>() < model.rho {
                    if rng.random::<f64>() < model.q {
                        model.k
                    } else {
                        0
                    }
                } else {
                    (0..model.k).filter(|_| rng.random::<f64>() < model.q).count()
                } as u64;
                t.trials += 1;
                t.votes += correct;
                t.vote_pairs += correct * correct.saturating_sub(1) / 2;
                if 2 * correct > model.k as u64 {
                    t.majority += 1;
                }
            }
            t
        })
        .collect();
    let total = tallies.iter().fold(McTally::default(), |a, b| McTally {
        trials: a.trials + b.trials,
        majority: a.majority + b.majority,
        votes: a.votes + b.votes,
        vote_pairs: a.vote_pairs + b.vote_pairs,
    });
    let n = total.trials as f64;
    let p = total.majority as f64 / n;
    let k = model.k as f64;
    let mean = total.votes as f64 / (n * k);
    let pair_mean = total.vote_pairs as f64 / (n * k * (k - 1.0) / 2.0);
    Ok(McEstimate {
        estimate: p,
        stderr: (p * (1.0 - p) / n).sqrt(),
        vote_correlation: (pair_mean - mean * mean) / (mean * (1.0 - mean)),
    })
}

/// One row of the `simulate` CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub k: usize,
    pub q: f64,
    pub rho: f64,
    pub p_gaussian: f64,
    pub p_exact: f64,
    pub p_mc: f64,
    pub stderr: f64,
    /// `None` at rho = 0 where the ceiling is 1.
    pub p_inf: Option<f64>,
}

pub const SIM_CSV_HEADER: &str = "K,q,rho,p_gaussian,p_exact,p_mc,stderr,p_inf";

impl SimRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.10},{:.10},{:.10},{:.10},{}",
            self.k,
            self.q,
            self.rho,
            self.p_gaussian,
            self.p_exact,
            self.p_mc,
            self.stderr,
            self.p_inf.map_or("1".to_string(), |p| format!("{p:.10}"))
        )
    }
}

pub fn simulate_grid(ks: &[usize], qs: &[f64], rhos: &[f64], trials: usize, seed: u64) -> Result<Vec<SimRow>> {
    let mut rows = Vec::new();
    for (i, &k) in ks.iter().enumerate() {
        for (j, &q) in qs.iter().enumerate() {
            for (l, &rho) in rhos.iter().enumerate() {
                let cell = (i * qs.len() + j) * rhos.len() + l;
                let mc = mc_majority(&VoterModel {
                    k,
                    q,
                    rho,
                    trials,
                    seed: seed::derive(seed, cell as u64, "grid"),
                })?;
                rows.push(SimRow {
                    k,
                    q,
                    rho,
                    p_gaussian: p_ensemble_gaussian(k, q, rho),
                    p_exact: p_majority_exact(k, q, rho),
                    p_mc: mc.estimate,
                    stderr: mc.stderr,
                    p_inf: p_infinity(q, rho).ok(),
                });
            }
        }
    }
    Ok(rows)
}

pub(crate) fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Relative difference between the member variance of total energies
/// `E^k + lambda * c` and the member variance of quality energies `E^k`.
pub fn variance_partition_deviation(member_energies: &[f64], lambda: f64, c: f64) -> f64 {
    let shifted: Vec<f64> = member_energies.iter().map(|e| e + lambda * c).collect();
    let vq = population_variance(member_energies);
    let vt = population_variance(&shifted);
    if vq == 0.0 {
        vt.abs()
    } else {
        (vt - vq).abs() / vq
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariancePartitionReport {
    pub candidates_checked: usize,
    /// Candidates with an infinite constraint energy, where the identity is vacuous.
    pub skipped_infinite: usize,
    pub max_relative_deviation: f64,
}

/// Verifies that adding the member-constant constraint term leaves the
/// ensemble variance unchanged for every finite-constraint candidate.
pub fn variance_partition_check(
    scorer: &dyn QualityScorer,
    pool: &CandidatePool,
    lambda: f64,
    ctx: &ConstraintContext,
) -> Result<VariancePartitionReport> {
    if scorer.member_count() < 2 {
        return Err(Error::InvalidConfig(
            "variance partition needs at least two members".into(),
        ));
    }
    let breakdowns = score_pool(pool, scorer, ctx, lambda)?;
    let mut report = VariancePartitionReport {
        candidates_checked: 0,
        skipped_infinite: 0,
        max_relative_deviation: 0.0,
    };
    for b in &breakdowns {
        if !b.e_constraint.is_finite() {
            report.skipped_infinite += 1;
            continue;
        }
        let d = variance_partition_deviation(&b.member_energies, lambda, b.e_constraint);
        report.candidates_checked += 1;
        report.max_relative_deviation = report.max_relative_deviation.max(d);
    }
    Ok(report)
}
