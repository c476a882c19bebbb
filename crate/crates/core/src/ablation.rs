//! Ablations over ensemble size, pool size and generator diversity.
//!
//! Every candidate's energies depend only on that candidate, so all variants
//! are derived from one scoring pass over the full pools: smaller ensembles
//! re-aggregate the first `k` member energies, smaller pools select among a
//! seeded subset of positions, and single-generator pools keep only one
//! generator's candidates.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::sigma_auroc;
use crate::pool::Label;
use crate::scorer::summarize;
use crate::seed;
use crate::select::{argmin_total, combine, EnergyBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Number of ensemble members, taken in checkpoint order.
    EnsembleSize,
    /// Candidates per pool.
    PoolSize,
    /// All generators versus one generator at a time.
    PoolSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    /// Ensemble sizes to evaluate; empty means every size from 1 to K.
    pub ks: Vec<usize>,
    /// Pool sizes to evaluate; values above a pool's size use the whole pool.
    pub ns: Vec<usize>,
    /// Seed of the per-problem candidate order used for pool-size subsets.
    pub seed: u64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            ks: Vec::new(),
            ns: vec![1, 2, 4, 8],
            seed: 42,
        }
    }
}

/// One scored problem: the full pool's breakdowns and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredProblem {
    pub problem_id: String,
    pub lambda: f64,
    pub breakdowns: Vec<EnergyBreakdown>,
    pub labels: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    /// The ensemble or pool size, `all`, or a generator id.
    pub setting: String,
    pub n_problems: usize,
    pub pass_at_1: f64,
    pub sigma_auroc: Option<f64>,
    /// Mean sigma of the selected candidates.
    pub mean_sigma: f64,
}

/// Selection outcome of one problem under one variant.
struct Outcome {
    correct: bool,
    sigma: f64,
}

/// Selects among `(total, sigma)` options and reads the label.
fn select(options: &[(f64, f64)], labels: &[bool]) -> Outcome {
    let (i, _) = argmin_total(options.iter().map(|o| o.0)).expect("nonempty options");
    Outcome {
        correct: labels[i],
        sigma: options[i].1,
    }
}

fn row(axis: Axis, setting: String, outcomes: &[Outcome]) -> AblationRow {
    let n = outcomes.len();
    let items: Vec<(f64, bool)> = outcomes.iter().map(|o| (o.sigma, o.correct)).collect();
    AblationRow {
        axis,
        setting,
        n_problems: n,
        pass_at_1: outcomes.iter().filter(|o| o.correct).count() as f64 / n.max(1) as f64,
        sigma_auroc: sigma_auroc(&items),
        mean_sigma: outcomes.iter().map(|o| o.sigma).sum::<f64>() / n.max(1) as f64,
    }
}

/// Runs every ablation in `spec` and returns the rows grouped by axis.
pub fn ablate(problems: &[ScoredProblem], spec: &AblationSpec, violation_threshold: f64) -> Result<Vec<AblationRow>> {
    if problems.is_empty() {
        return Err(Error::EmptyReport);
    }
    for p in problems {
        if p.breakdowns.is_empty() || p.breakdowns.len() != p.labels.len() {
            return Err(Error::Internal(format!(
                "problem `{}` has {} breakdowns and {} labels",
                p.problem_id,
                p.breakdowns.len(),
                p.labels.len()
            )));
        }
    }
    let k_max = problems
        .iter()
        .flat_map(|p| &p.breakdowns)
        .map(|b| b.member_energies.len())
        .min()
        .unwrap_or(0);
    let ks: Vec<usize> = if spec.ks.is_empty() { (1..=k_max).collect() } else { spec.ks.clone() };
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > k_max) {
        return Err(Error::InvalidConfig(format!("ensemble size {k} outside 1..={k_max}")));
    }
    if spec.ns.contains(&0) {
        return Err(Error::InvalidConfig("pool size must be at least 1".into()));
    }
    let correct: Vec<Vec<bool>> = problems
        .iter()
        .map(|p| p.labels.iter().map(|l| l.is_correct(violation_threshold)).collect())
        .collect();
    let full = |p: &ScoredProblem| -> Vec<(f64, f64)> { p.breakdowns.iter().map(|b| (b.total, b.sigma)).collect() };

    let mut rows = Vec::new();
    for &k in &ks {
        let outcomes: Vec<Outcome> = problems
            .iter()
            .zip(&correct)
            .map(|(p, c)| {
                let options: Vec<(f64, f64)> = p
                    .breakdowns
                    .iter()
                    .map(|b| {
                        let s = summarize(&b.member_energies[..k]);
                        (combine(s.mu, p.lambda, b.e_constraint), s.sigma)
                    })
                    .collect();
                select(&options, c)
            })
            .collect();
        rows.push(row(Axis::EnsembleSize, k.to_string(), &outcomes));
    }

    let orders: Vec<Vec<usize>> = problems
        .iter()
        .map(|p| {
            let mut order: Vec<usize> = (0..p.breakdowns.len()).collect();
            order.shuffle(&mut seed::rng(seed::derive(spec.seed, seed::text_key(&p.problem_id), "ablation")));
            order
        })
        .collect();
    for &n in &spec.ns {
        let outcomes: Vec<Outcome> = problems
            .iter()
            .zip(&correct)
            .zip(&orders)
            .map(|((p, c), order)| {
                let all = full(p);
                let kept = &order[..n.min(order.len())];
                let options: Vec<(f64, f64)> = kept.iter().map(|&i| all[i]).collect();
                let labels: Vec<bool> = kept.iter().map(|&i| c[i]).collect();
                select(&options, &labels)
            })
            .collect();
        rows.push(row(Axis::PoolSize, n.to_string(), &outcomes));
    }

    let all: Vec<Outcome> = problems.iter().zip(&correct).map(|(p, c)| select(&full(p), c)).collect();
    rows.push(row(Axis::PoolSource, "all".into(), &all));
    let generators: BTreeSet<&str> = problems
        .iter()
        .flat_map(|p| &p.breakdowns)
        .map(|b| b.generator_id.as_str())
        .collect();
    for g in generators {
        let outcomes: Vec<Outcome> = problems
            .iter()
            .zip(&correct)
            .filter_map(|(p, c)| {
                let idx: Vec<usize> = (0..p.breakdowns.len()).filter(|&i| p.breakdowns[i].generator_id == g).collect();
                if idx.is_empty() {
                    return None;
                }
                let options: Vec<(f64, f64)> = idx.iter().map(|&i| (p.breakdowns[i].total, p.breakdowns[i].sigma)).collect();
                let labels: Vec<bool> = idx.iter().map(|&i| c[i]).collect();
                Some(select(&options, &labels))
            })
            .collect();
        rows.push(row(Axis::PoolSource, g.to_string(), &outcomes));
    }
    Ok(rows)
}
