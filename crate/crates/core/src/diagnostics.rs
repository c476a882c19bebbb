//! Confounding screen and last-layer retraining on group-balanced data.
//!
//! The screen asks whether the scorer prefers some generators regardless of
//! correctness: the share of selections per generator, and the spread of
//! mean energy on correct candidates across generators. Retraining keeps the
//! featurizer, member masks and input normalization frozen and updates only
//! the head weights on pairs drawn from a set balanced across
//! (generator, label) cells.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintContext;
use crate::error::{Error, Result};
use crate::pool::{CandidatePool, Label, RunConfig};
use crate::scorer::train::fit;
use crate::scorer::{EnsembleScorer, Member, TrainingData};
use crate::seed;
use crate::select::{score_pool, select_best, EnergyBreakdown};

/// Fraction of selections made from each generator's candidates.
pub fn pick_distribution<'a>(generators: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut n = 0usize;
    for g in generators {
        *counts.entry(g.to_string()).or_default() += 1;
        n += 1;
    }
    counts.into_iter().map(|(g, c)| (g, c as f64 / n as f64)).collect()
}

/// Population standard deviation, across generators, of the mean `mu` over
/// each generator's correct candidates (pooled over all problems).
pub fn correct_energy_spread<'a>(
    problems: impl IntoIterator<Item = (&'a [EnergyBreakdown], &'a [Label])>,
    violation_threshold: f64,
) -> Result<f64> {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (bd, labels) in problems {
        for (b, l) in bd.iter().zip(labels) {
            if l.is_correct(violation_threshold) {
                let e = sums.entry(b.generator_id.as_str()).or_default();
                e.0 += b.mu;
                e.1 += 1;
            }
        }
    }
    if sums.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "energy spread needs correct candidates from at least 2 generators, found {}",
            sums.len()
        )));
    }
    let means: Vec<f64> = sums.values().map(|(s, c)| s / *c as f64).collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / means.len() as f64;
    Ok(var.sqrt())
}

/// Keeps at most `cap_per_cell` candidates from every (generator, label)
/// cell, chosen uniformly under `seed`. Pools left empty are dropped.
pub fn group_balance(pools: &[CandidatePool], cap_per_cell: usize, seed: u64, violation_threshold: f64) -> Result<Vec<CandidatePool>> {
    let mut cells: BTreeMap<(String, bool), Vec<(usize, usize)>> = BTreeMap::new();
    for (pi, pool) in pools.iter().enumerate() {
        for (ci, c) in pool.candidates.iter().enumerate() {
            let label = c.label.ok_or_else(|| Error::MissingLabels(pool.problem.id.clone()))?;
            cells
                .entry((c.generator_id.clone(), label.is_correct(violation_threshold)))
                .or_default()
                .push((pi, ci));
        }
    }
    let mut keep: Vec<Vec<bool>> = pools.iter().map(|p| vec![false; p.len()]).collect();
    for ((gen, ok), members) in &cells {
        let chosen: Vec<usize> = if members.len() <= cap_per_cell {
            (0..members.len()).collect()
        } else {
            let cell_key = format!("{gen}/{ok}");
            let mut rng = seed::rng(seed::derive(seed, seed::text_key(&cell_key), "balance"));
            rand::seq::index::sample(&mut rng, members.len(), cap_per_cell).into_vec()
        };
        for i in chosen {
            let (pi, ci) = members[i];
            keep[pi][ci] = true;
        }
    }
    Ok(pools
        .iter()
        .zip(&keep)
        .filter(|(_, k)| k.iter().any(|&x| x))
        .map(|(pool, k)| {
            let candidates = pool.candidates.iter().zip(k).filter(|(_, &x)| x).map(|(c, _)| c.clone()).collect();
            CandidatePool::new(pool.problem.clone(), candidates)
        })
        .collect())
}

/// Epochs of head retraining when derived from a run configuration.
pub const DFR_EPOCHS: usize = 20;

/// Optimisation settings for retraining the heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfrConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_pairs_per_problem: usize,
    pub seed: u64,
}

impl DfrConfig {
    /// Full-batch steps at the run's learning rate. Minibatch noise leaves a
    /// random residual preference among otherwise tied generators.
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            epochs: DFR_EPOCHS,
            learning_rate: cfg.learning_rate,
            batch_size: 0,
            max_pairs_per_problem: cfg.max_pairs_per_problem,
            seed: seed::derive(cfg.master_seed, 0, "dfr"),
        }
    }
}

/// Continues training every head on within-problem pairs from `balanced`.
/// Featurizer, masks and normalization are carried over unchanged.
pub fn dfr_retrain(scorer: &EnsembleScorer, balanced: &[CandidatePool], cfg: &DfrConfig) -> Result<EnsembleScorer> {
    if cfg.epochs == 0 {
        return Ok(scorer.clone());
    }
    let data = TrainingData::new(balanced.to_vec(), scorer.featurizer())?;
    let ids = data.problem_ids();
    let members = scorer
        .members()
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            let pairs = data.pairs_for(&ids, cfg.max_pairs_per_problem, seed::derive(cfg.seed, k as u64, "pairs"));
            if pairs.is_empty() {
                return Err(Error::DegenerateData(
                    "the balanced set has no problem with both a correct and an incorrect candidate".into(),
                ));
            }
            let mut mc = m.config.clone();
            mc.epochs = cfg.epochs;
            mc.learning_rate = cfg.learning_rate;
            mc.batch_size = cfg.batch_size;
            mc.patience = 0;
            mc.validation_fraction = 0.0;
            let head = fit(m.head.clone(), &pairs, &data, &mc)?;
            Ok(Member {
                config: m.config.clone(),
                head,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EnsembleScorer::new(scorer.featurizer().clone(), members)
}

/// Selection behaviour of a scorer on labeled pools, constraints ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Screen {
    pub pick_distribution: BTreeMap<String, f64>,
    pub spread: f64,
    pub pass_at_1: f64,
}

pub fn screen(scorer: &EnsembleScorer, pools: &[CandidatePool], violation_threshold: f64) -> Result<Screen> {
    if pools.is_empty() {
        return Err(Error::DegenerateData("no pools to screen".into()));
    }
    let ctx = ConstraintContext::default();
    let scored = pools
        .iter()
        .map(|p| {
            let labels = p.labels().ok_or_else(|| Error::MissingLabels(p.problem.id.clone()))?;
            let bd = score_pool(p, scorer, &ctx, 0.0)?;
            Ok((bd, labels))
        })
        .collect::<Result<Vec<_>>>()?;
    let picks: Vec<(usize, &EnergyBreakdown, bool)> = scored
        .iter()
        .map(|(bd, labels)| {
            let pick = select_best(bd);
            (pick.index, &bd[pick.index], labels[pick.index].is_correct(violation_threshold))
        })
        .collect();
    let spread = correct_energy_spread(scored.iter().map(|(b, l)| (b.as_slice(), l.as_slice())), violation_threshold)?;
    Ok(Screen {
        pick_distribution: pick_distribution(picks.iter().map(|(_, b, _)| b.generator_id.as_str())),
        spread,
        pass_at_1: picks.iter().filter(|p| p.2).count() as f64 / picks.len() as f64,
    })
}

/// Pre- and post-retraining screens on the same evaluation pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub pick_distribution: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pick_distribution_post: Option<BTreeMap<String, f64>>,
    pub spread_pre: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread_post: Option<f64>,
    pub pass1_pre: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass1_post: Option<f64>,
}

impl DiagnosticReport {
    pub fn new(pre: Screen, post: Option<Screen>) -> Self {
        Self {
            pick_distribution: pre.pick_distribution,
            spread_pre: pre.spread,
            pass1_pre: pre.pass_at_1,
            pick_distribution_post: post.as_ref().map(|s| s.pick_distribution.clone()),
            spread_post: post.as_ref().map(|s| s.spread),
            pass1_post: post.map(|s| s.pass_at_1),
        }
    }

    /// Largest single-generator share of selections.
    pub fn max_share(dist: &BTreeMap<String, f64>) -> f64 {
        dist.values().copied().fold(0.0, f64::max)
    }
}
