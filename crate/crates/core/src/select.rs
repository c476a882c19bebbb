//! Energy combination `E = mu + lambda * E_constraint`, argmin selection and
//! the reference selection baselines.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::answer::{extract_answer, parse_choice, parse_number};
use crate::constraints::{e_constraint, kk, ConstraintContext, ConstraintReport};
use crate::error::{Error, Result};
use crate::pool::{Candidate, CandidatePool, Label, Problem, TaskKind};
use crate::scorer::summarize;
use crate::seed;

/// Anything that assigns `K` quality energies to a candidate.
pub trait QualityScorer: Sync {
    fn member_count(&self) -> usize;
    fn member_energies(&self, problem: &Problem, candidate: &Candidate) -> Vec<f64>;
}

/// Serializes non-finite energies as the strings `"+inf"`, `"-inf"`, `"nan"`,
/// since JSON numbers cannot represent them.
pub mod float_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if *x > 0.0 {
            s.serialize_str("+inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) => match t.as_str() {
                "+inf" | "inf" | "Infinity" => Ok(f64::INFINITY),
                "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
                "nan" | "NaN" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("invalid energy `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub candidate_id: String,
    pub generator_id: String,
    pub member_energies: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub sigma_defined: bool,
    #[serde(with = "float_serde")]
    pub e_constraint: f64,
    #[serde(with = "float_serde")]
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ConstraintReport>,
}

/// `mu + lambda * c`, with an infinite penalty dominating for `lambda > 0`
/// and constraints ignored entirely at `lambda = 0`.
pub fn combine(mu: f64, lambda: f64, c: f64) -> f64 {
    if lambda == 0.0 {
        mu
    } else if c.is_infinite() {
        f64::INFINITY
    } else {
        mu + lambda * c
    }
}

/// One breakdown per candidate, in pool order.
pub fn score_pool(
    pool: &CandidatePool,
    scorer: &dyn QualityScorer,
    ctx: &ConstraintContext,
    lambda: f64,
) -> Result<Vec<EnergyBreakdown>> {
    pool.candidates
        .par_iter()
        .map(|c| {
            let s = summarize(&scorer.member_energies(&pool.problem, c));
            let con = e_constraint(&pool.problem, c, ctx)?;
            Ok(EnergyBreakdown {
                candidate_id: c.id.clone(),
                generator_id: c.generator_id.clone(),
                total: combine(s.mu, lambda, con.energy),
                member_energies: s.member_energies,
                mu: s.mu,
                sigma: s.sigma,
                sigma_defined: s.sigma_defined,
                e_constraint: con.energy,
                report: con.report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pick {
    pub index: usize,
    pub candidate_id: String,
    /// Set when no candidate met the method's criterion and a fallback was used.
    pub degraded: bool,
}

/// Index of the first minimum of `totals`; NaN counts as `+inf`.
pub fn argmin_total(totals: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in totals.into_iter().enumerate() {
        let t = if t.is_nan() { f64::INFINITY } else { t };
        if best.is_none_or(|(_, b)| t < b) {
            best = Some((i, t));
        }
    }
    best
}

/// Minimum total energy, ties to the earliest position. An all-infinite
/// pool yields position 0 with `degraded` set.
///
/// # Panics
/// If `breakdowns` is empty.
pub fn select_best(breakdowns: &[EnergyBreakdown]) -> Pick {
    let (index, total) = argmin_total(breakdowns.iter().map(|b| b.total)).expect("nonempty breakdowns");
    Pick {
        index,
        candidate_id: breakdowns[index].candidate_id.clone(),
        degraded: total == f64::INFINITY,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Greedy,
    Random,
    SelfConsistency,
    Oracle,
}

impl Baseline {
    pub const ALL: [Baseline; 4] = [Baseline::Greedy, Baseline::Random, Baseline::SelfConsistency, Baseline::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Greedy => "greedy",
            Baseline::Random => "random",
            Baseline::SelfConsistency => "self_consistency",
            Baseline::Oracle => "oracle",
        }
    }
}

fn pick(pool: &CandidatePool, index: usize, degraded: bool) -> Pick {
    Pick {
        index,
        candidate_id: pool.candidates[index].id.clone(),
        degraded,
    }
}

/// The first greedy-flagged candidate.
pub fn greedy_pick(pool: &CandidatePool) -> Result<Pick> {
    pool.candidates
        .iter()
        .position(|c| c.greedy)
        .map(|i| pick(pool, i, false))
        .ok_or_else(|| Error::MissingGreedyFlag(pool.problem.id.clone()))
}

/// A seeded uniform pick.
pub fn random_pick(pool: &CandidatePool, seed: u64) -> Pick {
    let mut rng = seed::rng(seed::derive(seed, seed::text_key(&pool.problem.id), "random-baseline"));
    pick(pool, rng.random_range(0..pool.len()), false)
}

/// Normalized final answer used for voting, or `None` when the candidate
/// states no extractable answer.
pub fn answer_key(problem: &Problem, body: &str) -> Option<String> {
    match problem.task_kind {
        TaskKind::LogicPuzzle => {
            let chars = problem.puzzle.as_ref()?.characters.clone();
            kk::parse_assignment(body, &chars).map(|a| a.key())
        }
        TaskKind::MathAnswer => parse_number(extract_answer(body)?).map(|x| format!("{x}")),
        TaskKind::Multichoice => parse_choice(extract_answer(body)?).map(|i| i.to_string()),
        TaskKind::Itinerary | TaskKind::Code => extract_answer(body).map(str::to_string),
    }
}

/// Majority vote over extracted answers. Ties go to the answer whose first
/// voter comes earliest, and that voter is returned. Pools with no
/// extractable answer fall back to position 0, degraded.
pub fn self_consistency_pick(pool: &CandidatePool) -> Pick {
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (i, c) in pool.candidates.iter().enumerate() {
        if let Some(k) = answer_key(&pool.problem, &c.body) {
            tally.entry(k).or_insert((0, i)).0 += 1;
        }
    }
    match tally.values().max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1))) {
        Some(&(_, first)) => pick(pool, first, false),
        None => pick(pool, 0, true),
    }
}

/// Any correct candidate (the first), or the minimum-violation candidate for
/// violation-scored tasks. `degraded` marks pools with nothing correct.
pub fn oracle_pick(pool: &CandidatePool, violation_threshold: f64) -> Result<Pick> {
    let labels = pool.labels().ok_or_else(|| Error::MissingLabels(pool.problem.id.clone()))?;
    if pool.problem.task_kind.uses_violation_score() {
        let (i, q) = labels
            .iter()
            .map(|l| l.quality())
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, q)| if q > best.1 { (i, q) } else { best });
        Ok(pick(pool, i, -q > violation_threshold))
    } else {
        Ok(match labels.iter().position(|l| l.is_correct(violation_threshold)) {
            Some(i) => pick(pool, i, false),
            None => pick(pool, 0, true),
        })
    }
}

/// All four reference picks.
pub fn baselines(pool: &CandidatePool, seed: u64, violation_threshold: f64) -> Result<BTreeMap<Baseline, Pick>> {
    Ok(BTreeMap::from([
        (Baseline::Greedy, greedy_pick(pool)?),
        (Baseline::Random, random_pick(pool, seed)),
        (Baseline::SelfConsistency, self_consistency_pick(pool)),
        (Baseline::Oracle, oracle_pick(pool, violation_threshold)?),
    ]))
}

/// Positions sorted by ascending total energy, ties by position.
pub fn energy_order(breakdowns: &[EnergyBreakdown]) -> Vec<usize> {
    let key = |b: &EnergyBreakdown| if b.total.is_nan() { f64::INFINITY } else { b.total };
    let mut order: Vec<usize> = (0..breakdowns.len()).collect();
    order.sort_by(|&a, &b| key(&breakdowns[a]).total_cmp(&key(&breakdowns[b])).then(a.cmp(&b)));
    order
}

/// For each `n`, whether any of the `n` lowest-energy candidates is correct.
pub fn pass_at_n(
    breakdowns: &[EnergyBreakdown],
    labels: &[Label],
    n_values: &[usize],
    violation_threshold: f64,
) -> BTreeMap<usize, bool> {
    let order = energy_order(breakdowns);
    n_values
        .iter()
        .map(|&n| {
            let hit = order.iter().take(n).any(|&i| labels[i].is_correct(violation_threshold));
            (n, hit)
        })
        .collect()
}

/// A scorer that knows the labels: energy 0 for correct and 1 for incorrect
/// candidates (the violation score itself for violation labels), identical
/// across members. Unlabeled candidates get energy 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfectScorer {
    pub k: usize,
}

impl QualityScorer for PerfectScorer {
    fn member_count(&self) -> usize {
        self.k
    }

    fn member_energies(&self, _problem: &Problem, candidate: &Candidate) -> Vec<f64> {
        let mu = match candidate.label {
            Some(Label::Violation(v)) => v,
            Some(l) => 1.0 - l.quality(),
            None => 1.0,
        };
        vec![mu; self.k]
    }
}
