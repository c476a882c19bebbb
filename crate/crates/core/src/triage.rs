//! Uncertainty triage: the three-way accept/regenerate/abstain rule, natural
//! language feedback from constraint reports, generation backends, and the
//! two-pass select-regenerate-reselect loop.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::answer::{match_answer, AnswerMatch};
use crate::constraints::kk::{self, Role};
use crate::constraints::{e_constraint, ConstraintContext, ConstraintReport, Dimension};
use crate::error::{Error, Result};
use crate::pool::{Candidate, CandidatePool, Gold, Label, Problem, RunConfig, TaskKind};
use crate::select::{score_pool, select_best, EnergyBreakdown, Pick, QualityScorer};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Regenerate,
    Abstain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriageConfig {
    pub theta_sigma: f64,
    pub theta_abstain: f64,
    pub n_pass2: usize,
    pub lambda: f64,
}

impl TriageConfig {
    pub fn from_run(cfg: &RunConfig, kind: TaskKind) -> Self {
        Self {
            theta_sigma: cfg.theta_sigma,
            theta_abstain: cfg.theta_abstain,
            n_pass2: cfg.n_pass2,
            lambda: cfg.effective_lambda(kind),
        }
    }
}

/// Accept a confident, violation-free selection; abstain when the selection
/// is very uncertain; otherwise regenerate.
pub fn decide(sigma_sel: f64, e_c_sel: f64, cfg: &TriageConfig) -> Decision {
    if sigma_sel > cfg.theta_abstain {
        Decision::Abstain
    } else if sigma_sel <= cfg.theta_sigma && e_c_sel == 0.0 {
        Decision::Accept
    } else {
        Decision::Regenerate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriageDecision {
    pub decision: Decision,
    pub sigma_selected: f64,
    pub sigma_pool_mean: f64,
    #[serde(with = "crate::select::float_serde")]
    pub e_constraint_selected: f64,
}

/// One sentence per violated dimension, ordered by dimension name. A parse
/// failure is reported on its own, since the other dimensions are then
/// set to their maximum without being checked.
pub fn format_feedback(report: &ConstraintReport) -> Result<String> {
    if report.is_clean() {
        return Err(Error::EmptyReport);
    }
    let mut dims: Vec<Dimension> = if report.dims.parse > 0.0 {
        vec![Dimension::Parse]
    } else {
        report.dims.iter().filter(|(_, v)| *v > 0.0).map(|(d, _)| d).collect()
    };
    dims.sort_by_key(|d| d.name());
    let sentences: Vec<String> = dims
        .iter()
        .map(|d| {
            report
                .messages
                .iter()
                .find(|m| m.dimension == *d)
                .map(|m| m.text.clone())
                .unwrap_or_else(|| format!("The {d} constraint is violated (score {:.2}).", report.dims.get(*d)))
        })
        .collect();
    Ok(sentences.join(" "))
}

/// Feedback for the pass-1 selection given its breakdown.
pub fn feedback_for(b: &EnergyBreakdown) -> String {
    if let Some(Ok(text)) = b.report.as_ref().map(format_feedback) {
        return text;
    }
    if b.e_constraint.is_infinite() {
        "The previous answer could not be parsed. State the final answer in the required format.".into()
    } else if b.e_constraint > 0.0 {
        format!(
            "The previous answer is inconsistent with {} of the stated constraints. Re-check each one.",
            b.e_constraint
        )
    } else {
        "The verifier is uncertain about the previous answer. Re-derive it step by step.".into()
    }
}

/// A freshly generated pass-2 candidate, optionally carrying its own label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

pub trait GenerationBackend: Sync {
    fn name(&self) -> &str;
    /// True for the backend that never generates anything.
    fn is_noop(&self) -> bool {
        false
    }
    fn generate(&self, problem: &Problem, feedback: &str, n: usize) -> Result<Vec<Generated>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoBackend;

impl GenerationBackend for NoBackend {
    fn name(&self) -> &str {
        "none"
    }

    fn is_noop(&self) -> bool {
        true
    }

    fn generate(&self, _: &Problem, _: &str, _: usize) -> Result<Vec<Generated>> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ReplayItem {
    Body(String),
    Labeled(Generated),
}

#[derive(Debug, Clone, Deserialize)]
struct ReplayRecord {
    problem_id: String,
    #[serde(alias = "bodies")]
    candidates: Vec<ReplayItem>,
}

/// Pre-generated pass-2 candidates keyed by problem id.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    pub entries: HashMap<String, Vec<Generated>>,
}

impl ReplayBackend {
    pub fn new(entries: HashMap<String, Vec<Generated>>) -> Self {
        Self { entries }
    }

    /// Reads JSONL records `{"problem_id": ..., "candidates": [...]}` whose
    /// candidates are plain bodies or `{"body": ..., "label": ...}` objects.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let records: Vec<ReplayRecord> = crate::pool::read_jsonl_records(path)?;
        let entries = records
            .into_iter()
            .map(|r| {
                let items = r
                    .candidates
                    .into_iter()
                    .map(|i| match i {
                        ReplayItem::Body(body) => Generated { body, label: None },
                        ReplayItem::Labeled(g) => g,
                    })
                    .collect();
                (r.problem_id, items)
            })
            .collect();
        Ok(Self { entries })
    }
}

impl GenerationBackend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn generate(&self, problem: &Problem, _feedback: &str, n: usize) -> Result<Vec<Generated>> {
        let items = self
            .entries
            .get(&problem.id)
            .ok_or_else(|| Error::Backend(format!("no replay entry for problem `{}`", problem.id)))?;
        Ok(items.iter().take(n).cloned().collect())
    }
}

/// Seeded template generator for answer-matched and puzzle tasks. Each
/// candidate is correct with probability `accuracy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticBackend {
    pub master_seed: u64,
    pub accuracy: f64,
}

impl GenerationBackend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn generate(&self, problem: &Problem, _feedback: &str, n: usize) -> Result<Vec<Generated>> {
        let mut rng = seed::rng(seed::derive(self.master_seed, seed::text_key(&problem.id), "synthetic-backend"));
        let unsupported = || Error::Backend(format!("synthetic backend cannot generate for problem `{}`", problem.id));
        (0..n)
            .map(|i| {
                let correct = rng.random::<f64>() < self.accuracy;
                let body = match problem.task_kind {
                    TaskKind::MathAnswer => {
                        let gold = problem.gold.as_ref().and_then(Gold::as_number).ok_or_else(unsupported)?;
                        let offset = rng.random_range(1..=9) as f64;
                        let ans = if correct { gold } else { gold + offset };
                        format!("Revisiting the computation (attempt {}). #### {ans}", i + 1)
                    }
                    TaskKind::Multichoice => {
                        let gold = match problem.gold.as_ref() {
                            Some(Gold::Number(x)) if *x >= 0.0 => *x as usize,
                            _ => return Err(unsupported()),
                        };
                        let ans = if correct { gold } else { gold + rng.random_range(1..=3) };
                        let letter = char::from(b'A' + (ans % 26) as u8);
                        format!("Re-reading the options, the best choice is {letter}. #### {letter}")
                    }
                    TaskKind::LogicPuzzle => {
                        let puzzle = problem.puzzle.as_ref().ok_or_else(unsupported)?;
                        let mut a = kk::solve_kk(puzzle).map_err(|e| Error::Backend(e.to_string()))?;
                        if !correct {
                            let who = &puzzle.characters[rng.random_range(0..puzzle.characters.len())];
                            let r = a.0.get_mut(who).expect("total assignment");
                            *r = if *r == Role::Knight { Role::Knave } else { Role::Knight };
                        }
                        format!("Checking each statement again.\n{}", serde_json::to_string(&a)?)
                    }
                    TaskKind::Itinerary | TaskKind::Code => return Err(unsupported()),
                };
                Ok(Generated { body, label: None })
            })
            .collect()
    }
}

/// Ground truth for a generated candidate where it can be computed.
pub fn auto_label(problem: &Problem, candidate: &Candidate, ctx: &ConstraintContext) -> Option<Label> {
    match problem.task_kind {
        TaskKind::Itinerary => {
            let eval = e_constraint(problem, candidate, ctx).ok()?;
            eval.report.map(|r| Label::Violation(r.violation_score))
        }
        TaskKind::MathAnswer | TaskKind::Multichoice => {
            let gold = problem.gold.as_ref()?;
            Some(match match_answer(&candidate.body, gold, problem.task_kind) {
                AnswerMatch::Correct => Label::correct(),
                _ => Label::incorrect(),
            })
        }
        TaskKind::LogicPuzzle => {
            let check = kk::kk_checker(problem.puzzle.as_ref()?, &candidate.body);
            Some(if check.e_constraint == 0.0 { Label::correct() } else { Label::incorrect() })
        }
        TaskKind::Code => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageOutcome {
    pub problem_id: String,
    pub pass1_selection: Pick,
    /// The three-way rule applied to the pass-1 selection.
    pub pass1_decision: TriageDecision,
    pub pass2_triggered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    pub pass2_candidates: Vec<Candidate>,
    pub pass1_breakdowns: Vec<EnergyBreakdown>,
    pub pass2_breakdowns: Vec<EnergyBreakdown>,
    /// Argmin over the pooled candidates, before abstention.
    pub selection: Pick,
    pub adopted_pass2: bool,
    pub sigma_final: f64,
    /// Abstention applied regardless of whether pass 2 ran.
    pub abstained: bool,
    /// Abstention applied only when pass 2 ran.
    pub abstained_if_triggered: bool,
    /// Final answer, `None` on abstention.
    pub final_candidate: Option<String>,
    /// Set when the backend failed and the single-pass result was kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend_warning: Option<String>,
}

impl TriageOutcome {
    /// The pooled candidate list: pass 1 followed by pass 2.
    pub fn all_breakdowns(&self) -> Vec<&EnergyBreakdown> {
        self.pass1_breakdowns.iter().chain(&self.pass2_breakdowns).collect()
    }
}

fn mean_sigma(b: &[EnergyBreakdown]) -> f64 {
    b.iter().map(|x| x.sigma).sum::<f64>() / b.len().max(1) as f64
}

/// Select, regenerate on violation or high pool uncertainty, reselect over
/// the union, then abstain if the final selection is too uncertain.
pub fn run_two_pass(
    pool: &CandidatePool,
    scorer: &dyn QualityScorer,
    ctx: &ConstraintContext,
    backend: &dyn GenerationBackend,
    cfg: &TriageConfig,
) -> Result<TriageOutcome> {
    let pass1 = score_pool(pool, scorer, ctx, cfg.lambda)?;
    let sel1 = select_best(&pass1);
    let b1 = &pass1[sel1.index];
    let pool_sigma = mean_sigma(&pass1);
    let pass1_decision = TriageDecision {
        decision: decide(b1.sigma, b1.e_constraint, cfg),
        sigma_selected: b1.sigma,
        sigma_pool_mean: pool_sigma,
        e_constraint_selected: b1.e_constraint,
    };
    let triggered = b1.e_constraint > 0.0 || pool_sigma > cfg.theta_sigma;

    let mut feedback = None;
    let mut warning = None;
    let mut pass2_candidates = Vec::new();
    let mut pass2 = Vec::new();
    if triggered && !backend.is_noop() {
        let text = feedback_for(b1);
        match backend.generate(&pool.problem, &text, cfg.n_pass2) {
            Ok(generated) => {
                pass2_candidates = generated
                    .into_iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let mut c = Candidate::new(
                            format!("{}:pass2:{i}", pool.problem.id),
                            pool.problem.id.clone(),
                            format!("pass2:{}", backend.name()),
                            g.body,
                        );
                        c.label = g.label.or_else(|| auto_label(&pool.problem, &c, ctx));
                        c
                    })
                    .collect();
                if !pass2_candidates.is_empty() {
                    let extra = CandidatePool::new(pool.problem.clone(), pass2_candidates.clone());
                    pass2 = score_pool(&extra, scorer, ctx, cfg.lambda)?;
                }
            }
            Err(e) => warning = Some(e.to_string()),
        }
        feedback = Some(text);
    }

    let union: Vec<EnergyBreakdown> = pass1.iter().chain(&pass2).cloned().collect();
    let selection = select_best(&union);
    let sigma_final = union[selection.index].sigma;
    let abstained = sigma_final > cfg.theta_abstain;
    let abstained_if_triggered = triggered && abstained;
    Ok(TriageOutcome {
        problem_id: pool.problem.id.clone(),
        adopted_pass2: selection.index >= pass1.len(),
        final_candidate: (!abstained).then(|| selection.candidate_id.clone()),
        pass1_selection: sel1,
        pass1_decision,
        pass2_triggered: triggered,
        feedback,
        pass2_candidates,
        pass1_breakdowns: pass1,
        pass2_breakdowns: pass2,
        selection,
        sigma_final,
        abstained,
        abstained_if_triggered,
        backend_warning: warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{DimMessage, ViolationDims};
    use crate::select::PerfectScorer;

    fn cfg() -> TriageConfig {
        TriageConfig {
            theta_sigma: 0.8,
            theta_abstain: 1.5,
            n_pass2: 8,
            lambda: 1.0,
        }
    }

    #[test]
    fn decision_rule_reference_points() {
        assert_eq!(decide(0.5, 0.0, &cfg()), Decision::Accept);
        assert_eq!(decide(1.0, 0.0, &cfg()), Decision::Regenerate);
        assert_eq!(decide(2.0, 0.0, &cfg()), Decision::Abstain);
        assert_eq!(decide(0.5, 0.1, &cfg()), Decision::Regenerate);
        assert_eq!(decide(0.8, 0.0, &cfg()), Decision::Accept);
        assert_eq!(decide(1.5, 3.0, &cfg()), Decision::Regenerate);
    }

    #[test]
    fn feedback_orders_by_dimension_name() {
        let dims = ViolationDims {
            budget: 0.1,
            diversity: 0.2,
            ..Default::default()
        };
        let r = ConstraintReport::new(
            dims,
            vec![
                DimMessage {
                    dimension: Dimension::Diversity,
                    text: "Diversity sentence.".into(),
                },
                DimMessage {
                    dimension: Dimension::Budget,
                    text: "Budget sentence.".into(),
                },
            ],
        );
        assert_eq!(format_feedback(&r).unwrap(), "Budget sentence. Diversity sentence.");
        let clean = ConstraintReport::new(ViolationDims::default(), vec![]);
        assert!(matches!(format_feedback(&clean), Err(Error::EmptyReport)));
    }

    fn math_problem() -> Problem {
        Problem {
            id: "m1".into(),
            task_kind: TaskKind::MathAnswer,
            statement: "What is 9 * 2?".into(),
            gold: Some(Gold::Number(18.0)),
            budget: None,
            preferences: None,
            difficulty: None,
            puzzle: None,
        }
    }

    /// Energies spread across members in proportion to a per-candidate
    /// uncertainty parsed from the body (`sigma=<x>`).
    struct SpreadScorer;

    impl QualityScorer for SpreadScorer {
        fn member_count(&self) -> usize {
            2
        }

        fn member_energies(&self, _: &Problem, c: &Candidate) -> Vec<f64> {
            let s: f64 = c
                .body
                .split("sigma=")
                .nth(1)
                .and_then(|t| t.split_whitespace().next())
                .and_then(|t| t.parse().ok())
                .unwrap_or(0.0);
            let mu = if c.body.contains("good") { -1.0 } else { 1.0 };
            vec![mu - s, mu + s]
        }
    }

    #[test]
    fn confident_pools_skip_pass_two() {
        let pool = CandidatePool::new(
            math_problem(),
            vec![
                Candidate::new("a", "m1", "g", "good sigma=0.1 #### 18"),
                Candidate::new("b", "m1", "g", "bad sigma=0.1 #### 17"),
            ],
        );
        let replay = ReplayBackend::default();
        let out = run_two_pass(&pool, &SpreadScorer, &ConstraintContext::default(), &replay, &cfg()).unwrap();
        assert!(!out.pass2_triggered);
        assert_eq!(out.final_candidate.as_deref(), Some("a"));
        assert!(out.backend_warning.is_none());
    }

    #[test]
    fn uncertain_pools_regenerate_and_pool() {
        let pool = CandidatePool::new(
            math_problem(),
            vec![
                Candidate::new("a", "m1", "g", "bad sigma=1.0 #### 17"),
                Candidate::new("b", "m1", "g", "bad sigma=1.2 #### 16"),
            ],
        );
        let bodies: Vec<Generated> = (0..10)
            .map(|i| Generated {
                body: if i == 3 { "good sigma=0.2 #### 18".into() } else { format!("bad sigma=0.3 #### {i}") },
                label: None,
            })
            .collect();
        let replay = ReplayBackend::new(HashMap::from([("m1".to_string(), bodies)]));
        let out = run_two_pass(&pool, &SpreadScorer, &ConstraintContext::default(), &replay, &cfg()).unwrap();
        assert!(out.pass2_triggered);
        assert_eq!(out.pass2_candidates.len(), 8);
        assert!(out.adopted_pass2);
        assert_eq!(out.final_candidate.as_deref(), Some("m1:pass2:3"));
        assert_eq!(out.pass2_candidates[3].label, Some(Label::correct()));
        assert_eq!(out.pass2_candidates[3].generator_id, "pass2:replay");

        let missing = ReplayBackend::default();
        let fb = run_two_pass(&pool, &SpreadScorer, &ConstraintContext::default(), &missing, &cfg()).unwrap();
        assert!(fb.backend_warning.is_some());
        assert_eq!(fb.selection, fb.pass1_selection);

        let none = run_two_pass(&pool, &SpreadScorer, &ConstraintContext::default(), &NoBackend, &cfg()).unwrap();
        assert!(none.pass2_candidates.is_empty());
        assert_eq!(none.selection, none.pass1_selection);
    }

    #[test]
    fn abstains_on_very_uncertain_selection() {
        let pool = CandidatePool::new(math_problem(), vec![Candidate::new("a", "m1", "g", "good sigma=2.0 #### 18")]);
        let out = run_two_pass(&pool, &SpreadScorer, &ConstraintContext::default(), &NoBackend, &cfg()).unwrap();
        assert!(out.abstained && out.abstained_if_triggered);
        assert_eq!(out.final_candidate, None);
        assert_eq!(out.selection.candidate_id, "a");
    }

    #[test]
    fn synthetic_backend_is_deterministic_and_labeled() {
        let backend = SyntheticBackend {
            master_seed: 4,
            accuracy: 0.5,
        };
        let p = math_problem();
        let a = backend.generate(&p, "", 8).unwrap();
        assert_eq!(a, backend.generate(&p, "", 8).unwrap());
        let pool = CandidatePool::new(p, vec![Candidate::new("a", "m1", "g", "#### 3").with_label(Label::incorrect())]);
        let out = run_two_pass(&pool, &PerfectScorer { k: 2 }, &ConstraintContext::default(), &backend, &cfg()).unwrap();
        // The perfect scorer gives sigma 0, so pass 2 only runs on a violation; math has none.
        assert!(!out.pass2_triggered);
    }
}
