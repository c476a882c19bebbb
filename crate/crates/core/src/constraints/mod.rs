//! Deterministic constraint penalties `E_constraint = sum_j w_j * C_j`.
//!
//! Routing is by task kind: itineraries are checked against a sandbox
//! database on eight normalized dimensions, logic puzzles by statement
//! consistency, and every other task kind carries no constraint term.

pub mod answer;
pub mod itinerary;
pub mod kk;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{Candidate, Problem, TaskKind};

pub use itinerary::{Itinerary, SandboxDB};
pub use kk::{Assignment, PuzzleSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Budget,
    Connectivity,
    Completeness,
    Preferences,
    Diversity,
    Hallucination,
    Structure,
    Parse,
}

impl Dimension {
    pub const ALL: [Dimension; 8] = [
        Dimension::Budget,
        Dimension::Connectivity,
        Dimension::Completeness,
        Dimension::Preferences,
        Dimension::Diversity,
        Dimension::Hallucination,
        Dimension::Structure,
        Dimension::Parse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Budget => "budget",
            Dimension::Connectivity => "connectivity",
            Dimension::Completeness => "completeness",
            Dimension::Preferences => "preferences",
            Dimension::Diversity => "diversity",
            Dimension::Hallucination => "hallucination",
            Dimension::Structure => "structure",
            Dimension::Parse => "parse",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The eight normalized itinerary violation dimensions, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationDims {
    pub budget: f64,
    pub connectivity: f64,
    pub completeness: f64,
    pub preferences: f64,
    pub diversity: f64,
    pub hallucination: f64,
    pub structure: f64,
    pub parse: f64,
}

impl ViolationDims {
    pub fn all(value: f64) -> Self {
        Self {
            budget: value,
            connectivity: value,
            completeness: value,
            preferences: value,
            diversity: value,
            hallucination: value,
            structure: value,
            parse: value,
        }
    }

    pub fn get(&self, d: Dimension) -> f64 {
        match d {
            Dimension::Budget => self.budget,
            Dimension::Connectivity => self.connectivity,
            Dimension::Completeness => self.completeness,
            Dimension::Preferences => self.preferences,
            Dimension::Diversity => self.diversity,
            Dimension::Hallucination => self.hallucination,
            Dimension::Structure => self.structure,
            Dimension::Parse => self.parse,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Dimension, f64)> + '_ {
        Dimension::ALL.into_iter().map(move |d| (d, self.get(d)))
    }
}

/// Per-dimension weights `w_j`. Defaults to 1 everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DimWeights(pub ViolationDims);

impl Default for DimWeights {
    fn default() -> Self {
        Self::ones()
    }
}

impl DimWeights {
    pub fn ones() -> Self {
        Self(ViolationDims::all(1.0))
    }

    pub fn get(&self, d: Dimension) -> f64 {
        self.0.get(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimMessage {
    pub dimension: Dimension,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub dims: ViolationDims,
    pub violation_score: f64,
    /// One description per violated dimension.
    pub messages: Vec<DimMessage>,
}

impl ConstraintReport {
    pub fn new(dims: ViolationDims, messages: Vec<DimMessage>) -> Self {
        Self {
            violation_score: violation_score(&dims),
            dims,
            messages,
        }
    }

    /// `sum_j w_j * C_j` over the eight dimensions.
    pub fn weighted_sum(&self, weights: &DimWeights) -> f64 {
        self.dims.iter().map(|(d, v)| weights.get(d) * v).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.dims.iter().all(|(_, v)| v == 0.0)
    }
}

/// Arithmetic mean of the eight dimensions.
pub fn violation_score(dims: &ViolationDims) -> f64 {
    dims.iter().map(|(_, v)| v).sum::<f64>() / Dimension::ALL.len() as f64
}

/// Shared, read-only inputs of the constraint checkers.
#[derive(Debug, Clone)]
pub struct ConstraintContext {
    pub db: Option<SandboxDB>,
    pub weights: DimWeights,
}

impl Default for ConstraintContext {
    fn default() -> Self {
        Self {
            db: None,
            weights: DimWeights::ones(),
        }
    }
}

impl ConstraintContext {
    pub fn with_db(db: SandboxDB) -> Self {
        Self {
            db: Some(db),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval {
    /// Nonnegative; `+inf` when the candidate could not be parsed.
    pub energy: f64,
    pub report: Option<ConstraintReport>,
}

impl ConstraintEval {
    fn none() -> Self {
        Self {
            energy: 0.0,
            report: None,
        }
    }
}

/// Constraint energy of one candidate, routed by the problem's task kind.
pub fn e_constraint(problem: &Problem, candidate: &Candidate, ctx: &ConstraintContext) -> Result<ConstraintEval> {
    match problem.task_kind {
        TaskKind::Itinerary => {
            let db = ctx.db.as_ref().ok_or(Error::MissingSandbox)?;
            let budget = problem.budget.ok_or_else(|| {
                Error::InvalidConfig(format!("itinerary problem `{}` has no budget", problem.id))
            })?;
            let prefs = problem.preferences.as_deref().unwrap_or(&[]);
            let (energy, report) = itinerary::check(&candidate.body, db, budget, prefs, &ctx.weights);
            Ok(ConstraintEval {
                energy,
                report: Some(report),
            })
        }
        TaskKind::LogicPuzzle => match &problem.puzzle {
            Some(puzzle) => {
                let check = kk::kk_checker(puzzle, &candidate.body);
                Ok(ConstraintEval {
                    energy: check.e_constraint,
                    report: None,
                })
            }
            None => Ok(ConstraintEval::none()),
        },
        TaskKind::MathAnswer | TaskKind::Multichoice | TaskKind::Code => Ok(ConstraintEval::none()),
    }
}

/// Formats a currency amount without trailing zeros for whole values.
pub(crate) fn fmt_amount(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{:.0}", x.round())
    } else {
        format!("{x:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::Gold;

    fn problem(kind: TaskKind) -> Problem {
        Problem {
            id: "p".into(),
            task_kind: kind,
            statement: String::new(),
            gold: Some(Gold::Number(18.0)),
            budget: None,
            preferences: None,
            difficulty: None,
            puzzle: None,
        }
    }

    #[test]
    fn violation_score_is_mean() {
        assert_eq!(violation_score(&ViolationDims::all(0.0)), 0.0);
        assert_eq!(violation_score(&ViolationDims::all(1.0)), 1.0);
        let d = ViolationDims {
            budget: 0.10,
            ..Default::default()
        };
        assert!((violation_score(&d) - 0.0125).abs() < 1e-15);
    }

    #[test]
    fn math_and_code_tasks_carry_no_constraint() {
        let c = Candidate::new("c", "p", "g", "anything #### 3");
        for kind in [TaskKind::MathAnswer, TaskKind::Multichoice, TaskKind::Code] {
            let e = e_constraint(&problem(kind), &c, &ConstraintContext::default()).unwrap();
            assert_eq!(e.energy, 0.0);
        }
    }

    #[test]
    fn itinerary_without_db_is_an_error() {
        let mut p = problem(TaskKind::Itinerary);
        p.budget = Some(100.0);
        let c = Candidate::new("c", "p", "g", "[]");
        assert!(matches!(
            e_constraint(&p, &c, &ConstraintContext::default()),
            Err(Error::MissingSandbox)
        ));
    }

    #[test]
    fn inconsistent_puzzle_answer_costs_at_least_one() {
        let mut p = problem(TaskKind::LogicPuzzle);
        p.puzzle = Some(kk::tests::oliver_ethan());
        let c = Candidate::new("c", "p", "g", r#"{"Oliver": "knave", "Ethan": "knight"}"#);
        let e = e_constraint(&p, &c, &ConstraintContext::default()).unwrap();
        assert!(e.energy >= 1.0);
    }

    #[test]
    fn amounts_format_compactly() {
        assert_eq!(fmt_amount(160.0), "160");
        assert_eq!(fmt_amount(160.000000000001), "160");
        assert_eq!(fmt_amount(12.5), "12.50");
    }
}
