//! Knights-and-knaves puzzles: statement formulas, a brute-force solver and
//! the statement-consistency checker used as a constraint term.
//!
//! Puzzle files encode statements as S-expression arrays:
//!
//! ```text
//! ["knight", "Ethan"]                 Ethan is a knight
//! ["knave", "Oliver"]                 Oliver is a knave
//! "self"                              the speaker is a knight
//! ["not", f]  ["and", f, g, ...]  ["or", f, g, ...]
//! ["implies", f, g]  ["iff", f, g]
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MIN_CHARACTERS: usize = 2;
pub const MAX_CHARACTERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Knight,
    Knave,
}

impl Role {
    pub fn from_truth(knight: bool) -> Self {
        if knight {
            Role::Knight
        } else {
            Role::Knave
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_lowercase().as_str() {
            "knight" => Some(Role::Knight),
            "knave" => Some(Role::Knave),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Formula {
    Knight(String),
    Knave(String),
    /// The speaker is a knight.
    SelfKnight,
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Iff(Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn knight(name: &str) -> Self {
        Formula::Knight(name.to_string())
    }

    pub fn knave(name: &str) -> Self {
        Formula::Knave(name.to_string())
    }

    pub fn or(parts: Vec<Formula>) -> Self {
        Formula::Or(parts)
    }

    pub fn and(parts: Vec<Formula>) -> Self {
        Formula::And(parts)
    }

    /// Evaluates under `is_knight(name)`, with the self atom bound to `speaker`.
    pub fn eval(&self, speaker: &str, is_knight: &dyn Fn(&str) -> bool) -> bool {
        match self {
            Formula::Knight(n) => is_knight(n),
            Formula::Knave(n) => !is_knight(n),
            Formula::SelfKnight => is_knight(speaker),
            Formula::Not(f) => !f.eval(speaker, is_knight),
            Formula::And(fs) => fs.iter().all(|f| f.eval(speaker, is_knight)),
            Formula::Or(fs) => fs.iter().any(|f| f.eval(speaker, is_knight)),
            Formula::Implies(a, b) => !a.eval(speaker, is_knight) || b.eval(speaker, is_knight),
            Formula::Iff(a, b) => a.eval(speaker, is_knight) == b.eval(speaker, is_knight),
        }
    }

    fn atoms<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Formula::Knight(n) | Formula::Knave(n) => out.push(n),
            Formula::SelfKnight => {}
            Formula::Not(f) => f.atoms(out),
            Formula::And(fs) | Formula::Or(fs) => fs.iter().for_each(|f| f.atoms(out)),
            Formula::Implies(a, b) | Formula::Iff(a, b) => {
                a.atoms(out);
                b.atoms(out);
            }
        }
    }

    fn to_value(&self) -> Value {
        let arr = |op: &str, parts: Vec<Value>| {
            let mut v = vec![Value::String(op.into())];
            v.extend(parts);
            Value::Array(v)
        };
        match self {
            Formula::Knight(n) => arr("knight", vec![Value::String(n.clone())]),
            Formula::Knave(n) => arr("knave", vec![Value::String(n.clone())]),
            Formula::SelfKnight => Value::String("self".into()),
            Formula::Not(f) => arr("not", vec![f.to_value()]),
            Formula::And(fs) => arr("and", fs.iter().map(Formula::to_value).collect()),
            Formula::Or(fs) => arr("or", fs.iter().map(Formula::to_value).collect()),
            Formula::Implies(a, b) => arr("implies", vec![a.to_value(), b.to_value()]),
            Formula::Iff(a, b) => arr("iff", vec![a.to_value(), b.to_value()]),
        }
    }

    fn from_value(v: &Value) -> std::result::Result<Self, String> {
        match v {
            Value::String(s) if s.eq_ignore_ascii_case("self") => Ok(Formula::SelfKnight),
            Value::Array(items) => {
                let (head, rest) = items.split_first().ok_or("empty formula array")?;
                let op = head.as_str().ok_or("formula operator must be a string")?.to_lowercase();
                let name = |rest: &[Value]| -> std::result::Result<String, String> {
                    match rest {
                        [Value::String(n)] => Ok(n.clone()),
                        _ => Err(format!("`{op}` takes exactly one character name")),
                    }
                };
                let sub = |rest: &[Value]| rest.iter().map(Formula::from_value).collect::<std::result::Result<Vec<_>, _>>();
                match op.as_str() {
                    "knight" => {
                        let n = name(rest)?;
                        Ok(if n.eq_ignore_ascii_case("self") { Formula::SelfKnight } else { Formula::Knight(n) })
                    }
                    "knave" => {
                        let n = name(rest)?;
                        Ok(if n.eq_ignore_ascii_case("self") {
                            Formula::Not(Box::new(Formula::SelfKnight))
                        } else {
                            Formula::Knave(n)
                        })
                    }
                    "not" => match sub(rest)?.as_slice() {
                        [f] => Ok(Formula::Not(Box::new(f.clone()))),
                        _ => Err("`not` takes one operand".into()),
                    },
                    "and" | "or" => {
                        let parts = sub(rest)?;
                        if parts.is_empty() {
                            return Err(format!("`{op}` needs at least one operand"));
                        }
                        Ok(if op == "and" { Formula::And(parts) } else { Formula::Or(parts) })
                    }
                    "implies" | "iff" => match sub(rest)?.as_slice() {
                        [a, b] => {
                            let (a, b) = (Box::new(a.clone()), Box::new(b.clone()));
                            Ok(if op == "implies" { Formula::Implies(a, b) } else { Formula::Iff(a, b) })
                        }
                        _ => Err(format!("`{op}` takes two operands")),
                    },
                    other => Err(format!("unknown connective `{other}`")),
                }
            }
            other => Err(format!("invalid formula node {other}")),
        }
    }
}

impl Serialize for Formula {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Formula {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        Formula::from_value(&v).map_err(D::Error::custom)
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Knight(n) => write!(f, "{n} is a knight"),
            Formula::Knave(n) => write!(f, "{n} is a knave"),
            Formula::SelfKnight => write!(f, "I am a knight"),
            Formula::Not(x) => write!(f, "it is false that ({x})"),
            Formula::And(xs) | Formula::Or(xs) => {
                let sep = if matches!(self, Formula::And(_)) { " and " } else { " or " };
                let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
                write!(f, "{}", parts.join(sep))
            }
            Formula::Implies(a, b) => write!(f, "if {a} then {b}"),
            Formula::Iff(a, b) => write!(f, "{a} if and only if {b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuzzleSpec {
    pub characters: Vec<String>,
    pub statements: BTreeMap<String, Formula>,
}

/// Total map from character name to role.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment(pub BTreeMap<String, Role>);

impl Assignment {
    pub fn role(&self, name: &str) -> Option<Role> {
        self.0.get(name).copied()
    }

    /// Canonical compact text form, e.g. `Ethan=knight,Oliver=knight`.
    pub fn key(&self) -> String {
        self.0
            .iter()
            .map(|(n, r)| format!("{n}={}", if *r == Role::Knight { "knight" } else { "knave" }))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl PuzzleSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.characters.len();
        if !(MIN_CHARACTERS..=MAX_CHARACTERS).contains(&n) {
            return Err(Error::InvalidPuzzle(format!(
                "{n} characters, expected {MIN_CHARACTERS} to {MAX_CHARACTERS}"
            )));
        }
        let mut names = self.characters.clone();
        names.sort();
        names.dedup();
        if names.len() != n {
            return Err(Error::InvalidPuzzle("duplicate character names".into()));
        }
        if self.statements.len() != n {
            return Err(Error::InvalidPuzzle(format!(
                "{} statements for {n} characters",
                self.statements.len()
            )));
        }
        for c in &self.characters {
            let stmt = self
                .statements
                .get(c)
                .ok_or_else(|| Error::InvalidPuzzle(format!("no statement for `{c}`")))?;
            let mut atoms = Vec::new();
            stmt.atoms(&mut atoms);
            if let Some(a) = atoms.iter().find(|a| !self.characters.iter().any(|c| c == *a)) {
                return Err(Error::InvalidPuzzle(format!("`{c}` mentions undeclared `{a}`")));
            }
        }
        Ok(())
    }

    fn index_of(&self, name: &str) -> usize {
        self.characters.iter().position(|c| c == name).expect("validated atom")
    }

    /// Per-character consistency of an assignment given as a bitmask
    /// (bit i set = character i is a knight).
    fn consistent_mask(&self, mask: u32) -> impl Iterator<Item = bool> + '_ {
        let is_knight = move |n: &str| mask >> self.index_of(n) & 1 == 1;
        self.characters.iter().enumerate().map(move |(i, c)| {
            let knight = mask >> i & 1 == 1;
            knight == self.statements[c].eval(c, &is_knight)
        })
    }

    fn mask_of(&self, a: &Assignment) -> Option<u32> {
        let mut mask = 0;
        for (i, c) in self.characters.iter().enumerate() {
            match a.role(c)? {
                Role::Knight => mask |= 1 << i,
                Role::Knave => {}
            }
        }
        Some(mask)
    }

    fn assignment_of(&self, mask: u32) -> Assignment {
        Assignment(
            self.characters
                .iter()
                .enumerate()
                .map(|(i, c)| (c.clone(), Role::from_truth(mask >> i & 1 == 1)))
                .collect(),
        )
    }

    /// Names of characters whose role disagrees with the truth of their statement.
    pub fn inconsistent_characters(&self, a: &Assignment) -> Option<Vec<&str>> {
        let mask = self.mask_of(a)?;
        Some(
            self.characters
                .iter()
                .zip(self.consistent_mask(mask))
                .filter(|(_, ok)| !ok)
                .map(|(c, _)| c.as_str())
                .collect(),
        )
    }

    /// Every consistent assignment, by exhaustive enumeration.
    pub fn all_solutions(&self) -> Vec<Assignment> {
        (0..1u32 << self.characters.len())
            .filter(|&m| self.consistent_mask(m).all(|ok| ok))
            .map(|m| self.assignment_of(m))
            .collect()
    }
}

/// Returns the unique consistent assignment of an (already valid) puzzle.
pub fn solve_kk(puzzle: &PuzzleSpec) -> Result<Assignment> {
    puzzle.validate()?;
    let mut sols = puzzle.all_solutions();
    match sols.len() {
        0 => Err(Error::NoSolution),
        1 => Ok(sols.pop().expect("one solution")),
        n => Err(Error::MultipleSolutions(n)),
    }
}

/// Extracts the last JSON object in `body` that assigns a role to every
/// character of the puzzle (names matched case-insensitively).
pub fn parse_assignment(body: &str, characters: &[String]) -> Option<Assignment> {
    super::itinerary::json_values(body, b'{')
        .into_iter()
        .rev()
        .find_map(|v| {
            let obj = v.as_object()?;
            if obj.len() != characters.len() {
                return None;
            }
            let mut out = BTreeMap::new();
            for (k, v) in obj {
                let name = characters.iter().find(|c| c.eq_ignore_ascii_case(k.trim()))?;
                let role = Role::parse(v.as_str()?)?;
                if out.insert(name.clone(), role).is_some() {
                    return None;
                }
            }
            Some(Assignment(out))
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KkCheck {
    /// 0 when consistent, one per inconsistent character, `+inf` on parse failure.
    pub e_constraint: f64,
    pub parsed: Option<Assignment>,
}

pub fn kk_checker(puzzle: &PuzzleSpec, candidate_body: &str) -> KkCheck {
    let parsed = parse_assignment(candidate_body, &puzzle.characters);
    let e_constraint = match &parsed {
        None => f64::INFINITY,
        Some(a) => puzzle
            .inconsistent_characters(a)
            .map_or(f64::INFINITY, |bad| bad.len() as f64),
    };
    KkCheck { e_constraint, parsed }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn oliver_ethan() -> PuzzleSpec {
        serde_json::from_str(
            r#"{"characters": ["Oliver", "Ethan"],
                "statements": {"Oliver": ["knight", "Ethan"],
                               "Ethan": ["or", ["knave", "Oliver"], "self"]}}"#,
        )
        .unwrap()
    }

    fn both_knights() -> Assignment {
        Assignment(
            [("Oliver".to_string(), Role::Knight), ("Ethan".to_string(), Role::Knight)]
                .into_iter()
                .collect(),
        )
    }

    #[test]
    fn solves_reference_puzzle() {
        assert_eq!(solve_kk(&oliver_ethan()).unwrap(), both_knights());
    }

    #[test]
    fn self_affirmation_is_ambiguous() {
        let p = PuzzleSpec {
            characters: vec!["A".into(), "B".into()],
            statements: [
                ("A".to_string(), Formula::knight("A")),
                ("B".to_string(), Formula::knight("A")),
            ]
            .into_iter()
            .collect(),
        };
        assert!(matches!(solve_kk(&p), Err(Error::MultipleSolutions(2))));
    }

    #[test]
    fn liar_paradox_has_no_solution() {
        let p = PuzzleSpec {
            characters: vec!["A".into(), "B".into()],
            statements: [
                ("A".to_string(), Formula::knave("A")),
                ("B".to_string(), Formula::knight("B")),
            ]
            .into_iter()
            .collect(),
        };
        assert!(matches!(solve_kk(&p), Err(Error::NoSolution)));
    }

    #[test]
    fn validation_catches_bad_puzzles() {
        let mut p = oliver_ethan();
        p.statements.insert("Oliver".into(), Formula::knight("Zed"));
        assert!(p.validate().is_err());
        let mut p = oliver_ethan();
        p.statements.remove("Ethan");
        assert!(p.validate().is_err());
        let p = PuzzleSpec {
            characters: vec!["A".into()],
            statements: [("A".to_string(), Formula::SelfKnight)].into_iter().collect(),
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn checker_scores_reference_answer() {
        let p = oliver_ethan();
        let body = "If Oliver is a knight ... Consistent.\n{\"Oliver\": \"knight\", \"Ethan\": \"knight\"}";
        let c = kk_checker(&p, body);
        assert_eq!(c.e_constraint, 0.0);
        assert_eq!(c.parsed, Some(both_knights()));
    }

    #[test]
    fn checker_penalizes_swaps_and_garbage() {
        let p = oliver_ethan();
        let c = kk_checker(&p, r#"{"Oliver": "knave", "Ethan": "knave"}"#);
        assert!(c.e_constraint > 0.0);
        assert!(kk_checker(&p, "Oliver is a knight").e_constraint.is_infinite());
        assert!(kk_checker(&p, r#"{"Oliver": "knight"}"#).e_constraint.is_infinite());
        assert!(kk_checker(&p, r#"{"Oliver": "knight", "Ethan": "spy"}"#).e_constraint.is_infinite());
    }

    #[test]
    fn last_object_is_used() {
        let p = oliver_ethan();
        let body = r#"Maybe {"Oliver": "knave", "Ethan": "knave"}? No: {"oliver": "Knight", "ethan": "KNIGHT"}"#;
        assert_eq!(kk_checker(&p, body).e_constraint, 0.0);
    }

    #[test]
    fn formula_json_round_trip() {
        let f: Formula = serde_json::from_str(
            r#"["iff", ["and", ["knight", "A"], ["not", ["knave", "B"]]], ["implies", "self", ["or", ["knave", "C"]]]]"#,
        )
        .unwrap();
        let back: Formula = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(f, back);
        assert!(serde_json::from_str::<Formula>(r#"["xor", "self"]"#).is_err());
    }
}
