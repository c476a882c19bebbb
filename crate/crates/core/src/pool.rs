//! Canonical data model: problems, candidates, pools and run configuration,
//! plus JSON Lines ingestion and seeded candidate shuffling.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::constraints::kk::{PuzzleSpec, Role};
use crate::constraints::DimWeights;
use crate::error::{Error, Result};
use crate::featurize::FeaturizerConfig;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MathAnswer,
    Multichoice,
    Itinerary,
    Code,
    LogicPuzzle,
}

impl TaskKind {
    /// Whether candidates of this task carry a continuous violation score
    /// rather than a binary correctness label.
    pub fn uses_violation_score(self) -> bool {
        matches!(self, TaskKind::Itinerary)
    }
}

/// Gold answer payload. The variant in use depends on the task kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Number(f64),
    Text(String),
    Assignment(BTreeMap<String, Role>),
    Structured(serde_json::Value),
}

impl Gold {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Gold::Number(x) => Some(*x),
            Gold::Text(s) => crate::constraints::answer::parse_number(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub task_kind: TaskKind,
    pub statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Gold>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferences: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
    /// Structured puzzle for `logic_puzzle` tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub puzzle: Option<PuzzleSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correctness {
    Correct,
    Incorrect,
}

/// Ground truth for one candidate: binary correctness, or a violation score
/// in `[0, 1]` for itinerary tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Binary(Correctness),
    Violation(f64),
}

impl Label {
    pub fn correct() -> Self {
        Label::Binary(Correctness::Correct)
    }

    pub fn incorrect() -> Self {
        Label::Binary(Correctness::Incorrect)
    }

    /// Correctness under a violation threshold (ignored for binary labels).
    pub fn is_correct(self, violation_threshold: f64) -> bool {
        match self {
            Label::Binary(c) => c == Correctness::Correct,
            Label::Violation(v) => v <= violation_threshold,
        }
    }

    /// Higher is better: 1/0 for binary labels, negated violation otherwise.
    pub fn quality(self) -> f64 {
        match self {
            Label::Binary(Correctness::Correct) => 1.0,
            Label::Binary(Correctness::Incorrect) => 0.0,
            Label::Violation(v) => -v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionVerdict {
    Pass,
    WrongAnswer,
    RuntimeError,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub problem_id: String,
    pub generator_id: String,
    pub body: String,
    #[serde(default)]
    pub greedy: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_verdict: Option<ExecutionVerdict>,
}

impl Candidate {
    pub fn new(
        id: impl Into<String>,
        problem_id: impl Into<String>,
        generator_id: impl Into<String>,
        body: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            problem_id: problem_id.into(),
            generator_id: generator_id.into(),
            body: body.into(),
            greedy: false,
            label: None,
            execution_verdict: None,
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub problem: Problem,
    pub candidates: Vec<Candidate>,
    /// Seed of the shuffle applied to the original candidate order, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
}

impl CandidatePool {
    pub fn new(problem: Problem, candidates: Vec<Candidate>) -> Self {
        Self {
            problem,
            candidates,
            shuffle_seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<Label>> {
        self.candidates.iter().map(|c| c.label).collect()
    }

    /// Checks the per-record invariants. `line` is used for error reporting.
    pub fn validate(&self, line: usize) -> Result<()> {
        let p = &self.problem;
        if p.id.trim().is_empty() {
            return Err(Error::schema(line, "problem id is empty"));
        }
        if self.candidates.is_empty() {
            return Err(Error::schema(line, "pool has no candidates"));
        }
        let is_itinerary = p.task_kind == TaskKind::Itinerary;
        match p.budget {
            Some(b) if !is_itinerary => {
                return Err(Error::schema(
                    line,
                    format!("budget {b} given for non-itinerary task"),
                ))
            }
            Some(b) if !(b.is_finite() && b >= 0.0) => {
                return Err(Error::schema(line, "budget must be a nonnegative real"))
            }
            None if is_itinerary => {
                return Err(Error::schema(line, "itinerary task requires a budget"))
            }
            _ => {}
        }
        if let Some(puzzle) = &p.puzzle {
            puzzle
                .validate()
                .map_err(|e| Error::schema(line, e.to_string()))?;
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            if c.problem_id != p.id {
                return Err(Error::schema(
                    line,
                    format!(
                        "candidate `{}` has problem_id `{}` but belongs to `{}`",
                        c.id, c.problem_id, p.id
                    ),
                ));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::schema(
                    line,
                    format!("duplicate candidate id `{}`", c.id),
                ));
            }
            match c.label {
                Some(Label::Violation(v)) => {
                    if !is_itinerary {
                        return Err(Error::schema(
                            line,
                            format!("candidate `{}`: violation score on non-itinerary task", c.id),
                        ));
                    }
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::schema(
                            line,
                            format!("candidate `{}`: violation score {v} outside [0,1]", c.id),
                        ));
                    }
                }
                Some(Label::Binary(_)) if is_itinerary => {
                    return Err(Error::schema(
                        line,
                        format!("candidate `{}`: binary label on itinerary task", c.id),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolFormat {
    /// One `{"problem": .., "candidates": [..]}` object per line.
    #[default]
    Jsonl,
    /// A single JSON array of the same objects.
    JsonArray,
}

pub fn load_pools(path: impl AsRef<Path>, format: PoolFormat) -> Result<Vec<CandidatePool>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let pools = match format {
        PoolFormat::Jsonl => read_jsonl(BufReader::new(file), path)?,
        PoolFormat::JsonArray => {
            let raw: Vec<serde_json::Value> = serde_json::from_reader(BufReader::new(file))
                .map_err(|e| Error::schema(e.line(), e.to_string()))?;
            raw.into_iter()
                .enumerate()
                .map(|(i, v)| {
                    let pool: CandidatePool = serde_json::from_value(v)
                        .map_err(|e| Error::schema(i + 1, e.to_string()))?;
                    Ok((i + 1, pool))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(pools.len());
    for (line, pool) in pools {
        pool.validate(line)?;
        if !ids.insert(pool.problem.id.clone()) {
            return Err(Error::DuplicateProblemId(pool.problem.id));
        }
        out.push(pool);
    }
    Ok(out)
}

fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Vec<(usize, CandidatePool)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pool: CandidatePool =
            serde_json::from_str(&line).map_err(|e| Error::schema(line_no, e.to_string()))?;
        out.push((line_no, pool));
    }
    Ok(out)
}

pub fn save_pools(path: impl AsRef<Path>, pools: &[CandidatePool]) -> Result<()> {
    write_jsonl(path, pools)
}

/// Writes any serializable records as JSON Lines.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads JSON Lines records of any deserializable type.
pub fn read_jsonl_records<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::schema(i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Returns the pool with its candidates permuted by a seeded Fisher-Yates
/// shuffle. The greedy flag and labels travel with their candidates.
pub fn shuffle_pool(pool: &CandidatePool, seed: u64) -> CandidatePool {
    let mut out = pool.clone();
    let mut rng = seed::rng(seed::derive(seed, 0, "shuffle"));
    out.candidates.shuffle(&mut rng);
    out.shuffle_seed = Some(seed);
    out
}

/// Pipeline-wide settings. Serialized as a flat JSON object; every field has
/// a default so config files may be partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Constraint weight. `None` selects the task default (2.0 for
    /// itineraries, 1.0 otherwise).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub theta_sigma: f64,
    pub theta_abstain: f64,
    #[serde(rename = "K", alias = "k")]
    pub k: usize,
    pub max_pairs_per_problem: usize,
    pub bag_fraction: f64,
    pub n_pass2: usize,
    pub master_seed: u64,
    pub shuffle_seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub dropout: f64,
    /// Violation threshold under which an itinerary counts as correct.
    pub pass_threshold: f64,
    pub constraint_weights: DimWeights,
    pub featurizer: FeaturizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            theta_sigma: 0.8,
            theta_abstain: 1.5,
            k: 5,
            max_pairs_per_problem: 16,
            bag_fraction: 0.8,
            n_pass2: 8,
            master_seed: 42,
            shuffle_seed: 42,
            epochs: 10,
            learning_rate: 0.5,
            batch_size: 32,
            patience: 2,
            validation_fraction: 0.2,
            dropout: 0.2,
            pass_threshold: 0.0,
            constraint_weights: DimWeights::default(),
            featurizer: FeaturizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l > 0.0) {
                return bad(format!("lambda must be positive, got {l}"));
            }
        }
        if !(self.theta_sigma > 0.0 && self.theta_abstain > 0.0) {
            return bad("thresholds must be positive".into());
        }
        if self.theta_sigma >= self.theta_abstain {
            return bad(format!(
                "theta_sigma ({}) must be below theta_abstain ({})",
                self.theta_sigma, self.theta_abstain
            ));
        }
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if !(self.bag_fraction > 0.0 && self.bag_fraction <= 1.0) {
            return bad(format!("bag_fraction {} outside (0,1]", self.bag_fraction));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0,1)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0,1)".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pass_threshold) {
            return bad("pass_threshold must lie in [0,1]".into());
        }
        self.featurizer.validate()?;
        Ok(())
    }

    pub fn effective_lambda(&self, kind: TaskKind) -> f64 {
        self.lambda.unwrap_or(match kind {
            TaskKind::Itinerary => 2.0,
            _ => 1.0,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON encoding, embedded in outputs.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
