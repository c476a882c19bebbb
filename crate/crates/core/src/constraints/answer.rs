//! Final-answer extraction and matching for numeric and multiple-choice tasks.
//!
//! Candidates state their final answer after a `####` delimiter. Only the
//! text following the last delimiter counts.

use serde::{Deserialize, Serialize};

use crate::pool::{Gold, TaskKind};

pub const NUMERIC_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMatch {
    Correct,
    Incorrect,
    Unparseable,
}

/// The first whitespace-delimited token after the final `####`, if any.
pub fn extract_answer(body: &str) -> Option<&str> {
    let (_, tail) = body.rsplit_once("####")?;
    tail.split_whitespace().next()
}

/// Parses a number after stripping thousands separators, currency signs and
/// a trailing sentence period.
pub fn parse_number(token: &str) -> Option<f64> {
    let cleaned: String = token
        .trim()
        .chars()
        .filter(|c| !matches!(c, ',' | '$' | '€' | '£' | '¥'))
        .collect();
    let cleaned = cleaned.trim_end_matches('.');
    cleaned.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Zero-based choice index from a letter (`A`, `(b)`, `C.`) or a number.
pub fn parse_choice(token: &str) -> Option<usize> {
    let t = token.trim().trim_matches(|c: char| matches!(c, '(' | ')' | '.' | ':' | '[' | ']'));
    let mut chars = t.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some((c.to_ascii_uppercase() as u8 - b'A') as usize),
        _ => t.parse::<usize>().ok(),
    }
}

fn gold_choice(gold: &Gold) -> Option<usize> {
    match gold {
        Gold::Number(x) if *x >= 0.0 && x.fract() == 0.0 => Some(*x as usize),
        Gold::Text(s) => parse_choice(s),
        _ => None,
    }
}

/// Compares the extracted final answer against the gold answer.
///
/// Returns `Unparseable` when there is no answer token, when it does not
/// parse, or when the task kind is not answer-matched.
pub fn match_answer(body: &str, gold: &Gold, task_kind: TaskKind) -> AnswerMatch {
    let Some(token) = extract_answer(body) else {
        return AnswerMatch::Unparseable;
    };
    let verdict = match task_kind {
        TaskKind::MathAnswer => match (parse_number(token), gold.as_number()) {
            (Some(x), Some(g)) => Some((x - g).abs() <= NUMERIC_TOLERANCE),
            _ => None,
        },
        TaskKind::Multichoice => match (parse_choice(token), gold_choice(gold)) {
            (Some(x), Some(g)) => Some(x == g),
            _ => None,
        },
        _ => None,
    };
    match verdict {
        Some(true) => AnswerMatch::Correct,
        Some(false) => AnswerMatch::Incorrect,
        None => AnswerMatch::Unparseable,
    }
}
