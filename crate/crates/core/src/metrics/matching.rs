use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::lexer::{lex, LexError, Token, TokenKind};
use super::{MetricError, Result};

/// Collapses whitespace runs to one space and trims.
pub fn normalize_whitespace(code: &str) -> String {
    code.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(candidate: &str, reference: &str) -> bool {
    normalize_whitespace(candidate) == normalize_whitespace(reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentRole {
    Type,
    Method,
    Var,
}

/// Role of each identifier token by position: after `new` is a type, before
/// `(` a method, before another identifier a type, capitalized a type,
/// anything else a variable.
pub(crate) fn identifier_roles(tokens: &[Token]) -> Vec<Option<IdentRole>> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.kind != TokenKind::Ident {
                return None;
            }
            let prev = i.checked_sub(1).map(|p| &tokens[p]);
            let next = tokens.get(i + 1);
            Some(if prev.is_some_and(|p| p.text == "new") {
                IdentRole::Type
            } else if next.is_some_and(|n| n.text == "(") {
                IdentRole::Method
            } else if next.is_some_and(|n| n.kind == TokenKind::Ident) {
                IdentRole::Type
            } else if t.text.chars().next().is_some_and(char::is_uppercase) {
                IdentRole::Type
            } else {
                IdentRole::Var
            })
        })
        .collect()
}

/// Code with identifiers and literals replaced by category placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AbstractedForm {
    pub tokens: Vec<String>,
}

impl std::fmt::Display for AbstractedForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

pub fn abstract_code(code: &str) -> std::result::Result<AbstractedForm, LexError> {
    let tokens = lex(code, true)?;
    let roles = identifier_roles(&tokens);
    let out = tokens
        .iter()
        .zip(roles)
        .map(|(t, role)| {
            let s = match (&t.kind, role) {
                (_, Some(IdentRole::Type)) => "TYPE",
                (_, Some(IdentRole::Method)) => "METHOD",
                (_, Some(IdentRole::Var)) => "VAR",
                (TokenKind::IntLit, _) => "INT_LIT",
                (TokenKind::FloatLit, _) => "FLOAT_LIT",
                (TokenKind::StringLit, _) => "STRING_LIT",
                (TokenKind::CharLit, _) => "CHAR_LIT",
                (TokenKind::BoolLit, _) => "BOOL_LIT",
                _ => return t.text.clone(),
            };
            s.to_string()
        })
        .collect();
    Ok(AbstractedForm { tokens: out })
}

/// Exact match, or both sides abstract to the same form. Input that fails
/// to lex only matches exactly.
pub fn abstract_match(candidate: &str, reference: &str) -> bool {
    if exact_match(candidate, reference) {
        return true;
    }
    match (
        abstract_code(&normalize_whitespace(candidate)),
        abstract_code(&normalize_whitespace(reference)),
    ) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Exact,
    Abstract,
}

impl MatchMode {
    pub fn matches(self, candidate: &str, reference: &str) -> bool {
        match self {
            MatchMode::Exact => exact_match(candidate, reference),
            MatchMode::Abstract => abstract_match(candidate, reference),
        }
    }
}

/// Ranked candidates for one focal method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub focal_id: String,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
}

/// One line of a predictions JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub focal_id: String,
    pub rank: usize,
    pub text: String,
    pub score: f64,
}

impl Prediction {
    pub fn records(&self) -> Vec<PredictionRecord> {
        self.candidates
            .iter()
            .zip(&self.scores)
            .enumerate()
            .map(|(rank, (text, &score))| PredictionRecord {
                focal_id: self.focal_id.clone(),
                rank: rank + 1,
                text: text.clone(),
                score,
            })
            .collect()
    }

    /// Regroups records by focal id, ordered by rank.
    pub fn from_records(records: Vec<PredictionRecord>) -> Vec<Prediction> {
        let mut groups: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
        for r in records {
            groups.entry(r.focal_id.clone()).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|(focal_id, mut rs)| {
                rs.sort_by_key(|r| r.rank);
                Prediction {
                    focal_id,
                    scores: rs.iter().map(|r| r.score).collect(),
                    candidates: rs.into_iter().map(|r| r.text).collect(),
                }
            })
            .collect()
    }
}

/// Fraction of references whose top-`k` candidates contain a match.
/// References without a prediction count as misses.
pub fn topk_match_rate(
    predictions: &[Prediction],
    references: &HashMap<String, String>,
    k: usize,
    mode: MatchMode,
) -> Result<f64> {
    if !(1..=5).contains(&k) {
        return Err(MetricError::BadK(k));
    }
    if references.is_empty() {
        return Err(MetricError::Empty("references"));
    }
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.focal_id.as_str(), p)).collect();
    let hits = references
        .iter()
        .filter(|(id, reference)| {
            by_id
                .get(id.as_str())
                .is_some_and(|p| p.candidates.iter().take(k).any(|c| mode.matches(c, reference)))
        })
        .count();
    Ok(hits as f64 / references.len() as f64)
}
