//! Evaluation metrics: BLEU-4, perplexity, exact and abstracted match,
//! identifier style similarity and the Kruskal-Wallis test.

mod bleu;
mod lexer;
mod matching;
mod stats;
mod style;

pub use bleu::{bleu4, bleu4_tokens, corpus_bleu4};
pub use lexer::{code_tokens, lex, LexError, Token, TokenKind};
pub use matching::{
    abstract_code, abstract_match, exact_match, normalize_whitespace, topk_match_rate, AbstractedForm, IdentRole,
    MatchMode, Prediction, PredictionRecord,
};
pub use stats::{average_ranks, kruskal_wallis, mean, median, KWTestResult};
pub use style::{style_identifiers, style_similarity, style_similarity_with_background, tfidf_cosine};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("empty reference")]
    EmptyReference,
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("k = {0} is outside 1..=5")]
    BadK(usize),
    #[error("non-finite value")]
    NonFinite,
    #[error("invalid groups: {0}")]
    Groups(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// `exp` of the mean negative log-likelihood.
pub fn perplexity(per_token_nll: &[f64]) -> Result<f64> {
    if per_token_nll.is_empty() {
        return Err(MetricError::Empty("nll sequence"));
    }
    if per_token_nll.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(mean(per_token_nll).exp())
}
