use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DecodeConfig, EncodedPair, FocalExample, HarnessError, Result};
use crate::corpus::SubwordVocabulary;
use crate::metrics::{bleu4, perplexity, style_similarity, topk_match_rate, MatchMode, Prediction};
use crate::model::Seq2Seq;

/// Label used for the uncustomized model in reports.
pub const BASELINE: &str = "baseline";

/// Test-fold metrics of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub project: String,
    /// Strategy name, or [`BASELINE`].
    pub method: String,
    pub fold: usize,
    pub n_test: usize,
    pub bleu4: f64,
    pub perplexity: f64,
    /// Top-k rates for k = 1..=5.
    pub exact_at: [f64; 5],
    pub abstract_at: [f64; 5],
    pub style_similarity: f64,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
}

/// Beam-decodes every test example and scores the ranked candidates.
/// BLEU is the sentence-level mean over top-1 candidates and perplexity is
/// pooled over all target tokens of the fold.
pub fn evaluate(
    model: &Seq2Seq,
    vocab: &SubwordVocabulary,
    test: &[FocalExample],
    encoded: &[EncodedPair],
    decode: &DecodeConfig,
    project: &str,
    method: &str,
    fold: usize,
) -> Result<Evaluation> {
    if test.is_empty() || test.len() != encoded.len() {
        return Err(HarnessError::EmptySplit("test"));
    }
    let per_example: Vec<(Vec<f64>, Prediction)> = test
        .par_iter()
        .zip(encoded)
        .map(|(ex, (src, tgt))| {
            let nll = model.token_nll(src, tgt)?;
            let beams = model.beam_decode(src, decode.beam_width, decode.max_len)?;
            let prediction = Prediction {
                focal_id: ex.focal_id.clone(),
                candidates: beams.iter().map(|b| vocab.decode(&b.tokens)).collect(),
                scores: beams.iter().map(|b| b.score()).collect(),
            };
            Ok((nll, prediction))
        })
        .collect::<Result<_>>()?;

    let nll: Vec<f64> = per_example.iter().flat_map(|(n, _)| n.iter().copied()).collect();
    let predictions: Vec<Prediction> = per_example.into_iter().map(|(_, p)| p).collect();
    let top1: Vec<&str> = predictions
        .iter()
        .map(|p| p.candidates.first().map(String::as_str).unwrap_or(""))
        .collect();
    let mut bleu = 0.0;
    for (cand, ex) in top1.iter().zip(test) {
        bleu += bleu4(cand, &ex.test_case)?;
    }
    let references: HashMap<String, String> =
        test.iter().map(|e| (e.focal_id.clone(), e.test_case.clone())).collect();
    let mut exact_at = [0.0; 5];
    let mut abstract_at = [0.0; 5];
    for k in 1..=5 {
        exact_at[k - 1] = topk_match_rate(&predictions, &references, k, MatchMode::Exact)?;
        abstract_at[k - 1] = topk_match_rate(&predictions, &references, k, MatchMode::Abstract)?;
    }
    let developer: Vec<&str> = test.iter().map(|e| e.test_case.as_str()).collect();
    let report = EvalReport {
        project: project.to_string(),
        method: method.to_string(),
        fold,
        n_test: test.len(),
        bleu4: bleu / test.len() as f64,
        perplexity: perplexity(&nll)?,
        exact_at,
        abstract_at,
        style_similarity: style_similarity(&top1, &developer),
    };
    Ok(Evaluation { report, predictions })
}
