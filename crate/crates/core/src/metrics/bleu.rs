use std::collections::HashMap;
use std::hash::Hash;

use super::{MetricError, Result};

/// Clipped n-gram matches and candidate n-gram total.
fn ngram_stats<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
    for g in reference.windows(n) {
        *ref_counts.entry(g).or_insert(0) += 1;
    }
    let mut cand_counts: HashMap<&[T], usize> = HashMap::new();
    for g in cand.windows(n) {
        *cand_counts.entry(g).or_insert(0) += 1;
    }
    let matches = cand_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, cand.len() - n + 1)
}

/// Combines per-order statistics: unsmoothed unigram precision, a zero
/// match count at higher orders counts as `1 / (total + 1)`.
fn combine(stats: &[(usize, usize); 4], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 || stats[0].0 == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (i, &(m, t)) in stats.iter().enumerate() {
        let p = if i == 0 {
            m as f64 / t as f64
        } else if m == 0 {
            1.0 / (t as f64 + 1.0)
        } else {
            m as f64 / t as f64
        };
        log_sum += p.ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * (log_sum / 4.0).exp()
}

pub fn bleu4_tokens<T: Eq + Hash>(cand: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let mut stats = [(0, 0); 4];
    for (n, s) in stats.iter_mut().enumerate() {
        *s = ngram_stats(cand, reference, n + 1);
    }
    Ok(combine(&stats, cand.len(), reference.len()))
}

/// Sentence-level BLEU-4 over code tokens.
pub fn bleu4(candidate: &str, reference: &str) -> Result<f64> {
    bleu4_tokens(&super::code_tokens(candidate), &super::code_tokens(reference))
}

/// Corpus-level BLEU-4: statistics pooled over all pairs before combining.
pub fn corpus_bleu4(pairs: &[(&str, &str)]) -> Result<f64> {
    let mut stats = [(0, 0); 4];
    let mut c = 0;
    let mut r = 0;
    for (cand, reference) in pairs {
        let ct = super::code_tokens(cand);
        let rt = super::code_tokens(reference);
        if rt.is_empty() {
            return Err(MetricError::EmptyReference);
        }
        for (n, s) in stats.iter_mut().enumerate() {
            let (m, t) = ngram_stats(&ct, &rt, n + 1);
            s.0 += m;
            s.1 += t;
        }
        c += ct.len();
        r += rt.len();
    }
    Ok(combine(&stats, c, r))
}
