use std::collections::{BTreeMap, BTreeSet};

use super::lexer::lex;
use super::matching::{identifier_roles, IdentRole};

/// Lowercased variable and method names, in order.
pub fn style_identifiers(code: &str) -> Vec<String> {
    let tokens = lex(code, false).unwrap_or_default();
    let roles = identifier_roles(&tokens);
    tokens
        .iter()
        .zip(roles)
        .filter(|(_, r)| matches!(r, Some(IdentRole::Var | IdentRole::Method)))
        .map(|(t, _)| t.text.to_lowercase())
        .collect()
}

fn counts(docs: &[&str]) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for d in docs {
        for w in style_identifiers(d) {
            *m.entry(w).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// Cosine of tf-idf vectors built from raw term counts with smoothed idf
/// `ln((1 + n) / (1 + df)) + 1`.
pub fn tfidf_cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>, background: &[BTreeMap<String, f64>]) -> f64 {
    let n = 2 + background.len();
    let docs: Vec<&BTreeMap<String, f64>> = [a, b].into_iter().chain(background).collect();
    let vocab: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for w in vocab {
        let df = docs.iter().filter(|d| d.contains_key(w)).count();
        let idf = ((1.0 + n as f64) / (1.0 + df as f64)).ln() + 1.0;
        let x = a.get(w).copied().unwrap_or(0.0) * idf;
        let y = b.get(w).copied().unwrap_or(0.0) * idf;
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 1.0)
}

/// Identifier-level similarity of generated and developer-written tests,
/// each side pooled into one document.
pub fn style_similarity(generated: &[&str], developer: &[&str]) -> f64 {
    style_similarity_with_background(generated, developer, &[])
}

pub fn style_similarity_with_background(generated: &[&str], developer: &[&str], background: &[&str]) -> f64 {
    let a = counts(generated);
    let b = counts(developer);
    if a.is_empty() || b.is_empty() {
        log::warn!("style similarity: no identifiers on one side, scoring 0");
        return 0.0;
    }
    let bg: Vec<_> = background.iter().map(|d| counts(&[d])).collect();
    tfidf_cosine(&a, &b, &bg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifier_extraction() {
        assert_eq!(style_identifiers("Foo foo = new Foo(); foo.bar(x);"), vec!["foo", "foo", "bar", "x"]);
    }

    #[test]
    fn extremes() {
        assert!((style_similarity(&["a = b;"], &["b = a;"]) - 1.0).abs() < 1e-12);
        assert_eq!(style_similarity(&["a;"], &["b;"]), 0.0);
        assert_eq!(style_similarity(&["Foo"], &["b;"]), 0.0);
    }

    #[test]
    fn hand_tfidf() {
        // Both terms appear in both documents, so idf is 1 and the vectors
        // are (2,1) and (1,2): cosine 4/5.
        let v = style_similarity(&["a; a; b;"], &["a; b; b;"]);
        assert!((v - 0.8).abs() < 1e-12);
        // With a background document holding only `a`, idf(a) = ln(4/4)+1 = 1
        // and idf(b) = ln(4/3)+1.
        let ib = (4.0f64 / 3.0).ln() + 1.0;
        let expected = (2.0 + 2.0 * ib * ib) / ((4.0 + ib * ib) * (1.0 + 4.0 * ib * ib)).sqrt();
        let w = style_similarity_with_background(&["a; a; b;"], &["a; b; b;"], &["a;"]);
        assert!((w - expected).abs() < 1e-12);
    }
}
