use std::collections::BTreeSet;

/// Bumped whenever the analysis tokenizer or the stoplist changes.
pub const TOKENIZER_VERSION: &str = "analysis-v1";

/// The 50 keywords of Java SE 8 plus `_`, reserved since Java 9.
pub const JAVA_KEYWORDS: [&str; 51] = [
    "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class", "const", "continue",
    "default", "do", "double", "else", "enum", "extends", "final", "finally", "float", "for", "goto", "if",
    "implements", "import", "instanceof", "int", "interface", "long", "native", "new", "package", "private",
    "protected", "public", "return", "short", "static", "strictfp", "super", "switch", "synchronized", "this",
    "throw", "throws", "transient", "try", "void", "volatile", "while", "_",
];

pub fn is_java_keyword(word: &str) -> bool {
    JAVA_KEYWORDS.contains(&word)
}

/// Lowercased runs of letters and underscores, keywords removed, in order
/// of appearance. Digits split words and are dropped; camelCase is kept whole.
pub fn analysis_token_stream(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphabetic() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !is_java_keyword(w))
        .collect()
}

pub fn analysis_tokens(text: &str) -> BTreeSet<String> {
    analysis_token_stream(text).into_iter().collect()
}
