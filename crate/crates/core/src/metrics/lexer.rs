//! Tokenizer for Java-like code, tolerant of the fragments models produce.

use crate::corpus::is_java_keyword;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Ident,
    Keyword,
    IntLit,
    FloatLit,
    StringLit,
    CharLit,
    BoolLit,
    Punct,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LexError {
    #[error("unterminated literal at byte {0}")]
    Unterminated(usize),
    #[error("unexpected character {1:?} at byte {0}")]
    Unexpected(usize, char),
}

const OPERATORS: [&str; 24] = [
    ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=", ">=", "+=", "-=", "*=",
    "/=", "%=", "&=", "|=", "^=", "<<",
];
const SINGLE: &str = "(){}[];,.@=<>!~?:+-*/&|^%";

/// Splits code into tokens. Strict mode fails on stray characters and
/// unterminated literals; lenient mode skips the former and closes the
/// latter at end of line.
pub fn lex(code: &str, strict: bool) -> Result<Vec<Token>, LexError> {
    let chars: Vec<(usize, char)> = code.char_indices().collect();
    let n = chars.len();
    let at = |i: usize| if i < n { chars[i].0 } else { code.len() };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c.is_alphabetic() || c == '_' || c == '$' {
            let mut j = i + 1;
            while j < n && (chars[j].1.is_alphanumeric() || chars[j].1 == '_' || chars[j].1 == '$') {
                j += 1;
            }
            let text = &code[pos..at(j)];
            let kind = if text == "true" || text == "false" {
                TokenKind::BoolLit
            } else if is_java_keyword(text) || text == "null" {
                TokenKind::Keyword
            } else {
                TokenKind::Ident
            };
            out.push(Token { kind, text: text.to_string() });
            i = j;
            continue;
        }
        let digit_start = c.is_ascii_digit() || (c == '.' && i + 1 < n && chars[i + 1].1.is_ascii_digit());
        if digit_start {
            let mut j = i;
            let mut float = false;
            let hex = c == '0' && i + 1 < n && matches!(chars[i + 1].1, 'x' | 'X');
            if hex {
                j += 2;
            }
            while j < n {
                let d = chars[j].1;
                if d.is_ascii_digit() || d == '_' || (hex && d.is_ascii_hexdigit()) {
                    j += 1;
                } else if d == '.' && !hex && !float && !(j + 1 < n && chars[j + 1].1 == '.') {
                    float = true;
                    j += 1;
                } else if matches!(d, 'e' | 'E') && !hex {
                    float = true;
                    j += 1;
                    if j < n && matches!(chars[j].1, '+' | '-') {
                        j += 1;
                    }
                } else {
                    break;
                }
            }
            if j < n && matches!(chars[j].1, 'f' | 'F' | 'd' | 'D') && !hex {
                float = true;
                j += 1;
            } else if j < n && matches!(chars[j].1, 'l' | 'L') {
                j += 1;
            }
            let kind = if float { TokenKind::FloatLit } else { TokenKind::IntLit };
            out.push(Token { kind, text: code[pos..at(j)].to_string() });
            i = j;
            continue;
        }
        if c == '"' || c == '\'' {
            let mut j = i + 1;
            let mut closed = false;
            while j < n {
                let d = chars[j].1;
                if d == '\\' {
                    j += 2;
                    continue;
                }
                if d == '\n' {
                    break;
                }
                j += 1;
                if d == c {
                    closed = true;
                    break;
                }
            }
            let j = j.min(n);
            if !closed && strict {
                return Err(LexError::Unterminated(pos));
            }
            let kind = if c == '"' { TokenKind::StringLit } else { TokenKind::CharLit };
            out.push(Token { kind, text: code[pos..at(j)].to_string() });
            i = j;
            continue;
        }
        let rest = &code[pos..];
        if let Some(op) = OPERATORS.iter().find(|op| rest.starts_with(**op)) {
            out.push(Token { kind: TokenKind::Punct, text: op.to_string() });
            i += op.chars().count();
            continue;
        }
        if SINGLE.contains(c) {
            out.push(Token { kind: TokenKind::Punct, text: c.to_string() });
        } else if strict {
            return Err(LexError::Unexpected(pos, c));
        }
        i += 1;
    }
    Ok(out)
}

/// Token texts used for n-gram metrics.
pub fn code_tokens(code: &str) -> Vec<String> {
    lex(code, false).unwrap_or_default().into_iter().map(|t| t.text).collect()
}
