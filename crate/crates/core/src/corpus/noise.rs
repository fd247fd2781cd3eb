/// Words that mark a leading comment as a license header.
const LICENSE_MARKERS: [&str; 4] = ["license", "copyright", "apache", "mit"];

#[derive(Clone, Copy, PartialEq)]
enum Lit {
    Str,
    Char,
}

/// Removes `//` and `/* */` comments, leaving string and char literals
/// intact. An unterminated block comment runs to the end of the text.
pub fn strip_noise(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut lit: Option<Lit> = None;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        if let Some(kind) = lit {
            out.push(c);
            if c == '\\' {
                if let Some(n) = next {
                    out.push(n);
                    i += 2;
                    continue;
                }
            } else if (kind == Lit::Str && c == '"') || (kind == Lit::Char && c == '\'') || c == '\n' {
                lit = None;
            }
            i += 1;
            continue;
        }
        match (c, next) {
            ('/', Some('/')) => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            ('/', Some('*')) => {
                i += 2;
                while i < chars.len() && !(chars[i] == '*' && chars.get(i + 1) == Some(&'/')) {
                    i += 1;
                }
                i = (i + 2).min(chars.len());
            }
            ('"', _) => {
                lit = Some(Lit::Str);
                out.push(c);
                i += 1;
            }
            ('\'', _) => {
                lit = Some(Lit::Char);
                out.push(c);
                i += 1;
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    out
}

/// The leading comment block, if it reads like a license notice.
pub fn license_header(text: &str) -> Option<&str> {
    let trimmed = text.trim_start();
    let start = text.len() - trimmed.len();
    let end = if trimmed.starts_with("/*") {
        trimmed.find("*/").map(|e| e + 2).unwrap_or(trimmed.len())
    } else if trimmed.starts_with("//") {
        let mut end = 0;
        for line in trimmed.split_inclusive('\n') {
            if !line.trim_start().starts_with("//") {
                break;
            }
            end += line.len();
        }
        end
    } else {
        return None;
    };
    let block = &text[start..start + end];
    let lower = block.to_lowercase();
    LICENSE_MARKERS
        .iter()
        .any(|m| lower.split(|c: char| !c.is_alphanumeric()).any(|w| w == *m) || (m.len() > 3 && lower.contains(m)))
        .then_some(block)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_comment() {
        assert_eq!(strip_noise("int x; // hi"), "int x; ");
        assert_eq!(strip_noise("a // b\nc"), "a \nc");
    }

    #[test]
    fn block_comment() {
        assert_eq!(strip_noise("/* a */ y"), " y");
        assert_eq!(strip_noise("x /* never closed"), "x ");
    }

    #[test]
    fn literals_survive() {
        let s = r#"String u = "http://x/*y*/"; char c = '/'; String e = "a\"//b";"#;
        assert_eq!(strip_noise(s), s);
    }

    #[test]
    fn license_detection() {
        let t = "/*\n * Licensed under the Apache License\n */\npackage a;";
        assert!(license_header(t).is_some());
        assert_eq!(strip_noise(t).trim(), "package a;");
        assert!(license_header("/* helper */ class A {}").is_none());
        assert!(license_header("// Copyright 2020 x\n// more\nclass A {}").unwrap().ends_with("more\n"));
        assert!(license_header("/* submit form */").is_none());
    }
}
