//! Lexical metrics for C-like source text.
//!
//! No parsing happens here. Comments and string literals are stripped, the
//! remainder is split into tokens, and a handful of token patterns are
//! counted. That is enough to be stable across C, C++, C#, Java, JS and
//! similar languages without a grammar per language.

use serde::{Deserialize, Serialize};

use crate::model::{FileChange, StorageType};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodeMetricsError {
    #[error("`{0}` is not a code file")]
    NotACodeFile(String),
    #[error("`{0}` is not valid UTF-8 text")]
    UndecodableText(String),
}

impl CodeMetricsError {
    pub fn code(&self) -> &'static str {
        match self {
            CodeMetricsError::NotACodeFile(_) => "features.NotACodeFile",
            CodeMetricsError::UndecodableText(_) => "features.UndecodableText",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CodeMetrics {
    pub tokens: u32,
    pub functions: u32,
    pub function_parameters: u32,
    pub comments: u32,
    pub imports: u32,
    pub complexity: u32,
}

impl CodeMetrics {
    /// Metrics of a file that does not exist. Unlike an empty file this has
    /// complexity 0.
    pub const ABSENT: CodeMetrics = CodeMetrics {
        tokens: 0,
        functions: 0,
        function_parameters: 0,
        comments: 0,
        imports: 0,
        complexity: 0,
    };
}

const BRANCH_TOKENS: [&str; 8] = ["if", "for", "while", "case", "catch", "&&", "||", "?"];

const NOT_FUNCTIONS: [&str; 12] = [
    "if", "for", "while", "switch", "catch", "return", "sizeof", "else", "do", "new", "delete", "foreach",
];

const MULTI_CHAR_OPS: [&str; 24] = [
    "<<=", ">>=", "...", "->", "::", "&&", "||", "==", "!=", "<=", ">=", "++", "--", "+=", "-=", "*=", "/=", "%=",
    "&=", "|=", "^=", "<<", ">>", "??",
];

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token<'a> {
    text: &'a str,
    line_start: bool,
}

struct Lexed<'a> {
    tokens: Vec<Token<'a>>,
    comments: u32,
}

fn is_ident_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_' || c >= 0x80
}

fn lex(src: &str) -> Lexed<'_> {
    let b = src.as_bytes();
    let mut i = 0;
    let mut tokens = Vec::new();
    let mut comments = 0;
    let mut line_start = true;
    while i < b.len() {
        let c = b[i];
        if c == b'\n' {
            line_start = true;
            i += 1;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'/' && b.get(i + 1) == Some(&b'/') {
            comments += 1;
            while i < b.len() && b[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == b'/' && b.get(i + 1) == Some(&b'*') {
            comments += 1;
            i += 2;
            while i < b.len() && !(b[i] == b'*' && b.get(i + 1) == Some(&b'/')) {
                i += 1;
            }
            i = (i + 2).min(b.len());
            continue;
        }
        let start = i;
        if c == b'"' || c == b'\'' || c == b'`' {
            i += 1;
            while i < b.len() && b[i] != c {
                if b[i] == b'\\' {
                    i += 1;
                } else if b[i] == b'\n' && c != b'`' {
                    break;
                }
                i += 1;
            }
            i = (i + 1).min(b.len());
        } else if is_ident_char(c) {
            while i < b.len() && is_ident_char(b[i]) {
                i += 1;
            }
        } else {
            let rest = &src[i..];
            let op = MULTI_CHAR_OPS.iter().find(|op| rest.starts_with(**op));
            i += op.map_or_else(|| rest.chars().next().map_or(1, char::len_utf8), |op| op.len());
        }
        // `?.` is member access, not a conditional
        let text = &src[start..i];
        let text = if text == "?" && b.get(i) == Some(&b'.') {
            i += 1;
            &src[start..i]
        } else {
            text
        };
        tokens.push(Token { text, line_start });
        line_start = false;
    }
    Lexed { tokens, comments }
}

fn is_identifier(t: &str) -> bool {
    t.bytes()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == b'_' || c >= 0x80)
}

/// Count of parameters if `tokens[open]` starts a parameter list followed by
/// a block, i.e. a function definition.
fn function_at(tokens: &[Token<'_>], open: usize) -> Option<u32> {
    let mut depth = 0usize;
    let mut params = 0u32;
    let mut saw_param_token = false;
    let mut only_void = true;
    let mut j = open;
    while j < tokens.len() {
        match tokens[j].text {
            "(" => depth += 1,
            ")" => {
                depth -= 1;
                if depth == 0 {
                    break;
                }
            }
            "," if depth == 1 => params += 1,
            "{" | "}" | ";" => return None,
            t => {
                if depth >= 1 {
                    saw_param_token = true;
                    if t != "void" {
                        only_void = false;
                    }
                }
            }
        }
        j += 1;
    }
    if j >= tokens.len() {
        return None;
    }
    j += 1;
    // qualifiers such as `const`, `override`, `noexcept`, `throws X`
    while j < tokens.len() && is_identifier(tokens[j].text) {
        j += 1;
    }
    if tokens.get(j).map(|t| t.text) != Some("{") {
        return None;
    }
    Some(if !saw_param_token || only_void { 0 } else { params + 1 })
}

/// Metrics for a source text.
pub fn code_metrics(src: &str) -> CodeMetrics {
    let Lexed { tokens, comments } = lex(src);
    let mut m = CodeMetrics {
        tokens: tokens.len() as u32,
        comments,
        complexity: 1,
        ..CodeMetrics::default()
    };
    for (k, t) in tokens.iter().enumerate() {
        if BRANCH_TOKENS.contains(&t.text) {
            m.complexity += 1;
        }
        if t.line_start {
            let directive = match t.text {
                "#" => tokens.get(k + 1).map(|n| n.text) == Some("include"),
                "import" | "using" => true,
                _ => false,
            };
            if directive {
                m.imports += 1;
            }
        }
        if t.text == "(" && k > 0 {
            let prev = tokens[k - 1].text;
            if is_identifier(prev) && !NOT_FUNCTIONS.contains(&prev) {
                if let Some(p) = function_at(&tokens, k) {
                    m.functions += 1;
                    m.function_parameters += p;
                }
            }
        }
    }
    m
}

/// Metrics for raw bytes; fails if they are not UTF-8.
pub fn code_metrics_bytes(path: &str, bytes: &[u8]) -> Result<CodeMetrics, CodeMetricsError> {
    std::str::from_utf8(bytes)
        .map(code_metrics)
        .map_err(|_| CodeMetricsError::UndecodableText(path.to_string()))
}

/// Metrics for a changed file's post-image content.
pub fn file_metrics(change: &FileChange, content: &str) -> Result<CodeMetrics, CodeMetricsError> {
    if !change.is_code || change.storage_type == StorageType::Binary {
        return Err(CodeMetricsError::NotACodeFile(change.path.clone()));
    }
    Ok(code_metrics(content))
}
