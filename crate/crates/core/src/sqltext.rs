//! Lightweight SQL lexing: keyword syntax sets for Jaccard similarity,
//! SQL extraction from free-form model responses, and ORDER BY detection.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SqlTextError {
    #[error("empty SQL input")]
    Empty,
    #[error("unterminated string literal starting at byte {0}")]
    UnterminatedLiteral(usize),
    #[error("no SQL statement found in response")]
    NoSql,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Keyword,
    Identifier,
    Literal,
    Operator,
    Punctuation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlToken {
    pub lexeme: String,
    pub kind: TokenKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SqlTokenStream {
    pub tokens: Vec<SqlToken>,
}

impl SqlTokenStream {
    pub fn kinds(&self) -> Vec<TokenKind> {
        self.tokens.iter().map(|t| t.kind).collect()
    }

    pub fn joined(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.lexeme.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

const KEYWORDS: &[&str] = &[
    "ALL", "ALTER", "AND", "AS", "ASC", "AVG", "BETWEEN", "BY", "CASE", "CAST", "COUNT", "CREATE",
    "CROSS", "DELETE", "DESC", "DISTINCT", "DROP", "ELSE", "END", "EXCEPT", "EXISTS", "FROM",
    "FULL", "GLOB", "GROUP", "HAVING", "IN", "INNER", "INSERT", "INTERSECT", "INTO", "IS", "JOIN",
    "LEFT", "LIKE", "LIMIT", "MAX", "MIN", "NATURAL", "NOT", "NULL", "OFFSET", "ON", "OR", "ORDER",
    "OUTER", "RECURSIVE", "RIGHT", "SELECT", "SET", "SUM", "TABLE", "THEN", "UNION", "UPDATE",
    "USING", "VALUES", "WHEN", "WHERE", "WITH",
];

fn is_keyword(upper: &str) -> bool {
    KEYWORDS.binary_search(&upper).is_ok()
}

fn is_word_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

/// Splits SQL into tokens. Keywords are recognised case-insensitively and
/// quoted strings stay whole, quotes included.
pub fn tokenize_sql(sql: &str) -> Result<SqlTokenStream, SqlTextError> {
    if sql.trim().is_empty() {
        return Err(SqlTextError::Empty);
    }
    let chars: Vec<(usize, char)> = sql.char_indices().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    let slice = |from: usize, to: usize| -> String {
        let start = chars[from].0;
        let end = chars.get(to).map_or(sql.len(), |c| c.0);
        sql[start..end].to_string()
    };
    while i < chars.len() {
        let c = chars[i].1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let push = |tokens: &mut Vec<SqlToken>, lexeme: String, kind| {
            tokens.push(SqlToken { lexeme, kind });
        };
        match c {
            '\'' | '"' | '`' | '[' => {
                let close = if c == '[' { ']' } else { c };
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(SqlTextError::UnterminatedLiteral(chars[start].0)),
                        Some(&(_, ch)) if ch == close => {
                            // doubled quote is an escape
                            if close != ']' && chars.get(i + 1).map(|x| x.1) == Some(close) {
                                i += 2;
                                continue;
                            }
                            i += 1;
                            break;
                        }
                        Some(_) => i += 1,
                    }
                }
                let kind = if c == '`' || c == '[' {
                    TokenKind::Identifier
                } else {
                    TokenKind::Literal
                };
                push(&mut tokens, slice(start, i), kind);
            }
            c if c.is_ascii_digit() => {
                while i < chars.len() && (chars[i].1.is_ascii_alphanumeric() || chars[i].1 == '.') {
                    let ch = chars[i].1;
                    let exp_sign = (ch == 'e' || ch == 'E')
                        && matches!(chars.get(i + 1).map(|x| x.1), Some('+') | Some('-'));
                    i += if exp_sign { 2 } else { 1 };
                }
                push(&mut tokens, slice(start, i), TokenKind::Literal);
            }
            c if is_word_start(c) => {
                while i < chars.len() && is_word_char(chars[i].1) {
                    i += 1;
                }
                let word = slice(start, i);
                let upper = word.to_ascii_uppercase();
                let kind = if is_keyword(&upper) {
                    TokenKind::Keyword
                } else {
                    TokenKind::Identifier
                };
                push(&mut tokens, word, kind);
            }
            '(' | ')' | ',' | ';' | '.' => {
                i += 1;
                push(&mut tokens, c.to_string(), TokenKind::Punctuation);
            }
            _ => {
                let next = chars.get(i + 1).map(|x| x.1);
                let two = matches!(
                    (c, next),
                    ('!', Some('=')) | ('<', Some('>')) | ('<', Some('=')) | ('>', Some('=')) | ('=', Some('=')) | ('|', Some('|'))
                );
                i += if two { 2 } else { 1 };
                let kind = if "=<>!+-*/%|&~".contains(c) {
                    TokenKind::Operator
                } else {
                    TokenKind::Punctuation
                };
                push(&mut tokens, slice(start, i), kind);
            }
        }
    }
    Ok(SqlTokenStream { tokens })
}

/// The default 38-entry keyword vocabulary of binary syntax vectors.
pub const DEFAULT_VOCABULARY: &[&str] = &[
    "SELECT", "FROM", "WHERE", "GROUP BY", "HAVING", "ORDER BY", "LIMIT", "JOIN", "ON", "AS",
    "DISTINCT", "AND", "OR", "NOT", "IN", "EXISTS", "LIKE", "BETWEEN", "UNION", "INTERSECT",
    "EXCEPT", "COUNT", "SUM", "AVG", "MIN", "MAX", "ASC", "DESC", "=", "!=", "<", ">", "<=", ">=",
    "+", "-", "*", "/",
];

/// Controls which members a [`SyntaxSet`] may hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxOptions {
    pub vocabulary: BTreeSet<String>,
    /// Also add lower-cased identifiers (table/column names) as members.
    pub include_identifiers: bool,
}

impl Default for SyntaxOptions {
    fn default() -> Self {
        Self {
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            include_identifiers: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SyntaxSet {
    pub members: BTreeSet<String>,
}

impl SyntaxSet {
    pub fn from_members<I, S>(members: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            members: members.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, m: &str) -> bool {
        self.members.contains(m)
    }
}

pub fn syntax_set(sql: &str) -> Result<SyntaxSet, SqlTextError> {
    syntax_set_with(sql, &SyntaxOptions::default())
}

pub fn syntax_set_with(sql: &str, opts: &SyntaxOptions) -> Result<SyntaxSet, SqlTextError> {
    let stream = tokenize_sql(sql)?;
    Ok(syntax_set_of(&stream, opts))
}

pub fn syntax_set_of(stream: &SqlTokenStream, opts: &SyntaxOptions) -> SyntaxSet {
    let toks = &stream.tokens;
    let mut members = BTreeSet::new();
    let mut i = 0;
    while i < toks.len() {
        let tok = &toks[i];
        let candidate = match tok.kind {
            TokenKind::Keyword => {
                let upper = tok.lexeme.to_ascii_uppercase();
                let followed_by_by = toks
                    .get(i + 1)
                    .is_some_and(|n| n.kind == TokenKind::Keyword && n.lexeme.eq_ignore_ascii_case("BY"));
                if (upper == "GROUP" || upper == "ORDER") && followed_by_by {
                    i += 1;
                    Some(format!("{upper} BY"))
                } else {
                    Some(upper)
                }
            }
            TokenKind::Operator => match tok.lexeme.as_str() {
                "<>" => Some("!=".to_string()),
                "==" => Some("=".to_string()),
                // `*` counts only as multiplication, not in `count(*)` or `SELECT *`
                "*" => {
                    let binary = i > 0
                        && matches!(toks[i - 1].kind, TokenKind::Identifier | TokenKind::Literal)
                        || i > 0 && toks[i - 1].lexeme == ")";
                    binary.then(|| "*".to_string())
                }
                other => Some(other.to_string()),
            },
            TokenKind::Identifier if opts.include_identifiers => {
                members.insert(tok.lexeme.trim_matches(|c| c == '`' || c == '[' || c == ']').to_lowercase());
                None
            }
            _ => None,
        };
        if let Some(m) = candidate {
            if opts.vocabulary.contains(&m) {
                members.insert(m);
            }
        }
        i += 1;
    }
    SyntaxSet { members }
}

/// |a ∩ b| / |a ∪ b|, with two empty sets scoring 1.0.
pub fn jaccard(a: &SyntaxSet, b: &SyntaxSet) -> f64 {
    let union = a.members.union(&b.members).count();
    if union == 0 {
        return 1.0;
    }
    let inter = a.members.intersection(&b.members).count();
    inter as f64 / union as f64
}

fn fence_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z0-9_-]*[ \t]*\n?(.*?)(```|\z)").unwrap())
}

fn select_upper_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bSELECT\b").unwrap())
}

fn select_any_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bselect\b").unwrap())
}

fn with_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"(?is)\bwith\s+(recursive\s+)?[\w"`\[\]]+\s*(\([^()]*\))?\s*as\s*\("#).unwrap()
    })
}

fn blank_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\n[ \t]*\n").unwrap())
}

fn statement_start(text: &str) -> Option<usize> {
    let select = select_upper_re()
        .find(text)
        .or_else(|| select_any_re().find(text))
        .map(|m| m.start());
    let with = with_re().find(text).map(|m| m.start());
    match (select, with) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Cuts at the first `;` outside quotes, or at the first blank line.
fn statement_end(text: &str) -> usize {
    let blank = blank_line_re().find(text).map_or(text.len(), |m| m.start());
    let mut quote: Option<char> = None;
    for (i, c) in text.char_indices() {
        if i >= blank {
            break;
        }
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '\'' || c == '"' || c == '`' => quote = Some(c),
            None if c == ';' => return i,
            None => {}
        }
    }
    blank
}

fn extract_from(candidate: &str) -> Option<String> {
    let start = statement_start(candidate)?;
    let rest = &candidate[start..];
    let stmt = rest[..statement_end(rest)].trim();
    let stmt = stmt.trim_end_matches(';').trim_end();
    (!stmt.is_empty()).then(|| stmt.to_string())
}

/// Pulls the first SQL statement out of a model response.
///
/// Fenced code blocks are searched first, then the remaining text. The
/// statement starts at SELECT or WITH and ends at the first top-level
/// semicolon or blank line; the trailing semicolon is dropped.
pub fn extract_sql(raw_response: &str) -> Result<String, SqlTextError> {
    for cap in fence_re().captures_iter(raw_response) {
        if let Some(sql) = cap.get(1).and_then(|m| extract_from(m.as_str())) {
            return Ok(sql);
        }
    }
    let unfenced = fence_re().replace_all(raw_response, "\n\n");
    extract_from(&unfenced).ok_or(SqlTextError::NoSql)
}

/// True iff ORDER BY appears outside every parenthesised subquery.
pub fn has_top_level_order_by(sql: &str) -> Result<bool, SqlTextError> {
    let stream = tokenize_sql(sql)?;
    let toks = &stream.tokens;
    let mut depth = 0i32;
    for (i, t) in toks.iter().enumerate() {
        match t.lexeme.as_str() {
            "(" => depth += 1,
            ")" => depth -= 1,
            _ => {}
        }
        if depth == 0
            && t.kind == TokenKind::Keyword
            && t.lexeme.eq_ignore_ascii_case("ORDER")
            && toks
                .get(i + 1)
                .is_some_and(|n| n.lexeme.eq_ignore_ascii_case("BY"))
        {
            return Ok(true);
        }
    }
    Ok(false)
}
