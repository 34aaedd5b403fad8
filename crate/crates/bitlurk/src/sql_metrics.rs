//! Output-quality metrics between generated and gold SQL strings.
//!
//! A small lossless SQL tokenizer feeds four metrics: Jaccard similarity over
//! clause-level token groups (JS-T), Jaccard over SQL keywords (JS-K),
//! bag-of-words cosine similarity, and character-level Levenshtein distance.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqlTokenKind {
    Keyword,
    Identifier,
    Literal,
    Operator,
    Punctuation,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqlToken {
    pub text: String,
    pub kind: SqlTokenKind,
}

/// Keyword table used for classification, matched case-insensitively.
/// Covers the statement/clause words and column types the corpus emits.
pub const SQL_KEYWORDS: &[&str] = &[
    "SELECT", "FROM", "WHERE", "COUNT", "MAX", "MIN", "AVG", "SUM", "GROUP", "BY", "ORDER", "AND",
    "OR", "NOT", "JOIN", "ON", "DROP", "TABLE", "CREATE", "INSERT", "DELETE", "UPDATE", "AS", "IN",
    "INTO", "SET", "VALUES", "DISTINCT", "HAVING", "LIMIT", "UNION", "BETWEEN", "LIKE", "IS",
    "NULL", "ASC", "DESC", "INTEGER", "INT", "VARCHAR", "TEXT", "REAL",
];

fn is_keyword(word: &str) -> bool {
    SQL_KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(word))
}

const OPERATOR_CHARS: &str = "=<>!+-*/%";

/// Lossless tokenization: concatenating the token texts reproduces the input
/// exactly. String literals (single- or double-quoted) stay atomic, including
/// an unterminated one which swallows the rest of the input. Unknown
/// characters become punctuation tokens.
pub fn tokenize_sql(s: &str) -> Vec<SqlToken> {
    let chars: Vec<char> = s.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        let kind = if c.is_whitespace() {
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
            SqlTokenKind::Whitespace
        } else if c.is_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            if is_keyword(&word) {
                SqlTokenKind::Keyword
            } else {
                SqlTokenKind::Identifier
            }
        } else if c.is_ascii_digit() {
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            SqlTokenKind::Literal
        } else if c == '\'' || c == '"' {
            i += 1;
            while i < chars.len() && chars[i] != c {
                i += 1;
            }
            if i < chars.len() {
                i += 1; // closing quote
            }
            SqlTokenKind::Literal
        } else if OPERATOR_CHARS.contains(c) {
            i += 1;
            if i < chars.len() {
                let pair = [c, chars[i]];
                if matches!(pair, ['<', '='] | ['>', '='] | ['<', '>'] | ['!', '=']) {
                    i += 1;
                }
            }
            SqlTokenKind::Operator
        } else {
            i += 1;
            SqlTokenKind::Punctuation
        };
        tokens.push(SqlToken {
            text: chars[start..i].iter().collect(),
            kind,
        });
    }
    tokens
}

/// Keywords that open a clause-level chunk for token grouping.
const CLAUSE_KEYWORDS: &[&str] = &[
    "SELECT", "FROM", "WHERE", "GROUP", "ORDER", "HAVING", "LIMIT", "UNION", "CREATE", "DROP",
    "INSERT", "DELETE", "UPDATE", "SET", "VALUES",
];

/// Splits the token stream into clause-level chunks (a new chunk starts at
/// every clause keyword) and returns the set of chunk strings. Keywords are
/// uppercased inside chunks; whitespace is collapsed to single separators.
pub fn token_group_set(s: &str) -> BTreeSet<String> {
    let mut groups = BTreeSet::new();
    let mut current: Vec<String> = Vec::new();
    for tok in tokenize_sql(s) {
        if tok.kind == SqlTokenKind::Whitespace {
            continue;
        }
        let norm = if tok.kind == SqlTokenKind::Keyword {
            tok.text.to_ascii_uppercase()
        } else {
            tok.text.clone()
        };
        let opens_clause =
            tok.kind == SqlTokenKind::Keyword && CLAUSE_KEYWORDS.contains(&norm.as_str());
        if opens_clause && !current.is_empty() {
            groups.insert(current.join(" "));
            current.clear();
        }
        current.push(norm);
    }
    if !current.is_empty() {
        groups.insert(current.join(" "));
    }
    groups
}

/// Intersection-over-union of two sets; 1.0 when both are empty so that
/// identical (possibly empty) outputs are never penalized.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    inter / union
}

/// Set of upper-cased keyword token texts.
pub fn keywords_of(s: &str) -> BTreeSet<String> {
    tokenize_sql(s)
        .into_iter()
        .filter(|t| t.kind == SqlTokenKind::Keyword)
        .map(|t| t.text.to_ascii_uppercase())
        .collect()
}

fn word_counts(s: &str) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for w in s.split_whitespace() {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Cosine similarity of whitespace-token frequency vectors. 0.0 when either
/// vector is all-zero; exactly 1.0 when the frequency vectors coincide.
pub fn cosine_bow(a: &str, b: &str) -> f64 {
    let ca = word_counts(a);
    let cb = word_counts(b);
    if ca.is_empty() || cb.is_empty() {
        return 0.0;
    }
    if ca == cb {
        return 1.0;
    }
    let mut dot = 0.0f64;
    for (w, &na) in &ca {
        if let Some(&nb) = cb.get(w) {
            dot += na as f64 * nb as f64;
        }
    }
    let norm = |c: &BTreeMap<&str, usize>| {
        c.values()
            .map(|&n| (n * n) as f64)
            .sum::<f64>()
            .sqrt()
    };
    (dot / (norm(&ca) * norm(&cb))).clamp(0.0, 1.0)
}

/// Unit-cost edit distance over characters (insert, delete, substitute).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// All four similarity metrics for one generated/gold pair, raw-valued:
/// Jaccards and cosine in [0,1], Levenshtein as a character count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub js_t: f64,
    pub js_k: f64,
    pub cs_bow: f64,
    pub ld: usize,
}

pub fn score_pair(generated: &str, gold: &str) -> MetricVector {
    MetricVector {
        js_t: jaccard(&token_group_set(generated), &token_group_set(gold)),
        js_k: jaccard(&keywords_of(generated), &keywords_of(gold)),
        cs_bow: cosine_bow(generated, gold),
        ld: levenshtein(generated, gold),
    }
}
