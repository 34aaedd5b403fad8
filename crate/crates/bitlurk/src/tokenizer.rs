//! Word-level tokenizer for the toy language model.
//!
//! Text is pre-split into words (runs of `[A-Za-z0-9_]`) and single
//! non-word, non-whitespace characters; whitespace only separates. The vocab
//! is frequency-ranked with a fixed reserved prefix and an optional set of
//! tokens that must be included regardless of frequency.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;

const RESERVED: [&str; 3] = ["<pad>", "<eos>", "<unk>"];

/// Splits text into word tokens (`[A-Za-z0-9_]+`) and single punctuation
/// characters. Whitespace is a separator and never appears in a token.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_ascii_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary of at most `vocab_size` entries: the three
    /// reserved tokens, then `required` tokens in the order given, then the
    /// remaining corpus tokens ranked by descending frequency with
    /// lexicographic tie-breaking. Fails if the required tokens alone do not
    /// fit.
    pub fn build<S: AsRef<str>>(
        texts: &[S],
        vocab_size: usize,
        required: &[String],
    ) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();

        for tok in required {
            if seen.contains_key(tok) {
                continue;
            }
            if tokens.len() >= vocab_size {
                return Err(Error::VocabTooSmall {
                    vocab_size,
                    token: tok.clone(),
                });
            }
            seen.insert(tok.clone(), tokens.len() as u32);
            tokens.push(tok.clone());
        }

        let mut freq: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in pretokenize(text.as_ref()) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = freq
            .into_iter()
            .filter(|(t, _)| !seen.contains_key(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (tok, _) in ranked {
            if tokens.len() >= vocab_size {
                break;
            }
            seen.insert(tok.clone(), tokens.len() as u32);
            tokens.push(tok);
        }

        Ok(Tokenizer {
            tokens,
            index: seen,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Encodes text; tokens outside the vocabulary map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        pretokenize(text)
            .into_iter()
            .map(|t| self.index.get(&t).copied().unwrap_or(UNK))
            .collect()
    }

    /// Decodes ids into a single-space-joined string. `<pad>` and `<eos>`
    /// are dropped; `<unk>` and out-of-range ids render literally.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == EOS {
                continue;
            }
            let tok = self.token_of(id).unwrap_or("<unk>");
            if !out.is_empty() {
                out.push(' ');
            }
            let _ = write!(out, "{tok}");
        }
        out
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens {
            body.push_str(tok);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(|s| s.to_string())
        {
            return Err(Error::Checkpoint(format!(
                "vocab file {} is missing the reserved token prefix",
                path.display()
            )));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Tokenizer { tokens, index })
    }
}
