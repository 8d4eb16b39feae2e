use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CfdError, Result};

pub const PAD: &str = "<pad>";
pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const START_ID: usize = 1;
pub const END_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = [PAD, START, END, UNK];

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Append-only token list. Ids never change once assigned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from(SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }
}

impl Vocabulary {
    pub fn with_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::default();
        for t in tokens {
            v.push(t.into())?;
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn push(&mut self, token: String) -> Result<usize> {
        if self.contains(&token) {
            return Err(CfdError::DuplicateToken(token));
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub fn has_specials(&self) -> bool {
        SPECIAL_TOKENS
            .iter()
            .enumerate()
            .all(|(i, t)| self.token(i) == Some(*t))
    }

    /// Token ids for a caption followed by the end token. Unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .chain(std::iter::once(END_ID))
            .collect()
    }

    /// Words for ids up to (excluding) the first end token; special tokens dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != END_ID)
            .filter(|&&id| id >= SPECIAL_TOKENS.len())
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Tokens of `captions` absent from this vocabulary, in first-seen order.
    pub fn missing_tokens<'a>(&self, captions: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for cap in captions {
            for t in tokenize(cap) {
                if !self.contains(&t) && !out.contains(&t) {
                    out.push(t);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_punctuation_and_case() {
        assert_eq!(tokenize("A Red circle, on a gray-background!"), vec![
            "a", "red", "circle", "on", "a", "gray", "background"
        ]);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::with_tokens(["a", "red", "circle"]).unwrap();
        assert!(v.has_specials());
        let ids = v.encode("a red square");
        assert_eq!(ids, vec![4, 5, UNK_ID, END_ID]);
        assert_eq!(v.decode(&ids), "a red");
        assert!(matches!(
            Vocabulary::with_tokens(["a", "a"]),
            Err(CfdError::DuplicateToken(_))
        ));
    }

    #[test]
    fn missing_tokens_in_order() {
        let v = Vocabulary::with_tokens(["a", "red"]).unwrap();
        assert_eq!(v.missing_tokens(["a red star", "a blue star"]), vec!["star", "blue"]);
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::with_tokens(["x", "y"]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("y"), Some(5));
    }
}
