//! Whitespace tokenization and the token ↔ id vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const PAD_ID: usize = 3;
pub const N_RESERVED: usize = 4;

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// A vocabulary holding only the four reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }

    /// Reserved tokens first, then `tokens` in first-seen order, deduplicated.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for t in [BOS, EOS, UNK, PAD] {
            v.insert(t);
        }
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    /// Rebuilds the lookup index after deserialisation.
    pub fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let reserved_ok = [BOS, EOS, UNK, PAD]
            .iter()
            .enumerate()
            .all(|(i, t)| self.tokens.get(i).map(String::as_str) == Some(*t));
        if !reserved_ok {
            return Err(Error::Format("reserved tokens must occupy ids 0-3".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// `⟨S⟩ tokens ⟨/S⟩`
    pub fn encode_caption(&self, tokens: &[String]) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(BOS_ID);
        ids.extend(tokens.iter().map(|t| self.id(t)));
        ids.push(EOS_ID);
        ids
    }

    /// Maps ids back to tokens, dropping ⟨S⟩, ⟨/S⟩ and ⟨PAD⟩.
    pub fn decode_caption(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != BOS_ID && id != EOS_ID && id != PAD_ID)
            .map(|&id| self.token(id).unwrap_or(UNK).to_string())
            .collect()
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::Vocab {
                id,
                size: self.len(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::from_tokens(["juno", "launches", "juno"]);
        assert_eq!(v.id(BOS), 0);
        assert_eq!(v.id(EOS), 1);
        assert_eq!(v.id(UNK), 2);
        assert_eq!(v.id(PAD), 3);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("unseen"), UNK_ID);
    }

    #[test]
    fn tokenize_lowercases() {
        assert_eq!(tokenize("  Nasa  will\tLaunch\nJuno "), ["nasa", "will", "launch", "juno"]);
    }

    #[test]
    fn caption_round_trip() {
        let v = Vocab::from_tokens(["a", "b"]);
        let toks = tokenize("a b a");
        let ids = v.encode_caption(&toks);
        assert_eq!(ids, vec![BOS_ID, 4, 5, 4, EOS_ID]);
        assert_eq!(v.decode_caption(&ids), toks);
    }

    #[test]
    fn reindex_after_serde() {
        let v = Vocab::from_tokens(["x"]);
        let json = serde_json::to_string(&v).unwrap();
        let mut back: Vocab = serde_json::from_str(&json).unwrap();
        back.reindex().unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("x"), 4);
    }
}
