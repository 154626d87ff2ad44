use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::tokenize;

use super::EntitySpan;

/// Anything that can mark entity mentions in a token sequence.
///
/// Implementations must return non-overlapping spans in increasing order.
pub trait EntityTagger: Send + Sync {
    fn tag(&self, tokens: &[String]) -> Vec<EntitySpan>;
}

/// Greedy longest-match dictionary tagger.
#[derive(Clone, Debug, Default)]
pub struct DictionaryTagger {
    entries: BTreeMap<Vec<String>, String>,
    max_len: usize,
}

impl DictionaryTagger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry; `surface` is tokenized the same way as captions.
    pub fn insert(&mut self, surface: &str, etype: &str) {
        let toks = tokenize(surface);
        if toks.is_empty() {
            return;
        }
        self.max_len = self.max_len.max(toks.len());
        self.entries.insert(toks, etype.to_string());
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut t = Self::new();
        for (s, e) in entries {
            t.insert(s, e);
        }
        t
    }

    /// Parses `surface<TAB>etype` lines. Blank lines and `#` comments are skipped.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut t = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, etype) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected surface<TAB>etype".into(),
            })?;
            let etype = etype.trim();
            if etype.is_empty() || tokenize(surface).is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty surface or entity type".into(),
                });
            }
            t.insert(surface, etype);
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|(s, e)| format!("{}\t{e}\n", s.join(" ")))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl EntityTagger for DictionaryTagger {
    fn tag(&self, tokens: &[String]) -> Vec<EntitySpan> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let longest = (1..=self.max_len.min(tokens.len() - i))
                .rev()
                .find_map(|len| {
                    self.entries
                        .get(&tokens[i..i + len])
                        .map(|etype| (len, etype))
                });
            match longest {
                Some((len, etype)) => {
                    spans.push(EntitySpan {
                        start: i,
                        end: i + len,
                        etype: etype.clone(),
                        surface: tokens[i..i + len].to_vec(),
                    });
                    i += len;
                }
                None => i += 1,
            }
        }
        spans
    }
}
