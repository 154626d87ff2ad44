use std::collections::BTreeMap;

use rand::Rng;

use super::{Corpus, EntitySpan, Split};

/// How many draws [`make_fake_caption`] makes before giving up on finding a
/// surface different from the original.
pub const MAX_RESAMPLE_TRIES: usize = 10;

/// Distinct entity surfaces per entity type, collected from training captions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EntityPool {
    by_type: BTreeMap<String, Vec<Vec<String>>>,
}

impl EntityPool {
    /// Builds the pool from the tagged training split. Surfaces are sorted so
    /// the pool does not depend on document order.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut pool = Self::default();
        for (_, doc) in corpus.split(Split::Train) {
            for img in &doc.images {
                for span in &img.entities {
                    pool.insert(&span.etype, span.surface.clone());
                }
            }
        }
        pool
    }

    pub fn insert(&mut self, etype: &str, surface: Vec<String>) {
        let list = self.by_type.entry(etype.to_string()).or_default();
        if let Err(pos) = list.binary_search(&surface) {
            list.insert(pos, surface);
        }
    }

    pub fn surfaces(&self, etype: &str) -> &[Vec<String>] {
        self.by_type.get(etype).map_or(&[], Vec::as_slice)
    }

    pub fn types(&self) -> impl Iterator<Item = &str> {
        self.by_type.keys().map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FakeCaption {
    pub tokens: Vec<String>,
    pub entities: Vec<EntitySpan>,
}

/// Replaces every entity with a different, uniformly drawn surface of the
/// same type.
///
/// Returns `None` when the caption has no entities. A span is left unchanged
/// when its type's pool offers nothing but the original surface, or when
/// [`MAX_RESAMPLE_TRIES`] draws all return the original.
pub fn make_fake_caption<R: Rng + ?Sized>(
    caption: &[String],
    entities: &[EntitySpan],
    pool: &EntityPool,
    rng: &mut R,
) -> Option<FakeCaption> {
    if entities.is_empty() {
        return None;
    }
    let mut tokens = Vec::with_capacity(caption.len());
    let mut spans = Vec::with_capacity(entities.len());
    let mut cursor = 0;
    for span in entities {
        tokens.extend_from_slice(&caption[cursor..span.start]);
        let replacement = draw_replacement(&span.surface, pool.surfaces(&span.etype), rng);
        let start = tokens.len();
        tokens.extend_from_slice(&replacement);
        spans.push(EntitySpan {
            start,
            end: tokens.len(),
            etype: span.etype.clone(),
            surface: replacement,
        });
        cursor = span.end;
    }
    tokens.extend_from_slice(&caption[cursor..]);
    Some(FakeCaption {
        tokens,
        entities: spans,
    })
}

fn draw_replacement<R: Rng + ?Sized>(
    original: &[String],
    candidates: &[Vec<String>],
    rng: &mut R,
) -> Vec<String> {
    if !candidates.iter().any(|c| c != original) {
        return original.to_vec();
    }
    for _ in 0..MAX_RESAMPLE_TRIES {
        let pick = &candidates[rng.random_range(0..candidates.len())];
        if pick != original {
            return pick.clone();
        }
    }
    original.to_vec()
}
