//! Document-grouped training batches.
//!
//! Each batch is filled by repeatedly choosing a random document that still
//! has unconsumed images and taking up to `W` of them in reading order, so
//! neighbouring images of one document land in the same batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_context_window, make_fake_caption, Corpus, EntityPool, DEFAULT_WINDOW_TOKENS};
use crate::error::{Error, Result};
use crate::vocab::{BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub feature_key: String,
    /// Context window around the image.
    pub txt: Vec<String>,
    /// Caption wrapped in `<s>` ... `</s>`.
    pub true_cap: Vec<String>,
    /// Entity-replaced caption, wrapped the same way; `None` when the caption
    /// has no entities.
    pub fake_cap: Option<Vec<String>>,
    pub doc_index: usize,
    /// 1-based position of the image in its document.
    pub img_index: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub w: usize,
    pub window_tokens: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 15,
            w: 3,
            window_tokens: DEFAULT_WINDOW_TOKENS,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.w == 0 {
            return Err(Error::Validation("batch_size and W must be at least 1".into()));
        }
        if self.window_tokens < 2 {
            return Err(Error::Validation("window_tokens must be at least 2".into()));
        }
        Ok(())
    }
}

pub fn wrap_caption(tokens: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(BOS.to_string());
    out.extend_from_slice(tokens);
    out.push(EOS.to_string());
    out
}

/// Builds one epoch of batches over every document in `corpus`.
///
/// A document contributes at most one group per batch, which keeps each
/// document's items within a batch to `W` consecutive images. When the group
/// would overflow the batch it is truncated and the rest of the document waits
/// for its next selection. When every document with images left is already in
/// the current batch, the batch is emitted early. The last partial batch of
/// the epoch is kept only if it holds at least two items.
pub fn build_epoch_batches<R: Rng + ?Sized>(
    corpus: &Corpus,
    cfg: &SamplerConfig,
    pool: &EntityPool,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    cfg.validate()?;
    if corpus.n_images() == 0 {
        return Err(Error::Validation("corpus has no images".into()));
    }
    let mut next: Vec<usize> = vec![0; corpus.docs.len()];
    let mut open: Vec<usize> = (0..corpus.docs.len())
        .filter(|&d| !corpus.docs[d].images.is_empty())
        .collect();
    let mut batches = Vec::new();
    let mut current = Batch::default();
    let mut in_batch: Vec<usize> = Vec::new();

    while !open.is_empty() {
        let eligible: Vec<usize> = open.iter().copied().filter(|d| !in_batch.contains(d)).collect();
        if eligible.is_empty() {
            batches.push(std::mem::take(&mut current));
            in_batch.clear();
            continue;
        }
        let doc_index = eligible[rng.random_range(0..eligible.len())];
        let doc = &corpus.docs[doc_index];
        let room = cfg.batch_size - current.len();
        let take = cfg.w.min(doc.images.len() - next[doc_index]).min(room);
        for offset in 0..take {
            let img_index = next[doc_index] + offset + 1;
            current.items.push(make_item(corpus, doc_index, img_index, cfg, pool, rng)?);
        }
        next[doc_index] += take;
        if next[doc_index] == doc.images.len() {
            open.retain(|&d| d != doc_index);
        }
        in_batch.push(doc_index);
        if current.len() == cfg.batch_size {
            batches.push(std::mem::take(&mut current));
            in_batch.clear();
        }
    }
    if current.len() >= 2 {
        batches.push(current);
    }
    Ok(batches)
}

fn make_item<R: Rng + ?Sized>(
    corpus: &Corpus,
    doc_index: usize,
    img_index: usize,
    cfg: &SamplerConfig,
    pool: &EntityPool,
    rng: &mut R,
) -> Result<BatchItem> {
    let doc = &corpus.docs[doc_index];
    let img = doc.image(img_index)?;
    let fake = make_fake_caption(&img.caption, &img.entities, pool, rng);
    Ok(BatchItem {
        feature_key: img.feature_key.clone(),
        txt: extract_context_window(doc, img_index, cfg.window_tokens)?,
        true_cap: wrap_caption(&img.caption),
        fake_cap: fake.map(|f| wrap_caption(&f.tokens)),
        doc_index,
        img_index,
    })
}
