use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Corpus, EntityTagger};

/// Corpus-level statistics in the layout of a dataset summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub images_per_doc: f64,
    pub n_images: usize,
    pub n_docs: usize,
    pub avg_doc_len: f64,
    pub avg_cap_len: f64,
    pub pct_captions_with_entities: f64,
    /// Share of caption tokens covered by each tag, in percent.
    pub pos_tag_percentages: BTreeMap<String, f64>,
}

pub fn corpus_stats(corpus: &Corpus, tagger: &dyn EntityTagger) -> Result<CorpusStats> {
    if corpus.docs.is_empty() {
        return Err(Error::Validation("corpus statistics need at least one document".into()));
    }
    let n_docs = corpus.docs.len();
    let n_images = corpus.n_images();
    let body_tokens: usize = corpus.docs.iter().map(|d| d.body.len()).sum();

    let mut caption_tokens = 0usize;
    let mut with_entities = 0usize;
    let mut tag_tokens: BTreeMap<String, usize> = BTreeMap::new();
    for img in corpus.docs.iter().flat_map(|d| &d.images) {
        caption_tokens += img.caption.len();
        let spans = tagger.tag(&img.caption);
        if !spans.is_empty() {
            with_entities += 1;
        }
        for s in spans {
            *tag_tokens.entry(s.etype).or_default() += s.end - s.start;
        }
    }

    let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    let mean = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(CorpusStats {
        images_per_doc: n_images as f64 / n_docs as f64,
        n_images,
        n_docs,
        avg_doc_len: body_tokens as f64 / n_docs as f64,
        avg_cap_len: mean(caption_tokens, n_images),
        pct_captions_with_entities: pct(with_entities, n_images),
        pos_tag_percentages: tag_tokens
            .into_iter()
            .map(|(tag, n)| (tag, pct(n, caption_tokens)))
            .collect(),
    })
}
