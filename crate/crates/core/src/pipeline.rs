//! Corpus-level glue shared by the CLI and the end-to-end tests: decoding
//! every document, aligning captions by image, and document coherence.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{extract_context_window, make_fake_caption, Corpus, Document, EntityPool, EntityTagger};
use crate::decode::{decode_document, DecodeConfig};
use crate::error::{Error, Result};
use crate::eval::{caption_metrics, hori_coh_score, HoriVariant, MetricReport, PairScope, ScoredImage};
use crate::model::{ConCaps, ItemInput};
use crate::objective::FeatureCache;
use crate::parallel::{map, Parallelism};
use crate::vocab::{detokenize, tokenize};

/// One line of `generate` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedRecord {
    pub doc_id: String,
    pub image_id: String,
    pub caption: String,
    pub gen_score: f64,
    pub vert_score: f64,
    pub seq_score: f64,
}

/// Captions keyed by image id.
pub type CaptionSet = BTreeMap<String, Vec<String>>;

fn doc_inputs(model: &ConCaps, doc: &Document) -> Result<Vec<Vec<usize>>> {
    (1..=doc.images.len())
        .map(|k| Ok(model.vocab.encode(&extract_context_window(doc, k, model.window_tokens)?)))
        .collect()
}

/// Decodes every document of `corpus`, documents in parallel.
pub fn generate_captions(
    model: &ConCaps,
    corpus: &Corpus,
    features: &FeatureCache,
    cfg: &DecodeConfig,
    mode: Parallelism,
) -> Result<Vec<DecodedRecord>> {
    cfg.validate()?;
    let per_doc: Vec<Result<Vec<DecodedRecord>>> = map(mode, &corpus.docs, |doc| {
        if doc.images.is_empty() {
            return Ok(Vec::new());
        }
        let txts = doc_inputs(model, doc)?;
        let bundles = doc
            .images
            .iter()
            .map(|im| features.get(&im.feature_key))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<ItemInput> = txts
            .iter()
            .zip(&bundles)
            .map(|(t, b)| ItemInput { txt: t, bundle: b })
            .collect();
        let decoded = decode_document(model, &inputs, cfg, Parallelism::Sequential)?;
        Ok(doc
            .images
            .iter()
            .zip(decoded)
            .map(|(im, d)| DecodedRecord {
                doc_id: doc.doc_id.clone(),
                image_id: im.image_id.clone(),
                caption: detokenize(&model.vocab.decode_caption(&d.hypothesis.tokens)),
                gen_score: d.hypothesis.gen_score,
                vert_score: d.hypothesis.vert_score,
                seq_score: d.seq_score,
            })
            .collect())
    });
    Ok(per_doc.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

pub fn captions_from_records(records: &[DecodedRecord]) -> CaptionSet {
    records.iter().map(|r| (r.image_id.clone(), tokenize(&r.caption))).collect()
}

pub fn reference_captions(corpus: &Corpus) -> CaptionSet {
    corpus
        .docs
        .iter()
        .flat_map(|d| d.images.iter().map(|im| (im.image_id.clone(), im.caption.clone())))
        .collect()
}

/// Every caption with each entity swapped for another of the same type;
/// captions without entities are kept as they are.
pub fn scrambled_captions(corpus: &Corpus, tagger: &dyn EntityTagger, pool: &EntityPool, seed: u64) -> CaptionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CaptionSet::new();
    for doc in &corpus.docs {
        for im in &doc.images {
            let spans = tagger.tag(&im.caption);
            let cap = make_fake_caption(&im.caption, &spans, pool, &mut rng).map_or_else(|| im.caption.clone(), |f| f.tokens);
            out.insert(im.image_id.clone(), cap);
        }
    }
    out
}

fn lookup<'a>(captions: &'a CaptionSet, image_id: &str) -> Result<&'a Vec<String>> {
    captions
        .get(image_id)
        .ok_or_else(|| Error::NotFound(format!("no caption for image {image_id:?}")))
}

/// Candidate captions against the corpus references, in corpus order.
pub fn evaluate_captions(corpus: &Corpus, captions: &CaptionSet, tagger: &dyn EntityTagger) -> Result<MetricReport> {
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for doc in &corpus.docs {
        for im in &doc.images {
            cands.push(lookup(captions, &im.image_id)?.clone());
            refs.push(im.caption.clone());
        }
    }
    caption_metrics(&cands, &refs, tagger)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocScore {
    pub doc_id: String,
    /// `None` for documents without a scored pair.
    pub score: Option<f64>,
}

/// Horizontal coherence of each document's captions under a metric model.
pub fn document_coherence(
    model: &ConCaps,
    variant: HoriVariant,
    scope: PairScope,
    corpus: &Corpus,
    captions: &CaptionSet,
    features: &FeatureCache,
    mode: Parallelism,
) -> Result<Vec<DocScore>> {
    let per_doc: Vec<Result<DocScore>> = map(mode, &corpus.docs, |doc| {
        let txts = (1..=doc.images.len())
            .map(|k| extract_context_window(doc, k, model.window_tokens))
            .collect::<Result<Vec<_>>>()?;
        let bundles = doc
            .images
            .iter()
            .map(|im| features.get(&im.feature_key))
            .collect::<Result<Vec<_>>>()?;
        let caps = doc
            .images
            .iter()
            .map(|im| lookup(captions, &im.image_id))
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<ScoredImage> = (0..doc.images.len())
            .map(|k| ScoredImage {
                caption: caps[k],
                txt: &txts[k],
                bundle: &bundles[k],
            })
            .collect();
        Ok(DocScore {
            doc_id: doc.doc_id.clone(),
            score: hori_coh_score(&images, model, variant, scope)?,
        })
    });
    per_doc.into_iter().collect()
}

/// Mean over the documents that have a score.
pub fn mean_score(scores: &[DocScore]) -> Option<f64> {
    let v: Vec<f64> = scores.iter().filter_map(|s| s.score).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
