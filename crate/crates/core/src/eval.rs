//! Caption-quality metrics and the horizontal coherence scores.
//!
//! All caption arguments are token lists without `<s>`/`</s>`. Bounded
//! metrics are in [0, 1].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coherence::{concat, CoherenceScorer};
use crate::corpus::EntityTagger;
use crate::decoder::end_state;
use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::model::{decoder_forward, ConCaps, ItemInput};

/// Stand-in for a zero n-gram match count in BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

type Caption = Vec<String>;

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_lengths(candidates: &[Caption], references: &[Caption]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Corpus-level BLEU-4 against a single reference per candidate: uniform
/// weights over clipped 1..4-gram precisions and the brevity penalty. An
/// order with no matches contributes `BLEU_EPSILON / total`.
pub fn bleu4(candidates: &[Caption], references: &[Caption]) -> Result<f64> {
    check_lengths(candidates, references)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let cg = ngrams(c, n);
            let rg = ngrams(r, n);
            total[n - 1] += cg.values().sum::<usize>();
            matched[n - 1] += cg.iter().map(|(g, &k)| k.min(rg.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|k| {
            let m = if matched[k] == 0 { BLEU_EPSILON } else { matched[k] as f64 };
            (m / total[k].max(1) as f64).ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * log_p.exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F-measure.
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean sentence ROUGE-L over the pairs.
pub fn rouge_l(candidates: &[Caption], references: &[Caption]) -> Result<f64> {
    check_lengths(candidates, references)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l_pair(c, r)).sum();
    Ok(sum / candidates.len() as f64)
}

/// Document frequencies of 1..4-grams over a reference corpus.
#[derive(Clone, Debug, Default)]
pub struct CiderIdf {
    df: [BTreeMap<Vec<String>, usize>; 4],
    n_refs: usize,
}

impl CiderIdf {
    pub fn from_references(references: &[Caption]) -> Self {
        let mut idf = Self {
            n_refs: references.len(),
            ..Self::default()
        };
        for r in references {
            for n in 1..=4 {
                for g in ngrams(r, n).into_keys() {
                    *idf.df[n - 1].entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        idf
    }

    /// `ln(N / max(1, df))`.
    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df[gram.len() - 1].get(gram).copied().unwrap_or(0);
        (self.n_refs.max(1) as f64 / df.max(1) as f64).ln()
    }

    fn vector(&self, tokens: &[String], n: usize) -> BTreeMap<Vec<String>, f64> {
        ngrams(tokens, n)
            .into_iter()
            .map(|(g, k)| (g.to_vec(), k as f64 * self.idf(g)))
            .collect()
    }
}

fn cosine(a: &BTreeMap<Vec<String>, f64>, b: &BTreeMap<Vec<String>, f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

/// Base CIDEr: per pair, the mean over n = 1..4 of the TF-IDF cosine
/// between candidate and reference n-gram vectors; averaged over pairs. No
/// length penalty, no clipping, no ×10 scaling.
pub fn cider(candidates: &[Caption], references: &[Caption], idf: &CiderIdf) -> Result<f64> {
    check_lengths(candidates, references)?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        let per_n: f64 = (1..=4).map(|n| cosine(&idf.vector(c, n), &idf.vector(r, n))).sum();
        sum += per_n / 4.0;
    }
    Ok(sum / candidates.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeScores {
    pub precision: f64,
    pub recall: f64,
    pub matched: usize,
    pub candidate_entities: usize,
    pub reference_entities: usize,
}

fn entity_multiset(tagger: &dyn EntityTagger, tokens: &[String]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for span in tagger.tag(tokens) {
        *m.entry(span.surface_text()).or_insert(0) += 1;
    }
    m
}

/// Micro-averaged entity precision and recall over multiset intersections
/// of entity surfaces. With no entities on a side the score is 0.
pub fn ne_precision_recall(candidates: &[Caption], references: &[Caption], tagger: &dyn EntityTagger) -> Result<NeScores> {
    check_lengths(candidates, references)?;
    let mut s = NeScores::default();
    for (c, r) in candidates.iter().zip(references) {
        let ce = entity_multiset(tagger, c);
        let re = entity_multiset(tagger, r);
        s.matched += ce.iter().map(|(e, &k)| k.min(re.get(e).copied().unwrap_or(0))).sum::<usize>();
        s.candidate_entities += ce.values().sum::<usize>();
        s.reference_entities += re.values().sum::<usize>();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    s.precision = ratio(s.matched, s.candidate_entities);
    s.recall = ratio(s.matched, s.reference_entities);
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HoriVariant {
    /// Metric model trained with only the first horizontal loss.
    One,
    /// Metric model trained with only the second horizontal loss.
    Two,
}

impl HoriVariant {
    pub fn required_lambdas(self) -> [f64; 4] {
        match self {
            HoriVariant::One => [0.0, 0.0, 1.0, 0.0],
            HoriVariant::Two => [0.0, 0.0, 0.0, 1.0],
        }
    }
}

/// Which image pairs of a document the score averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairScope {
    #[default]
    All,
    /// Only pairs at most `W - 1` images apart.
    WithinWindow(usize),
}

impl PairScope {
    pub fn pairs(self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if let PairScope::WithinWindow(w) = self {
                    if j - i + 1 > w {
                        continue;
                    }
                }
                out.push((i, j));
            }
        }
        out
    }
}

/// Mean logit over the scoped pairs of end states, earlier image first;
/// `None` when the document has no such pair.
pub fn mean_pair_logit(states: &[Vec<f64>], scorer: &dyn CoherenceScorer, scope: PairScope) -> Option<f64> {
    let pairs = scope.pairs(states.len());
    if pairs.is_empty() {
        return None;
    }
    let sum: f64 = pairs.iter().map(|&(i, j)| scorer.score(&concat(&states[i], &states[j]))).sum();
    Some(sum / pairs.len() as f64)
}

/// One image of a document to be scored: its caption, context window and
/// feature bundle.
#[derive(Clone, Copy, Debug)]
pub struct ScoredImage<'a> {
    pub caption: &'a [String],
    pub txt: &'a [String],
    pub bundle: &'a FeatureBundle,
}

/// Fails unless the metric model was trained with exactly the λ setting the
/// variant is defined by.
pub fn check_metric_model(model: &ConCaps, variant: HoriVariant) -> Result<()> {
    let want = variant.required_lambdas();
    match &model.trained_with {
        Some(cfg) if cfg.lambdas() == want => Ok(()),
        Some(cfg) => Err(Error::Config(format!(
            "metric model for variant {variant:?} must be trained with lambdas {want:?}, found {:?}",
            cfg.lambdas()
        ))),
        None => Err(Error::Config("metric model records no training lambdas".into())),
    }
}

/// Horizontal coherence score of one document's captions; `None` for
/// documents with fewer than two scored pairs' worth of images.
pub fn hori_coh_score(
    images: &[ScoredImage],
    model: &ConCaps,
    variant: HoriVariant,
    scope: PairScope,
) -> Result<Option<f64>> {
    check_metric_model(model, variant)?;
    if scope.pairs(images.len()).is_empty() {
        return Ok(None);
    }
    let mut states = Vec::with_capacity(images.len());
    for im in images {
        let ids = model.vocab.encode_caption(im.caption);
        let txt = model.vocab.encode(im.txt);
        let out = decoder_forward(model, &ids, ItemInput { txt: &txt, bundle: im.bundle })?;
        states.push(end_state(&out)?);
    }
    let head = match variant {
        HoriVariant::One => &model.hori1,
        HoriVariant::Two => &model.hori2,
    };
    Ok(mean_pair_logit(&states, &head.bind(&model.params), scope))
}

/// Everything `evaluate` reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub ne_precision: f64,
    pub ne_recall: f64,
    pub hori_coh_1: Option<f64>,
    pub hori_coh_2: Option<f64>,
    pub n_captions: usize,
}

/// Caption-quality part of the report; IDF comes from the references.
pub fn caption_metrics(candidates: &[Caption], references: &[Caption], tagger: &dyn EntityTagger) -> Result<MetricReport> {
    let idf = CiderIdf::from_references(references);
    let ne = ne_precision_recall(candidates, references, tagger)?;
    Ok(MetricReport {
        bleu4: bleu4(candidates, references)?,
        rouge_l: rouge_l(candidates, references)?,
        cider: cider(candidates, references, &idf)?,
        ne_precision: ne.precision,
        ne_recall: ne.recall,
        hori_coh_1: None,
        hori_coh_2: None,
        n_captions: candidates.len(),
    })
}
