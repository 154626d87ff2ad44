//! Deterministic synthetic multi-image news corpora.
//!
//! Each document follows one main person through several places. The text
//! around every image mentions the main person next to a per-image distractor
//! person in random order, so a single image and its window cannot tell the
//! two apart; only the neighbouring captions, which keep mentioning the same
//! person, can. That makes horizontal coherence learnable at desk scale.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureBundle, FeatureDims, FeatureStoreWriter};
use crate::tensor::Mat;

use super::{write_corpus, Corpus, DictionaryTagger, Document, ImageRecord, Split};

const PERSONS: &[&str] = &[
    "anna", "romeo", "juno", "marta", "oscar", "lena", "victor", "nadia", "felix", "clara", "hugo",
    "iris", "pablo", "greta", "milo", "sofia", "tomas", "elsa", "bruno", "vera", "igor", "lucia",
    "otto", "rosa", "emil", "dora", "karl", "alma", "ivan", "nina", "leon", "ada",
];
const PLACES: &[&str] = &[
    "paris", "lagos", "oslo", "lima", "cairo", "delhi", "quito", "rome", "kyiv", "seoul", "accra",
    "hanoi", "dublin", "vienna", "bogota", "manila", "tunis", "riga", "sofia_city", "porto",
];
const FILLER: &[&str] = &[
    "the", "a", "officials", "said", "on", "monday", "after", "weeks", "of", "talks", "crowd",
    "was", "large", "report", "according", "to", "sources", "later", "that", "day", "statement",
    "issued", "new", "plans", "were", "announced", "while", "critics", "remained", "skeptical",
    "market", "prices", "rose", "again", "local", "press", "covered", "event", "closely", "it",
];

/// A body verb and the caption template it implies.
const EVENTS: &[(&str, &[&str])] = &[
    ("met", &["{P}", "meets", "officials", "in", "{L}"]),
    ("arrived", &["{P}", "arrives", "in", "{L}"]),
    ("spoke", &["{P}", "speaks", "to", "crowds", "in", "{L}"]),
    ("rallied", &["{P}", "rallies", "supporters", "in", "{L}"]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub mean_images_per_doc: f64,
    pub max_images_per_doc: usize,
    pub seed: u64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    /// Filler tokens before each image mention; keep it at least the context
    /// window size so windows do not see neighbouring mentions.
    pub gap_tokens: usize,
    pub patches: usize,
    pub d_raw: usize,
    pub d_f: usize,
    pub objects: usize,
    pub d_o: usize,
    /// Number of persons and places drawn from the built-in inventories.
    pub n_persons: usize,
    pub n_places: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_docs: 200,
            mean_images_per_doc: 4.45,
            max_images_per_doc: 10,
            seed: 7,
            dev_fraction: 0.1,
            test_fraction: 0.2,
            gap_tokens: 16,
            patches: 4,
            d_raw: 8,
            d_f: 8,
            objects: 2,
            d_o: 8,
            n_persons: PERSONS.len(),
            n_places: PLACES.len(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_images_per_doc < 1 {
            return Err(Error::Config("max_images_per_doc must be at least 1".into()));
        }
        if !(1.0..=self.max_images_per_doc as f64).contains(&self.mean_images_per_doc) {
            return Err(Error::Config(format!(
                "mean_images_per_doc {} outside [1, {}]",
                self.mean_images_per_doc, self.max_images_per_doc
            )));
        }
        if self.dev_fraction < 0.0 || self.test_fraction < 0.0 || self.dev_fraction + self.test_fraction > 1.0 {
            return Err(Error::Config("split fractions must be non-negative and sum to at most 1".into()));
        }
        if !(2..=PERSONS.len()).contains(&self.n_persons) || !(1..=PLACES.len()).contains(&self.n_places) {
            return Err(Error::Config(format!(
                "n_persons must be in 2..={} and n_places in 1..={}",
                PERSONS.len(),
                PLACES.len()
            )));
        }
        Ok(())
    }

    /// Dims of the raw (toy-mode) feature bundles this generator writes.
    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            d_t: 0,
            patches: Some(self.patches),
            d_i: self.d_raw,
            max_faces: 2,
            d_f: self.d_f,
            d_o: self.d_o,
        }
    }
}

pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub tagger: DictionaryTagger,
    pub features: Vec<(String, FeatureBundle)>,
    pub dims: FeatureDims,
}

impl SyntheticCorpus {
    /// Writes `corpus.jsonl`, `entities.tsv` and a `features/` cache under `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(&self.corpus, dir.join("corpus.jsonl"))?;
        let tsv = dir.join("entities.tsv");
        std::fs::write(&tsv, self.tagger.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
        let mut w = FeatureStoreWriter::create(dir.join("features"), Some(self.dims.clone()))?;
        for (k, b) in &self.features {
            w.write(k, b)?;
        }
        w.finish()?;
        Ok(())
    }
}

fn noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            // Round through f32 so cached copies compare exactly.
            v as f32 as f64
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Images per document: `1 + Binomial(max − 1, p)` with `p` set from the
/// configured mean, sampled by stratified quantiles so the corpus mean
/// tracks the configured mean closely even for small corpora.
fn stratified_image_counts(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let extra = cfg.max_images_per_doc - 1;
    if extra == 0 {
        return vec![1; cfg.n_docs];
    }
    let p = (cfg.mean_images_per_doc - 1.0) / extra as f64;
    let mut cdf = Vec::with_capacity(extra + 1);
    let mut acc = 0.0;
    let mut coeff = 1.0;
    for k in 0..=extra {
        if k > 0 {
            coeff *= (extra - k + 1) as f64 / k as f64;
        }
        acc += coeff * p.powi(k as i32) * (1.0 - p).powi((extra - k) as i32);
        cdf.push(acc);
    }
    let n = cfg.n_docs;
    let mut counts: Vec<usize> = (0..n)
        .map(|i| {
            let u = (i as f64 + rng.random::<f64>()) / n as f64;
            1 + cdf.iter().position(|&c| u < c).unwrap_or(extra)
        })
        .collect();
    counts.shuffle(rng);
    counts
}

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let persons = &PERSONS[..cfg.n_persons];
    let places = &PLACES[..cfg.n_places];

    // Identity vectors so face features carry who is pictured.
    let person_faces: Vec<Vec<f64>> = persons
        .iter()
        .map(|_| noise(&mut rng, 1, cfg.d_f).into_vec())
        .collect();

    let image_counts = stratified_image_counts(cfg, &mut rng);

    let mut docs = Vec::with_capacity(cfg.n_docs);
    let mut features = Vec::new();
    for d in 0..cfg.n_docs {
        let n_images = image_counts[d];
        let main = rng.random_range(0..persons.len());
        let u: f64 = rng.random();
        let split = if u < cfg.test_fraction {
            Split::Test
        } else if u < cfg.test_fraction + cfg.dev_fraction {
            Split::Dev
        } else {
            Split::Train
        };

        let doc_id = format!("doc{d:05}");
        let mut body: Vec<String> = Vec::new();
        let mut images = Vec::with_capacity(n_images);
        for k in 0..n_images {
            for _ in 0..cfg.gap_tokens {
                body.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
            }
            let mut distractor = rng.random_range(0..persons.len() - 1);
            if distractor >= main {
                distractor += 1;
            }
            let place = places[rng.random_range(0..places.len())];
            let (verb, template) = EVENTS[rng.random_range(0..EVENTS.len())];
            let mut pictured = [main, distractor];
            pictured.shuffle(&mut rng);

            let position = body.len();
            for tok in [persons[pictured[0]], "and", persons[pictured[1]], verb, "in", place, "."] {
                body.push(tok.to_string());
            }
            let caption = template
                .iter()
                .map(|t| match *t {
                    "{P}" => persons[main].to_string(),
                    "{L}" => place.to_string(),
                    w => w.to_string(),
                })
                .collect();

            let feature_key = format!("{doc_id}-img{}", k + 1);
            let faces = Mat::from_rows(&[
                person_faces[pictured[0]].clone(),
                person_faces[pictured[1]].clone(),
            ]);
            features.push((
                feature_key.clone(),
                FeatureBundle {
                    x_t: Mat::zeros(0, 0),
                    x_i: noise(&mut rng, cfg.patches, cfg.d_raw),
                    x_f: faces,
                    x_o: noise(&mut rng, cfg.objects, cfg.d_o),
                },
            ));
            images.push(ImageRecord {
                image_id: format!("{doc_id}-{}", k + 1),
                position,
                caption,
                entities: Vec::new(),
                feature_key,
            });
        }
        for _ in 0..cfg.gap_tokens {
            body.push(FILLER[rng.random_range(0..FILLER.len())].to_string());
        }
        docs.push(Document {
            doc_id,
            title: vec![persons[main].to_string(), "news".to_string()],
            body,
            images,
            split,
        });
    }

    let mut tagger = DictionaryTagger::new();
    for p in persons {
        tagger.insert(p, "PERSON");
    }
    for l in places {
        tagger.insert(l, "GPE");
    }
    Ok(SyntheticCorpus {
        corpus: Corpus { docs },
        tagger,
        features,
        dims: cfg.feature_dims(),
    })
}
