//! Multi-image news documents: loading, context windows, entity tagging,
//! fake-caption construction and corpus statistics.

mod fake;
mod stats;
pub mod synth;
mod tagger;
mod window;

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{detokenize, tokenize};

pub use fake::{make_fake_caption, EntityPool, FakeCaption, MAX_RESAMPLE_TRIES};
pub use stats::{corpus_stats, CorpusStats};
pub use tagger::{DictionaryTagger, EntityTagger};
pub use window::{context_window_bounds, extract_context_window, DEFAULT_WINDOW_TOKENS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// A tagged entity mention inside a caption; `end` is exclusive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: String,
    pub surface: Vec<String>,
}

impl EntitySpan {
    pub fn surface_text(&self) -> String {
        self.surface.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    /// Token offset into the document body.
    pub position: usize,
    pub caption: Vec<String>,
    /// Filled by [`Corpus::tag`]; empty straight after loading.
    pub entities: Vec<EntitySpan>,
    pub feature_key: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub title: Vec<String>,
    pub body: Vec<String>,
    /// Ordered by body position; the k-th image has image index k (1-based).
    pub images: Vec<ImageRecord>,
    pub split: Split,
}

impl Document {
    /// The image with 1-based index `img_index`.
    pub fn image(&self, img_index: usize) -> Result<&ImageRecord> {
        img_index
            .checked_sub(1)
            .and_then(|i| self.images.get(i))
            .ok_or_else(|| {
                Error::Index(format!(
                    "image index {img_index} out of range 1..={} in doc {}",
                    self.images.len(),
                    self.doc_id
                ))
            })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub docs: Vec<Document>,
}

#[derive(Serialize, Deserialize)]
struct ImageLine {
    image_id: String,
    position: usize,
    caption: String,
    feature_key: String,
}

#[derive(Serialize, Deserialize)]
struct DocLine {
    doc_id: String,
    split: Split,
    title: String,
    body: String,
    images: Vec<ImageLine>,
}

impl Corpus {
    pub fn n_images(&self) -> usize {
        self.docs.iter().map(|d| d.images.len()).sum()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &Document)> {
        self.docs
            .iter()
            .enumerate()
            .filter(move |(_, d)| d.split == split)
    }

    /// Corpus restricted to one split, in file order.
    pub fn filtered(&self, split: Split) -> Corpus {
        Corpus {
            docs: self.split(split).map(|(_, d)| d.clone()).collect(),
        }
    }

    /// Runs `tagger` over every caption, replacing stored entity spans.
    pub fn tag(&mut self, tagger: &dyn EntityTagger) {
        for doc in &mut self.docs {
            for img in &mut doc.images {
                img.entities = tagger.tag(&img.caption);
            }
        }
    }

    pub fn parse_jsonl(text: &str) -> Result<Corpus> {
        let mut docs = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DocLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if !seen.insert(rec.doc_id.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate doc_id {:?} at line {line_no}",
                    rec.doc_id
                )));
            }
            docs.push(document_from_line(rec)?);
        }
        Ok(Corpus { docs })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for doc in &self.docs {
            let line = DocLine {
                doc_id: doc.doc_id.clone(),
                split: doc.split,
                title: detokenize(&doc.title),
                body: detokenize(&doc.body),
                images: doc
                    .images
                    .iter()
                    .map(|img| ImageLine {
                        image_id: img.image_id.clone(),
                        position: img.position,
                        caption: detokenize(&img.caption),
                        feature_key: img.feature_key.clone(),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("corpus record serialises"));
            out.push('\n');
        }
        out
    }
}

fn document_from_line(rec: DocLine) -> Result<Document> {
    let body = tokenize(&rec.body);
    let mut images = Vec::with_capacity(rec.images.len());
    for img in rec.images {
        if img.position > body.len() {
            return Err(Error::PositionOutOfRange {
                doc_id: rec.doc_id.clone(),
                position: img.position,
                body_len: body.len(),
            });
        }
        images.push(ImageRecord {
            image_id: img.image_id,
            position: img.position,
            caption: tokenize(&img.caption),
            entities: Vec::new(),
            feature_key: img.feature_key,
        });
    }
    // Stable, so equal positions keep file order.
    images.sort_by_key(|img| img.position);
    Ok(Document {
        doc_id: rec.doc_id,
        title: tokenize(&rec.title),
        body,
        images,
        split: rec.split,
    })
}

/// Reads a JSONL corpus, one document per line.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => Error::Parse {
                line: i + 1,
                message: "invalid UTF-8".into(),
            },
            _ => Error::io(path, e),
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    Corpus::parse_jsonl(&text)
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(corpus.to_jsonl().as_bytes())
        .map_err(|e| Error::io(path, e))
}
