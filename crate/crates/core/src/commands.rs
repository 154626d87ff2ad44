//! The operations behind each CLI subcommand. Every command reads its
//! inputs from files, writes UTF-8 JSON or JSONL, and returns a JSON summary
//! for stdout.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint;
use crate::corpus::synth::{generate as synth_generate, SynthConfig};
use crate::corpus::{corpus_stats, load_corpus, write_corpus, Corpus, CorpusStats, DictionaryTagger, EntityPool, EntityTagger, Split};
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::eval::{HoriVariant, MetricReport, PairScope};
use crate::features::FeatureStore;
use crate::model::ConCaps;
use crate::objective::FeatureCache;
use crate::parallel::Parallelism;
use crate::pipeline::{
    captions_from_records, document_coherence, evaluate_captions, generate_captions, mean_score, reference_captions,
    scrambled_captions, CaptionSet, DecodedRecord, DocScore,
};
use crate::train::{sha256_hex, train, TrainConfig, TrainData, TrainOptions};

pub fn to_json_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serializes");
    s.push('\n');
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_tagger(path: Option<&Path>) -> Result<DictionaryTagger> {
    match path {
        Some(p) => DictionaryTagger::load(p),
        None => Ok(DictionaryTagger::new()),
    }
}

pub fn load_features(dir: &Path) -> Result<FeatureCache> {
    FeatureCache::from_store(&FeatureStore::open(dir)?)
}

/// `None` keeps every split.
pub fn select_split(corpus: &Corpus, split: Option<Split>) -> Corpus {
    match split {
        Some(s) => corpus.filtered(s),
        None => corpus.clone(),
    }
}

pub enum CorpusSource {
    Synthetic(SynthConfig),
    /// An existing JSONL corpus, validated and rewritten in normal form.
    Fixture { corpus: PathBuf, entities: Option<PathBuf> },
}

pub fn build_corpus(source: &CorpusSource, out_dir: &Path) -> Result<Value> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let corpus = match source {
        CorpusSource::Synthetic(cfg) => {
            let s = synth_generate(cfg)?;
            s.write_to(out_dir)?;
            s.corpus
        }
        CorpusSource::Fixture { corpus, entities } => {
            let c = load_corpus(corpus)?;
            write_corpus(&c, out_dir.join("corpus.jsonl"))?;
            if let Some(e) = entities {
                let tagger = DictionaryTagger::load(e)?;
                write(&out_dir.join("entities.tsv"), &tagger.to_tsv())?;
            }
            c
        }
    };
    let split_docs = |s| corpus.split(s).count();
    Ok(json!({
        "corpus": out_dir.join("corpus.jsonl"),
        "n_docs": corpus.docs.len(),
        "n_images": corpus.n_images(),
        "splits": {"train": split_docs(Split::Train), "dev": split_docs(Split::Dev), "test": split_docs(Split::Test)},
    }))
}

pub fn stats(corpus: &Path, entities: Option<&Path>) -> Result<CorpusStats> {
    corpus_stats(&load_corpus(corpus)?, &load_tagger(entities)?)
}

/// Loads a config file, resolving its data paths against the file's
/// directory and applying `CONCAPS_SEED`.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::parse(&read(path)?)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.data.corpus, &mut cfg.data.entities, &mut cfg.data.features].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    cfg.apply_env()?;
    Ok(cfg)
}

/// Trains and writes `model.ckpt`, `manifest.json` and the wall-clock
/// sidecar `timing.json` into `out_dir`.
pub fn train_command(cfg: &TrainConfig, out_dir: &Path) -> Result<Value> {
    let corpus_path = cfg
        .data
        .corpus
        .as_deref()
        .ok_or_else(|| Error::Config("data.corpus is not set".into()))?;
    let features_path = cfg
        .data
        .features
        .as_deref()
        .ok_or_else(|| Error::Config("data.features is not set".into()))?;
    let corpus = load_corpus(corpus_path)?;
    let tagger = load_tagger(cfg.data.entities.as_deref())?;
    let data = TrainData::new(&corpus, &tagger, load_features(features_path)?)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let started = Instant::now();
    let every = cfg.checkpoint_every;
    let dir = out_dir.to_path_buf();
    let opts = TrainOptions {
        dump_path: Some(out_dir.join("nonfinite_batch.json")),
        on_checkpoint: Some(Box::new(move |step, model: &ConCaps| {
            if every > 0 && step % every == 0 {
                checkpoint::save(model, step, dir.join(format!("model-step{step}.ckpt")))?;
            }
            Ok(())
        })),
    };
    let outcome = train(cfg, &data, opts)?;
    checkpoint::save(&outcome.model, cfg.total_steps, out_dir.join("model.ckpt"))?;
    write(&out_dir.join("manifest.json"), &to_json_line(&outcome.manifest))?;
    let secs = started.elapsed().as_secs_f64();
    write(
        &out_dir.join("timing.json"),
        &to_json_line(&json!({"wall_clock_seconds": secs, "steps": cfg.total_steps})),
    )?;
    let last = outcome.manifest.steps.last();
    Ok(json!({
        "checkpoint": out_dir.join("model.ckpt"),
        "manifest": out_dir.join("manifest.json"),
        "steps": cfg.total_steps,
        "seed": cfg.seed,
        "final_loss": last.map(|r| r.total),
    }))
}

pub struct GenerateArgs<'a> {
    pub checkpoint: &'a Path,
    pub corpus: &'a Path,
    pub features: &'a Path,
    pub split: Option<Split>,
    pub decode: DecodeConfig,
    pub out: &'a Path,
    pub parallelism: Parallelism,
}

pub fn generate(args: &GenerateArgs) -> Result<Value> {
    let (model, _) = checkpoint::load(args.checkpoint)?;
    let corpus = select_split(&load_corpus(args.corpus)?, args.split);
    let features = load_features(args.features)?;
    let records = generate_captions(&model, &corpus, &features, &args.decode, args.parallelism)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write(args.out, &text)?;
    Ok(json!({"decoded": args.out, "n_captions": records.len(), "n_docs": corpus.docs.len()}))
}

pub fn read_decoded(path: &Path) -> Result<Vec<DecodedRecord>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Horizontal coherence metric models, either optional.
#[derive(Default)]
pub struct MetricModels {
    pub hori1: Option<PathBuf>,
    pub hori2: Option<PathBuf>,
    pub scope: PairScope,
}

impl MetricModels {
    fn loaded(&self) -> Result<Vec<(HoriVariant, ConCaps)>> {
        let mut out = Vec::new();
        for (v, p) in [(HoriVariant::One, &self.hori1), (HoriVariant::Two, &self.hori2)] {
            if let Some(p) = p {
                out.push((v, checkpoint::load(p)?.0));
            }
        }
        Ok(out)
    }
}

pub struct EvaluateArgs<'a> {
    pub decoded: &'a Path,
    pub corpus: &'a Path,
    pub entities: Option<&'a Path>,
    pub features: Option<&'a Path>,
    pub split: Option<Split>,
    pub metrics: MetricModels,
    pub out: &'a Path,
    pub parallelism: Parallelism,
}

/// Scores decoded captions against the corpus references. The report holds
/// content hashes rather than paths so identical inputs give identical bytes.
pub fn evaluate(args: &EvaluateArgs) -> Result<Value> {
    let corpus = select_split(&load_corpus(args.corpus)?, args.split);
    let tagger = load_tagger(args.entities)?;
    let decoded_text = read(args.decoded)?;
    let records = read_decoded(args.decoded)?;
    let captions = captions_from_records(&records);
    let mut report: MetricReport = evaluate_captions(&corpus, &captions, &tagger)?;
    let metric_models = args.metrics.loaded()?;
    if !metric_models.is_empty() {
        let dir = args
            .features
            .ok_or_else(|| Error::Config("coherence metrics need --features".into()))?;
        let features = load_features(dir)?;
        for (v, m) in &metric_models {
            let scores = document_coherence(m, *v, args.metrics.scope, &corpus, &captions, &features, args.parallelism)?;
            match v {
                HoriVariant::One => report.hori_coh_1 = mean_score(&scores),
                HoriVariant::Two => report.hori_coh_2 = mean_score(&scores),
            }
        }
    }
    let out = json!({
        "metrics": report,
        "metrics_x100": {
            "bleu4": report.bleu4 * 100.0,
            "rouge_l": report.rouge_l * 100.0,
            "cider": report.cider * 100.0,
            "ne_precision": report.ne_precision * 100.0,
            "ne_recall": report.ne_recall * 100.0,
        },
        "corpus": {
            "sha256": sha256_hex(corpus.to_jsonl().as_bytes()),
            "split": args.split.map(|s| s.to_string()),
            "n_docs": corpus.docs.len(),
            "n_images": corpus.n_images(),
        },
        "decoded_sha256": sha256_hex(decoded_text.as_bytes()),
        "pair_scope": args.metrics.scope,
    });
    write(args.out, &to_json_line(&out))?;
    Ok(out)
}

/// Where `cohscore` takes captions from.
pub enum CaptionSource {
    /// The corpus's own captions.
    References,
    Decoded(PathBuf),
}

pub struct CohscoreArgs<'a> {
    pub corpus: &'a Path,
    pub features: &'a Path,
    pub entities: Option<&'a Path>,
    pub split: Option<Split>,
    pub captions: CaptionSource,
    /// Also score entity-scrambled copies drawn with this seed.
    pub scramble_seed: Option<u64>,
    pub metrics: MetricModels,
    pub out: Option<&'a Path>,
    pub parallelism: Parallelism,
}

#[derive(Serialize)]
struct VariantScores {
    mean: Option<f64>,
    documents: Vec<DocScore>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scrambled_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scrambled_documents: Option<Vec<DocScore>>,
    /// Share of scored documents whose captions beat their scrambled copy.
    #[serde(skip_serializing_if = "Option::is_none")]
    fraction_above_scrambled: Option<f64>,
}

/// Entity inventory of the train split, or of the whole corpus when it has
/// no train documents.
fn entity_pool(corpus: &Corpus, tagger: &DictionaryTagger) -> EntityPool {
    let has_train = corpus.split(Split::Train).next().is_some();
    let mut pool = EntityPool::default();
    for doc in corpus.docs.iter().filter(|d| !has_train || d.split == Split::Train) {
        for im in &doc.images {
            for span in tagger.tag(&im.caption) {
                pool.insert(&span.etype, span.surface);
            }
        }
    }
    pool
}

/// Fraction of documents scored under both sets where `a` beats `b`.
pub fn fraction_above(a: &[DocScore], b: &[DocScore]) -> Option<f64> {
    let (mut wins, mut n) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x.score, y.score) {
            n += 1;
            wins += usize::from(x > y);
        }
    }
    (n > 0).then(|| wins as f64 / n as f64)
}

pub fn cohscore(args: &CohscoreArgs) -> Result<Value> {
    let full = load_corpus(args.corpus)?;
    let corpus = select_split(&full, args.split);
    let features = load_features(args.features)?;
    let captions: CaptionSet = match &args.captions {
        CaptionSource::References => reference_captions(&corpus),
        CaptionSource::Decoded(p) => captions_from_records(&read_decoded(p)?),
    };
    let scrambled = match args.scramble_seed {
        Some(seed) => {
            let tagger = load_tagger(args.entities)?;
            let pool = entity_pool(&full, &tagger);
            let base = Corpus {
                docs: corpus
                    .docs
                    .iter()
                    .map(|d| {
                        let mut d = d.clone();
                        for im in &mut d.images {
                            im.caption = captions.get(&im.image_id).cloned().unwrap_or_default();
                        }
                        d
                    })
                    .collect(),
            };
            Some(scrambled_captions(&base, &tagger, &pool, seed))
        }
        None => None,
    };
    let mut out = serde_json::Map::new();
    for (v, model) in args.metrics.loaded()? {
        let docs = document_coherence(&model, v, args.metrics.scope, &corpus, &captions, &features, args.parallelism)?;
        let scr = match &scrambled {
            Some(s) => Some(document_coherence(&model, v, args.metrics.scope, &corpus, s, &features, args.parallelism)?),
            None => None,
        };
        let entry = VariantScores {
            mean: mean_score(&docs),
            fraction_above_scrambled: scr.as_ref().and_then(|s| fraction_above(&docs, s)),
            scrambled_mean: scr.as_ref().and_then(|s| mean_score(s)),
            scrambled_documents: scr,
            documents: docs,
        };
        let key = match v {
            HoriVariant::One => "hori_coh_1",
            HoriVariant::Two => "hori_coh_2",
        };
        out.insert(key.into(), serde_json::to_value(entry).expect("scores serialize"));
    }
    if out.is_empty() {
        return Err(Error::Config("cohscore needs at least one metric checkpoint".into()));
    }
    out.insert("pair_scope".into(), serde_json::to_value(args.metrics.scope).expect("scope serializes"));
    let out = Value::Object(out);
    if let Some(p) = args.out {
        write(p, &to_json_line(&out))?;
    }
    Ok(out)
}
