//! Training loop: sampler batches, the combined objective, Adam with a
//! warmup/linear-decay schedule and global-norm clipping.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coherence::{CoherenceConfig, LossBreakdown};
use crate::corpus::{Corpus, EntityPool, EntityTagger, Split};
use crate::error::{Error, Result};
use crate::model::{ConCaps, ModelSpec};
use crate::objective::{batch_objective, prepare_batch, FeatureCache, ObjectiveOptions};
use crate::parallel::Parallelism;
use crate::params::{Grads, ParamStore};
use crate::sampler::{build_epoch_batches, Batch, SamplerConfig};
use crate::vocab::Vocab;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CONCAPS_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    /// Share of the steps spent warming up to `peak_lr`.
    pub warmup_fraction: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            peak_lr: 1e-4,
            warmup_fraction: 0.05,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must be in (0, 1)".into()));
        }
        if !(self.peak_lr > 0.0 && self.eps > 0.0) {
            return Err(Error::Config("peak_lr and eps must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// Input files, resolved relative to the config file by the CLI.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataPaths {
    pub corpus: Option<PathBuf>,
    pub entities: Option<PathBuf>,
    pub features: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub coherence: CoherenceConfig,
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    pub total_steps: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: usize,
    pub parallelism: Parallelism,
    pub data: DataPaths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            coherence: CoherenceConfig::default(),
            sampler: SamplerConfig::default(),
            optimizer: OptimizerConfig::default(),
            total_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            parallelism: Parallelism::Parallel,
            data: DataPaths::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.coherence.validate()?;
        self.sampler.validate()?;
        self.optimizer.validate()?;
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.sampler.w != self.coherence.w {
            return Err(Error::Config(format!(
                "sampler W {} differs from coherence W {}",
                self.sampler.w, self.coherence.w
            )));
        }
        Ok(())
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        Ok(cfg)
    }

    /// Applies `CONCAPS_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Linear warmup to the peak over the first `round(fraction · total)`
/// steps, then linear decay to 0 at `total`. Steps are 1-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(opt: &OptimizerConfig, total_steps: usize) -> Self {
        let warmup = ((opt.warmup_fraction * total_steps as f64).round() as usize).clamp(1, total_steps);
        Self {
            peak: opt.peak_lr,
            warmup_steps: warmup,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            self.peak * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, m)| vec![0.0; m.len()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            let k = id.index();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub items: usize,
    pub gen: f64,
    pub vert: f64,
    pub hori1: f64,
    pub hori2: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Everything about a run that is a function of its inputs. Wall-clock
/// timings live in a separate sidecar so reruns compare byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub corpus_hash: String,
    pub seed: u64,
    pub lambdas: [f64; 4],
    pub n_params: usize,
    pub vocab_size: usize,
    pub steps: Vec<StepRecord>,
}

/// Training split, entity pool, vocabulary and features, ready to train on.
pub struct TrainData {
    pub corpus: Corpus,
    pub pool: EntityPool,
    pub vocab: Vocab,
    pub features: FeatureCache,
}

impl TrainData {
    /// Tags the corpus, keeps the train split, and builds the pool and a
    /// vocabulary over its captions and bodies.
    pub fn new(corpus: &Corpus, tagger: &dyn EntityTagger, features: FeatureCache) -> Result<Self> {
        let mut corpus = corpus.filtered(Split::Train);
        if corpus.n_images() == 0 {
            return Err(Error::Validation("train split has no images".into()));
        }
        corpus.tag(tagger);
        let pool = EntityPool::from_corpus(&corpus);
        Ok(Self {
            vocab: build_vocab(&corpus),
            corpus,
            pool,
            features,
        })
    }
}

/// Caption tokens first, then body tokens, each in corpus order.
pub fn build_vocab(corpus: &Corpus) -> Vocab {
    let captions = corpus.docs.iter().flat_map(|d| d.images.iter().flat_map(|i| i.caption.iter()));
    let bodies = corpus.docs.iter().flat_map(|d| d.body.iter());
    Vocab::from_tokens(captions.chain(bodies))
}

/// Called with the step number and the model after every
/// `checkpoint_every` steps and after the last one.
pub type CheckpointHook<'a> = dyn FnMut(usize, &ConCaps) -> Result<()> + 'a;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where the offending batch is written when the loss goes non-finite.
    pub dump_path: Option<PathBuf>,
    pub on_checkpoint: Option<Box<CheckpointHook<'a>>>,
}

pub struct TrainOutcome {
    pub model: ConCaps,
    pub manifest: RunManifest,
}

/// Runs `cfg.total_steps` optimizer steps, cycling epochs as needed.
pub fn train(cfg: &TrainConfig, data: &TrainData, mut opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = ConCaps::new(cfg.model.clone(), data.vocab.clone(), cfg.seed)?;
    model.trained_with = Some(cfg.coherence.clone());
    model.window_tokens = cfg.sampler.window_tokens;
    let mut adam = Adam::new(&cfg.optimizer, &model.params);
    let schedule = Schedule::new(&cfg.optimizer, cfg.total_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        corpus_hash: sha256_hex(data.corpus.to_jsonl().as_bytes()),
        seed: cfg.seed,
        lambdas: cfg.coherence.lambdas(),
        n_params: model.params.scalar_count(),
        vocab_size: model.vocab.len(),
        steps: Vec::with_capacity(cfg.total_steps),
    };
    let mut step = 0;
    while step < cfg.total_steps {
        let batches = build_epoch_batches(&data.corpus, &cfg.sampler, &data.pool, &mut rng)?;
        if batches.is_empty() {
            return Err(Error::Validation("an epoch produced no batches".into()));
        }
        for batch in &batches {
            step += 1;
            let items = prepare_batch(&model, batch, &data.features)?;
            let out = batch_objective(
                &model,
                &items,
                &cfg.coherence,
                ObjectiveOptions {
                    parallelism: cfg.parallelism,
                    with_grads: true,
                    dropout_seed: Some(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(step as u64)),
                },
            )?;
            let mut grads = out.grads.expect("gradients requested");
            if !out.loss.is_finite() || !grads.is_finite() {
                return Err(non_finite(step, &out.loss, batch, opts.dump_path.as_ref()));
            }
            let grad_norm = clip_global_norm(&mut grads, cfg.optimizer.clip_norm);
            let lr = schedule.lr(step);
            adam.step(&mut model.params, &grads, lr);
            manifest.steps.push(record(step, lr, batch.len(), &out.loss, grad_norm));
            let last = step == cfg.total_steps;
            if let Some(hook) = opts.on_checkpoint.as_mut() {
                if last || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
                    hook(step, &model)?;
                }
            }
            if last {
                break;
            }
        }
    }
    Ok(TrainOutcome { model, manifest })
}

fn record(step: usize, lr: f64, items: usize, l: &LossBreakdown, grad_norm: f64) -> StepRecord {
    StepRecord {
        step,
        lr,
        items,
        gen: l.gen,
        vert: l.vert,
        hori1: l.hori1,
        hori2: l.hori2,
        total: l.total,
        grad_norm,
    }
}

#[derive(Serialize)]
struct BatchDump<'a> {
    step: usize,
    loss: &'a LossBreakdown,
    batch: &'a Batch,
}

fn non_finite(step: usize, loss: &LossBreakdown, batch: &Batch, dump: Option<&PathBuf>) -> Error {
    let keys: Vec<&str> = batch.items.iter().map(|i| i.feature_key.as_str()).collect();
    let mut detail = format!("loss {loss:?}; items {keys:?}");
    if let Some(path) = dump {
        let json = serde_json::to_string_pretty(&BatchDump { step, loss, batch }).expect("dump serializes");
        match std::fs::write(path, json) {
            Ok(()) => detail.push_str(&format!("; batch written to {}", path.display())),
            Err(e) => detail.push_str(&format!("; could not write batch dump: {e}")),
        }
    }
    Error::NonFinite { step, detail }
}
