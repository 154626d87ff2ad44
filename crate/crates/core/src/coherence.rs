//! Contrastive coherence objectives over caption end states.
//!
//! Vertical coherence contrasts a true caption with its entity-replaced fake.
//! The two horizontal heads score concatenated end states of two captions:
//! the first contrasts neighbouring true captions against a true caption
//! paired with a neighbour's fake, the second against true captions from a
//! different document.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::sampler::Batch;
use crate::tensor::{softplus, Mat};

/// Two-layer perceptron with a tanh hidden layer and a scalar logit.
#[derive(Clone, Debug)]
pub struct PairScorer {
    pub hidden: Linear,
    pub out: Linear,
}

impl PairScorer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, width: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d_in, width, true),
            out: Linear::new(store, rng, &format!("{name}.out"), width, 1, true),
        }
    }

    pub fn d_in(&self) -> usize {
        self.hidden.d_in
    }

    /// One logit per row of `x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.tanh(h);
        self.out.forward(g, h)
    }

    /// Direct evaluation on a single input vector.
    pub fn logit(&self, store: &ParamStore, x: &[f64]) -> f64 {
        let mut h = self.hidden.apply(store, &Mat::row_vector(x.to_vec()));
        for v in h.data_mut() {
            *v = v.tanh();
        }
        self.out.apply(store, &h).item()
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundScorer<'a> {
        BoundScorer { scorer: self, store }
    }
}

/// Anything that maps an end state (or a concatenation of two) to a logit.
pub trait CoherenceScorer {
    fn score(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> CoherenceScorer for F {
    fn score(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

pub struct BoundScorer<'a> {
    scorer: &'a PairScorer,
    store: &'a ParamStore,
}

impl CoherenceScorer for BoundScorer<'_> {
    fn score(&self, x: &[f64]) -> f64 {
        self.scorer.logit(self.store, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoherenceConfig {
    pub lambda_gen: f64,
    pub lambda_vert: f64,
    pub lambda_hori1: f64,
    pub lambda_hori2: f64,
    /// Window of neighbouring images that count as horizontal positives.
    pub w: usize,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        Self {
            lambda_gen: 1.0,
            lambda_vert: 0.01,
            lambda_hori1: 0.01,
            lambda_hori2: 0.1,
            w: 3,
        }
    }
}

impl CoherenceConfig {
    pub fn with_lambdas(self, gen: f64, vert: f64, hori1: f64, hori2: f64) -> Self {
        Self {
            lambda_gen: gen,
            lambda_vert: vert,
            lambda_hori1: hori1,
            lambda_hori2: hori2,
            ..self
        }
    }

    pub fn lambdas(&self) -> [f64; 4] {
        [self.lambda_gen, self.lambda_vert, self.lambda_hori1, self.lambda_hori2]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, l) in ["lambda_gen", "lambda_vert", "lambda_hori1", "lambda_hori2"]
            .iter()
            .zip(self.lambdas())
        {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {l}")));
            }
        }
        if self.w == 0 {
            return Err(Error::Config("W must be at least 1".into()));
        }
        Ok(())
    }
}

/// What pair enumeration needs to know about a batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairMeta {
    pub doc_index: usize,
    pub img_index: usize,
    pub has_fake: bool,
}

/// Item-index pairs. `hori_neg1` entries are `(i, j)` meaning the true caption
/// of item `i` with the fake caption of item `j`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub hori_pos: Vec<(usize, usize)>,
    pub hori_neg1: Vec<(usize, usize)>,
    pub hori_neg2: Vec<(usize, usize)>,
}

pub fn batch_meta(batch: &Batch) -> Vec<PairMeta> {
    batch
        .items
        .iter()
        .map(|it| PairMeta {
            doc_index: it.doc_index,
            img_index: it.img_index,
            has_fake: it.fake_cap.is_some(),
        })
        .collect()
}

pub fn enumerate_pairs(batch: &Batch, w: usize) -> PairSet {
    enumerate_pairs_meta(&batch_meta(batch), w)
}

/// Positives are same-document items at most `w - 1` images apart, one per
/// unordered pair with the earlier image first. Each positive yields the two
/// true/fake negatives `(i, fake j)` and `(j, fake i)` where the fake exists.
/// Every cross-document pair of items is a second-kind negative.
pub fn enumerate_pairs_meta(items: &[PairMeta], w: usize) -> PairSet {
    let mut set = PairSet::default();
    for a in 0..items.len() {
        for b in a + 1..items.len() {
            let (x, y) = (items[a], items[b]);
            if x.doc_index != y.doc_index {
                set.hori_neg2.push((a, b));
                continue;
            }
            if x.img_index.abs_diff(y.img_index) + 1 > w {
                continue;
            }
            let (i, j) = if x.img_index <= y.img_index { (a, b) } else { (b, a) };
            set.hori_pos.push((i, j));
            if items[j].has_fake {
                set.hori_neg1.push((i, j));
            }
            if items[i].has_fake {
                set.hori_neg1.push((j, i));
            }
        }
    }
    set
}

/// `-log σ(x)`.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    softplus(-x)
}

/// `-log(1 - σ(x))`.
pub fn neg_log_one_minus_sigmoid(x: f64) -> f64 {
    softplus(x)
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Σ_i −log σ(s(true_i)) − log(1 − σ(s(fake_i))) over items that have a fake.
pub fn vertical_loss(
    true_states: &[Vec<f64>],
    fake_states: &[Option<Vec<f64>>],
    scorer: &dyn CoherenceScorer,
) -> Result<f64> {
    if true_states.len() != fake_states.len() {
        return Err(Error::Contract(format!(
            "{} true states but {} fake slots",
            true_states.len(),
            fake_states.len()
        )));
    }
    Ok(true_states
        .iter()
        .zip(fake_states)
        .filter_map(|(t, f)| f.as_ref().map(|f| (t, f)))
        .map(|(t, f)| neg_log_sigmoid(scorer.score(t)) + neg_log_one_minus_sigmoid(scorer.score(f)))
        .sum())
}

pub fn hori1_loss(
    true_states: &[Vec<f64>],
    fake_states: &[Option<Vec<f64>>],
    pairs: &PairSet,
    scorer: &dyn CoherenceScorer,
) -> Result<f64> {
    let mut loss = 0.0;
    for &(i, j) in &pairs.hori_pos {
        loss += neg_log_sigmoid(scorer.score(&concat(&true_states[i], &true_states[j])));
    }
    for &(i, j) in &pairs.hori_neg1 {
        let fake = fake_states[j]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("item {j} has no fake caption")))?;
        loss += neg_log_one_minus_sigmoid(scorer.score(&concat(&true_states[i], fake)));
    }
    Ok(loss)
}

pub fn hori2_loss(true_states: &[Vec<f64>], pairs: &PairSet, scorer: &dyn CoherenceScorer) -> f64 {
    let pos: f64 = pairs
        .hori_pos
        .iter()
        .map(|&(i, j)| neg_log_sigmoid(scorer.score(&concat(&true_states[i], &true_states[j]))))
        .sum();
    let neg: f64 = pairs
        .hori_neg2
        .iter()
        .map(|&(i, j)| neg_log_one_minus_sigmoid(scorer.score(&concat(&true_states[i], &true_states[j]))))
        .sum();
    pos + neg
}

/// Loss components of one batch; skipped components are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gen: f64,
    pub vert: f64,
    pub hori1: f64,
    pub hori2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(cfg: &CoherenceConfig, gen: f64, vert: f64, hori1: f64, hori2: f64) -> Self {
        Self {
            gen,
            vert,
            hori1,
            hori2,
            total: cfg.lambda_gen * gen + cfg.lambda_vert * vert + cfg.lambda_hori1 * hori1 + cfg.lambda_hori2 * hori2,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.gen, self.vert, self.hori1, self.hori2, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted sum of the four components. A component whose λ is 0 is never
/// computed: its closure is not called.
pub fn total_loss(
    cfg: &CoherenceConfig,
    gen: impl FnOnce() -> f64,
    vert: impl FnOnce() -> f64,
    hori1: impl FnOnce() -> f64,
    hori2: impl FnOnce() -> f64,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let run = |lambda: f64, f: Box<dyn FnOnce() -> f64 + '_>| -> Result<f64> {
        if lambda == 0.0 {
            return Ok(0.0);
        }
        let v = f();
        if !v.is_finite() {
            return Err(Error::Validation(format!("non-finite loss component {v}")));
        }
        Ok(v)
    };
    let gen = run(cfg.lambda_gen, Box::new(gen))?;
    let vert = run(cfg.lambda_vert, Box::new(vert))?;
    let hori1 = run(cfg.lambda_hori1, Box::new(hori1))?;
    let hori2 = run(cfg.lambda_hori2, Box::new(hori2))?;
    Ok(LossBreakdown::combine(cfg, gen, vert, hori1, hori2))
}
