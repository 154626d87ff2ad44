//! The four encoding streams: trainable toy text and image encoders, and the
//! cached-feature path for precomputed encoder outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, FeatureStore};
use crate::layers::{sinusoidal_positions, Block, Embedding, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;
use crate::vocab::PAD_ID;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Text and image streams come from small trainable encoders.
    Toy,
    /// All four streams are read verbatim from the feature cache.
    Cached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub d_t: usize,
    pub d_i: usize,
    pub d_f: usize,
    pub d_o: usize,
    /// Width of the raw patch grid fed to the toy image projection.
    pub d_raw: usize,
    pub n_text_layers: usize,
    pub text_heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Toy,
            d_t: 32,
            d_i: 32,
            d_f: 8,
            d_o: 8,
            d_raw: 8,
            n_text_layers: 2,
            text_heads: 2,
        }
    }
}

impl EncoderConfig {
    pub fn reference() -> Self {
        Self {
            mode: EncoderMode::Cached,
            d_t: 2048,
            d_i: 2048,
            d_f: 512,
            d_o: 2048,
            d_raw: 2048,
            n_text_layers: 0,
            text_heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == EncoderMode::Toy {
            if self.n_text_layers == 0 {
                return Err(Error::Config("toy text encoder needs at least one layer".into()));
            }
            if self.text_heads == 0 || self.d_t % self.text_heads != 0 {
                return Err(Error::Config("d_t must be divisible by text_heads".into()));
            }
        }
        if self.d_i == 0 || self.d_t == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding table, a stack of bidirectional self-attention blocks, and a
/// learned softmax-weighted sum over the block outputs.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: Embedding,
    pub blocks: Vec<Block>,
    pub mix: ParamId,
    pub d_t: usize,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig, vocab_size: usize) -> Self {
        let embedding = Embedding::new(store, rng, "text.embed", vocab_size, cfg.d_t);
        let blocks = (0..cfg.n_text_layers)
            .map(|l| Block::new(store, rng, &format!("text.block{l}"), cfg.d_t, cfg.text_heads, 2 * cfg.d_t, false))
            .collect();
        let mix = store.add("text.mix", Mat::zeros(1, cfg.n_text_layers));
        Self {
            embedding,
            blocks,
            mix,
            d_t: cfg.d_t,
        }
    }

    /// Encodes token ids; an empty text is encoded as a single `<pad>`.
    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let ids: Vec<usize> = if ids.is_empty() { vec![PAD_ID] } else { ids.to_vec() };
        let e = self.embedding.forward(g, &ids);
        let pos = g.input(sinusoidal_positions(ids.len(), self.d_t));
        let mut x = g.add(e, pos);
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(g, x, None, false, None);
            layers.push(x);
        }
        let w = g.param(self.mix);
        g.mix(w, &layers)
    }

    pub fn mix_probabilities(&self, store: &ParamStore) -> Vec<f64> {
        let w = store.get(self.mix).data();
        let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

/// Encodes token ids outside of any training graph.
pub fn encode_text(encoder: &TextEncoder, store: &ParamStore, ids: &[usize]) -> Mat {
    let mut g = Graph::new(store);
    let out = encoder.forward(&mut g, ids);
    g.value(out).clone()
}

/// Per-patch linear projection of the raw image grid.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig) -> Self {
        Self {
            proj: Linear::new(store, rng, "image.proj", cfg.d_raw, cfg.d_i, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, grid: Var) -> Var {
        self.proj.forward(g, grid)
    }
}

pub fn check_image_grid(grid: &Mat, d_raw: usize) -> Result<()> {
    if grid.rows() == 0 {
        return Err(Error::Validation("image grid has no patches".into()));
    }
    if grid.cols() != d_raw {
        return Err(Error::Validation(format!("image grid width {} != d_raw {d_raw}", grid.cols())));
    }
    if !grid.is_finite() {
        return Err(Error::Validation("image grid contains non-finite values".into()));
    }
    Ok(())
}

pub fn encode_image_toy(encoder: &ImageEncoder, store: &ParamStore, grid: &Mat) -> Result<Mat> {
    check_image_grid(grid, encoder.proj.d_in)?;
    Ok(encoder.proj.apply(store, grid))
}

/// Reads a bundle exactly as stored; the store's expected dims, if any, are
/// enforced.
pub fn load_cached_features(key: &str, store: &FeatureStore) -> Result<FeatureBundle> {
    store.load(key)
}
