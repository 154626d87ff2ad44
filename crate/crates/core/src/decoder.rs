//! Transformer caption decoder: causal self-attention over the caption
//! prefix, cross-attention over the projected encoder streams, and the token
//! distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{sinusoidal_positions, Block, Dropout, Embedding, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{log_softmax_masked, Mat};
use crate::vocab::{BOS_ID, EOS_ID, PAD_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Decoder layer count.
    pub layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Filled from the vocabulary when a model is built.
    pub vocab_size: usize,
    /// Longest caption, `<s>` and `</s>` included.
    pub max_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: 0,
            max_len: 32,
            dropout: 0.0,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn reference() -> Self {
        Self {
            layers: 4,
            n_heads: 16,
            d_model: 1024,
            d_ff: 4096,
            vocab_size: 0,
            max_len: 64,
            dropout: 0.1,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("decoder layers and widths must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for <s> and </s>".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Widths of the four streams as they reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamWidths {
    pub text: usize,
    pub image: usize,
    pub faces: usize,
    pub objects: usize,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: ModelConfig,
    pub embed: Embedding,
    /// Text, image, face, object projections to `d_model`.
    pub streams: [Linear; 4],
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub output: Option<Linear>,
    pub output_bias: ParamId,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, widths: StreamWidths) -> Self {
        let d = cfg.d_model;
        let embed = Embedding::new(store, rng, "dec.embed", cfg.vocab_size, d);
        let streams = [
            Linear::new(store, rng, "dec.proj_text", widths.text, d, true),
            Linear::new(store, rng, "dec.proj_image", widths.image, d, true),
            Linear::new(store, rng, "dec.proj_faces", widths.faces, d, true),
            Linear::new(store, rng, "dec.proj_objects", widths.objects, d, true),
        ];
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(store, rng, &format!("dec.block{l}"), d, cfg.n_heads, cfg.d_ff, true))
            .collect();
        let final_norm = LayerNorm::new(store, "dec.final_norm", d);
        let output = (!cfg.tie_embeddings).then(|| Linear::new(store, rng, "dec.out", d, cfg.vocab_size, false));
        let output_bias = store.add("dec.out.bias", Mat::zeros(1, cfg.vocab_size));
        Self {
            config: cfg.clone(),
            embed,
            streams,
            blocks,
            final_norm,
            output,
            output_bias,
        }
    }

    /// Projects each non-empty stream to `d_model` and stacks the rows.
    pub fn memory(&self, g: &mut Graph, streams: [Var; 4]) -> Var {
        let mut parts = Vec::with_capacity(4);
        for (proj, s) in self.streams.iter().zip(streams) {
            if g.value(s).rows() > 0 {
                parts.push(proj.forward(g, s));
            }
        }
        match parts.len() {
            0 => g.input(Mat::zeros(0, self.config.d_model)),
            1 => parts[0],
            _ => g.concat_rows(&parts),
        }
    }

    /// Teacher-forced pass; returns the final-layer states and the logits,
    /// one row per caption position.
    pub fn forward(&self, g: &mut Graph, memory: Var, ids: &[usize], mut dropout: Option<&mut Dropout>) -> (Var, Var) {
        let e = self.embed.forward(g, ids);
        let pos = g.input(sinusoidal_positions(ids.len(), self.config.d_model));
        let mut x = g.add(e, pos);
        for block in &self.blocks {
            x = block.forward(g, x, Some(memory), true, dropout.as_deref_mut());
        }
        let states = self.final_norm.forward(g, x);
        let logits = match &self.output {
            Some(out) => out.forward(g, states),
            None => {
                let table = g.param(self.embed.table);
                g.matmul_t(states, table)
            }
        };
        let bias = g.param(self.output_bias);
        let logits = g.add_row(logits, bias);
        (states, logits)
    }

    pub fn check_caption(&self, ids: &[usize]) -> Result<()> {
        check_caption(&self.config, ids)
    }
}

pub fn check_caption(cfg: &ModelConfig, ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Validation("empty caption".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::Length {
            len: ids.len(),
            max_len: cfg.max_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Vocab {
            id,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Columns the output softmax ranges over: everything except `<s>` and
/// `<pad>`, which are never predicted.
pub fn output_mask(vocab_size: usize) -> Vec<bool> {
    (0..vocab_size).map(|c| c != BOS_ID && c != PAD_ID).collect()
}

/// Next-token targets for teacher forcing: row `t` predicts `ids[t + 1]`;
/// padding and the final row have no target.
pub fn targets(ids: &[usize]) -> Vec<Option<usize>> {
    (0..ids.len())
        .map(|t| ids.get(t + 1).copied().filter(|&id| id != PAD_ID))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub ids: Vec<usize>,
    pub step_states: Mat,
    pub logits: Mat,
    pub end_state: Option<Vec<f64>>,
}

impl DecoderOutput {
    pub fn new(ids: Vec<usize>, step_states: Mat, logits: Mat) -> Self {
        let end_state = eos_index(&ids).map(|t| step_states.row(t).to_vec());
        Self {
            ids,
            step_states,
            logits,
            end_state,
        }
    }

    /// Row-wise probabilities over the output mask.
    pub fn probabilities(&self) -> Mat {
        let mask = output_mask(self.logits.cols());
        let mut p = Mat::zeros(self.logits.rows(), self.logits.cols());
        for r in 0..self.logits.rows() {
            let ls = log_softmax_masked(self.logits.row(r), |c| mask[c]);
            for (o, l) in p.row_mut(r).iter_mut().zip(ls) {
                *o = l.exp();
            }
        }
        p
    }
}

pub fn eos_index(ids: &[usize]) -> Option<usize> {
    ids.iter().position(|&id| id == EOS_ID)
}

/// The decoder state at the `</s>` position.
pub fn end_state(out: &DecoderOutput) -> Result<Vec<f64>> {
    out.end_state
        .clone()
        .ok_or_else(|| Error::Contract("caption has no </s> token".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenLoss {
    pub sum: f64,
    pub per_token: f64,
    pub n_targets: usize,
}

/// Summed negative log-likelihood of the caption under teacher forcing.
/// `<s>` is never a target; `</s>` is; `<pad>` positions are masked.
pub fn generative_loss(logits: &Mat, caption: &[usize]) -> Result<GenLoss> {
    if logits.rows() != caption.len() {
        return Err(Error::Contract(format!(
            "{} logit rows for a caption of {} tokens",
            logits.rows(),
            caption.len()
        )));
    }
    let mask = output_mask(logits.cols());
    let mut sum = 0.0;
    let mut n = 0;
    for (t, target) in targets(caption).into_iter().enumerate() {
        let Some(y) = target else { continue };
        if y >= logits.cols() || !mask[y] {
            return Err(Error::Vocab {
                id: y,
                size: logits.cols(),
            });
        }
        sum -= log_softmax_masked(logits.row(t), |c| mask[c])[y];
        n += 1;
    }
    if n == 0 {
        return Err(Error::Validation("caption has no non-pad targets".into()));
    }
    Ok(GenLoss {
        sum,
        per_token: sum / n as f64,
        n_targets: n,
    })
}
