//! The complete captioner: encoders, decoder, and the three coherence heads
//! over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::coherence::{CoherenceConfig, PairScorer};
use crate::corpus::DEFAULT_WINDOW_TOKENS;
use crate::decoder::{check_caption, Decoder, DecoderOutput, ModelConfig, StreamWidths};
use crate::encoders::{check_image_grid, EncoderConfig, EncoderMode, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::layers::Dropout;
use crate::params::ParamStore;
use crate::tensor::Mat;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    /// Hidden width of each coherence scorer.
    pub scorer_hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            scorer_hidden: 64,
        }
    }
}

impl ModelSpec {
    pub fn reference() -> Self {
        Self {
            model: ModelConfig::reference(),
            encoder: EncoderConfig::reference(),
            scorer_hidden: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.encoder.validate()?;
        if self.scorer_hidden == 0 {
            return Err(Error::Config("scorer_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Token ids of the context window plus the image's feature bundle.
#[derive(Clone, Copy, Debug)]
pub struct ItemInput<'a> {
    pub txt: &'a [usize],
    pub bundle: &'a FeatureBundle,
}

#[derive(Clone, Debug)]
pub struct ConCaps {
    pub spec: ModelSpec,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub text: Option<TextEncoder>,
    pub image: Option<ImageEncoder>,
    pub decoder: Decoder,
    pub vert: PairScorer,
    pub hori1: PairScorer,
    pub hori2: PairScorer,
    /// Loss weights the parameters were trained under, when known.
    pub trained_with: Option<CoherenceConfig>,
    /// Context window size the text stream was trained with.
    pub window_tokens: usize,
}

impl ConCaps {
    /// Builds a freshly initialised model. Parameter layout and names depend
    /// only on `spec` and the vocabulary size; values only on `seed`.
    pub fn new(spec: ModelSpec, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut spec = spec;
        spec.model.vocab_size = vocab.len();
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let enc = &spec.encoder;
        let (text, image) = match enc.mode {
            EncoderMode::Toy => (
                Some(TextEncoder::new(&mut params, &mut rng, enc, vocab.len())),
                Some(ImageEncoder::new(&mut params, &mut rng, enc)),
            ),
            EncoderMode::Cached => (None, None),
        };
        let widths = StreamWidths {
            text: enc.d_t,
            image: enc.d_i,
            faces: enc.d_f,
            objects: enc.d_o,
        };
        let decoder = Decoder::new(&mut params, &mut rng, &spec.model, widths);
        let d = spec.model.d_model;
        let h = spec.scorer_hidden;
        let vert = PairScorer::new(&mut params, &mut rng, "coh.vert", d, h);
        let hori1 = PairScorer::new(&mut params, &mut rng, "coh.hori1", 2 * d, h);
        let hori2 = PairScorer::new(&mut params, &mut rng, "coh.hori2", 2 * d, h);
        Ok(Self {
            spec,
            vocab,
            params,
            text,
            image,
            decoder,
            vert,
            hori1,
            hori2,
            trained_with: None,
            window_tokens: DEFAULT_WINDOW_TOKENS,
        })
    }

    pub fn d_model(&self) -> usize {
        self.spec.model.d_model
    }

    pub fn check_bundle(&self, bundle: &FeatureBundle) -> Result<()> {
        let enc = &self.spec.encoder;
        let width = |name: &str, m: &Mat, d: usize| {
            if m.rows() > 0 && m.cols() != d {
                Err(Error::Validation(format!("{name} width {} != {d}", m.cols())))
            } else {
                Ok(())
            }
        };
        match enc.mode {
            EncoderMode::Toy => check_image_grid(&bundle.x_i, enc.d_raw)?,
            EncoderMode::Cached => {
                width("X_T", &bundle.x_t, enc.d_t)?;
                width("X_I", &bundle.x_i, enc.d_i)?;
            }
        }
        width("X_F", &bundle.x_f, enc.d_f)?;
        width("X_O", &bundle.x_o, enc.d_o)?;
        if !bundle.is_finite() {
            return Err(Error::Validation("feature bundle contains non-finite values".into()));
        }
        Ok(())
    }

    /// Encodes all four streams and returns the projected decoder memory.
    pub fn memory(&self, g: &mut Graph, input: ItemInput) -> Result<Var> {
        self.check_bundle(input.bundle)?;
        if let Some(&id) = input.txt.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(Error::Vocab {
                id,
                size: self.vocab.len(),
            });
        }
        let b = input.bundle;
        let (t, i) = match (&self.text, &self.image) {
            (Some(text), Some(image)) => {
                let t = text.forward(g, input.txt);
                let grid = g.input(b.x_i.clone());
                (t, image.forward(g, grid))
            }
            _ => (g.input(b.x_t.clone()), g.input(b.x_i.clone())),
        };
        let f = g.input(b.x_f.clone());
        let o = g.input(b.x_o.clone());
        Ok(self.decoder.memory(g, [t, i, f, o]))
    }

    pub fn memory_value(&self, input: ItemInput) -> Result<Mat> {
        let mut g = Graph::new(&self.params);
        let m = self.memory(&mut g, input)?;
        Ok(g.value(m).clone())
    }

    /// Decoder pass over a caption given an already-encoded memory.
    pub fn forward_with_memory(&self, memory: &Mat, ids: &[usize]) -> Result<DecoderOutput> {
        check_caption(&self.spec.model, ids)?;
        let mut g = Graph::new(&self.params);
        let m = g.input(memory.clone());
        let (states, logits) = self.decoder.forward(&mut g, m, ids, None);
        Ok(DecoderOutput::new(ids.to_vec(), g.value(states).clone(), g.value(logits).clone()))
    }

    /// Builds the decoder pass on an existing graph.
    pub fn decode_on(&self, g: &mut Graph, memory: Var, ids: &[usize], dropout: Option<&mut Dropout>) -> Result<(Var, Var)> {
        check_caption(&self.spec.model, ids)?;
        Ok(self.decoder.forward(g, memory, ids, dropout))
    }
}

/// Teacher-forced decoder pass for one caption.
pub fn decoder_forward(model: &ConCaps, caption: &[usize], input: ItemInput) -> Result<DecoderOutput> {
    check_caption(&model.spec.model, caption)?;
    let mut g = Graph::new(&model.params);
    let m = model.memory(&mut g, input)?;
    let (states, logits) = model.decoder.forward(&mut g, m, caption, None);
    Ok(DecoderOutput::new(caption.to_vec(), g.value(states).clone(), g.value(logits).clone()))
}
