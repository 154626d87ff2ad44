//! Transformer building blocks expressed on the autodiff tape.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{embedding_init, xavier, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, d_in, d_out));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Mat::zeros(1, d_out)));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    /// Plain-matrix evaluation, bypassing the tape.
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        let mut y = x.matmul(store.get(self.weight));
        if let Some(b) = self.bias {
            let b = store.get(b).data().to_vec();
            for r in 0..y.rows() {
                for (v, bi) in y.row_mut(r).iter_mut().zip(&b) {
                    *v += bi;
                }
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Mat::filled(1, dim, 1.0)),
            bias: store.add(format!("{name}.bias"), Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Self {
        assert!(n_heads > 0 && d_model % n_heads == 0, "d_model must divide into heads");
        Self {
            query: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model, true),
            key: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model, true),
            value: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model, true),
            out: Linear::new(store, rng, &format!("{name}.o"), d_model, d_model, true),
            n_heads,
        }
    }

    /// Attention of the rows of `x` over the rows of `memory`. With `causal`,
    /// row `t` only sees memory rows `0..=t` (self-attention over a prefix).
    /// An empty memory contributes nothing.
    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var, causal: bool) -> Var {
        let (rows, d_model) = g.value(x).shape();
        if g.value(memory).rows() == 0 {
            return g.input(Mat::zeros(rows, d_model));
        }
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let dh = d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores, causal);
            heads.push(g.matmul(probs, vh));
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.out.forward(g, joined)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d_model, d_ff, true),
            down: Linear::new(store, rng, &format!("{name}.down"), d_ff, d_model, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Token embedding table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, rows: usize, dim: usize) -> Self {
        Self {
            table: store.add(format!("{name}.table"), embedding_init(rng, rows, dim, 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather(t, ids)
    }
}

/// Sinusoidal position encodings for positions `0..len`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    let mut m = Mat::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * freq;
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// A pre-norm transformer block: self-attention, optional cross-attention,
/// feed-forward, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct Block {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        with_cross: bool,
    ) -> Self {
        Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d_model),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d_model, n_heads),
            cross: with_cross.then(|| {
                (
                    LayerNorm::new(store, &format!("{name}.cross_norm"), d_model),
                    MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), d_model, n_heads),
                )
            }),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d_model),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d_model, d_ff),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Option<Var>, causal: bool, dropout: Option<&mut Dropout>) -> Var {
        let mut dropout = dropout;
        let h = self.self_norm.forward(g, x);
        let a = self.self_attn.forward(g, h, h, causal);
        let a = apply_dropout(g, a, dropout.as_deref_mut());
        let mut x = g.add(x, a);
        if let (Some((norm, attn)), Some(mem)) = (&self.cross, memory) {
            let h = norm.forward(g, x);
            let c = attn.forward(g, h, mem, false);
            let c = apply_dropout(g, c, dropout.as_deref_mut());
            x = g.add(x, c);
        }
        let h = self.ff_norm.forward(g, x);
        let f = self.ff.forward(g, h);
        let f = apply_dropout(g, f, dropout);
        g.add(x, f)
    }
}

/// Inverted dropout driven by an explicit RNG so training stays reproducible.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn rand::RngCore,
}

fn apply_dropout(g: &mut Graph, x: Var, dropout: Option<&mut Dropout>) -> Var {
    match dropout {
        Some(d) if d.rate > 0.0 => {
            let (rows, cols) = g.value(x).shape();
            let keep = 1.0 - d.rate;
            let data = (0..rows * cols)
                .map(|_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            g.mul_const(x, Mat::from_vec(rows, cols, data))
        }
        _ => x,
    }
}
