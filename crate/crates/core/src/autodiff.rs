//! A small reverse-mode automatic differentiation tape.
//!
//! A [`Graph`] records every operation of one forward pass together with the
//! values it produced. [`Graph::backward`] then walks the tape in reverse,
//! seeded with upstream gradients on any number of nodes, which lets the
//! training loop split a batch into independent per-item graphs and join
//! them through a small coherence graph.

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{self, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        causal: bool,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Row {
        x: Var,
        index: usize,
    },
    Mix {
        weights: Var,
        layers: Vec<Var>,
        probs: Vec<f64>,
    },
    Nll {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
        allowed: Vec<bool>,
    },
    Bce {
        x: Var,
        labels: Vec<bool>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

enum Value {
    Owned(Mat),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
}

/// A recorded forward computation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant (or externally differentiated) leaf.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input)
    }

    /// The leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut out = self.value(a).clone();
        let bias = r.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Mat) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), mask.shape(), "mul_const shape mismatch");
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        self.push(out, Op::MulConst(a, mask))
    }

    /// GELU, tanh approximation. Smooth everywhere, which keeps
    /// finite-difference checks well-posed.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            let x = *v;
            let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
            *v = 0.5 * x * (1.0 + u.tanh());
        }
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise layer normalisation with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gi + bi;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax. With `causal`, row `t` only covers columns `0..=t`
    /// and the remaining entries are exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal { (r + 1).min(cols) } else { cols };
            let row = &xv.row(r)[..limit];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let out_row = out.row_mut(r);
            for (o, v) in out_row.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out_row[..limit] {
                *o /= sum;
            }
        }
        self.push(out, Op::Softmax { x, causal })
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Mat::vstack(&mats);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Mat::hstack(&mats);
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_cols(start, end);
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let out = Mat::row_vector(self.value(x).row(index).to_vec());
        self.push(out, Op::Row { x, index })
    }

    /// `Σ_k softmax(weights)_k · layers[k]` for a `1 × K` weight vector.
    pub fn mix(&mut self, weights: Var, layers: &[Var]) -> Var {
        let w = self.value(weights).data().to_vec();
        assert_eq!(w.len(), layers.len(), "one mix weight per layer");
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = w.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let (rows, cols) = self.value(layers[0]).shape();
        let mut out = Mat::zeros(rows, cols);
        for (p, l) in probs.iter().zip(layers) {
            out.add_scaled(self.value(*l), *p);
        }
        self.push(
            out,
            Op::Mix {
                weights,
                layers: layers.to_vec(),
                probs,
            },
        )
    }

    /// Summed negative log-likelihood of `targets` under a row-wise softmax
    /// of `logits`, restricted to the `allowed` columns. Rows whose target is
    /// `None` do not contribute. Produces a `1 × 1` node.
    pub fn nll(&mut self, logits: Var, targets: &[Option<usize>], allowed: &[bool]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target slot per logit row");
        assert_eq!(lv.cols(), allowed.len(), "allowed mask width mismatch");
        let mut probs = Mat::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let ls = tensor::log_softmax_masked(lv.row(r), |c| allowed[c]);
            for (p, l) in probs.row_mut(r).iter_mut().zip(&ls) {
                *p = l.exp();
            }
            if let Some(t) = target {
                assert!(allowed[*t], "target column is masked out");
                loss -= ls[*t];
            }
        }
        self.push(
            Mat::scalar(loss),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                probs,
                allowed: allowed.to_vec(),
            },
        )
    }

    /// Summed binary cross-entropy of each logit in `x` (read in row-major
    /// order) against `labels`, computed in log-sigmoid form.
    pub fn bce(&mut self, x: Var, labels: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), labels.len(), "one label per logit");
        let loss: f64 = xv
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &pos)| if pos { tensor::softplus(-z) } else { tensor::softplus(z) })
            .sum();
        self.push(
            Mat::scalar(loss),
            Op::Bce {
                x,
                labels: labels.to_vec(),
            },
        )
    }

    /// `Σ w_i · s_i` over `1 × 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|(v, w)| w * self.value(*v).item()).sum();
        self.push(Mat::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// Back-propagates the given seed gradients through the tape.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Backward {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut deepest = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape mismatch");
            acc(&mut grads, *v, g);
            deepest = deepest.max(v.0 + 1);
        }
        for idx in (0..deepest).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dout, &mut grads);
            grads[idx] = Some(dout);
        }
        Backward { grads }
    }

    fn backprop_node(&self, idx: usize, dout: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let ga = dout.matmul_t(self.value(*b));
                let gb = self.value(*a).t_matmul(dout);
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::MatMulT(a, b) => {
                let ga = dout.matmul(self.value(*b));
                let gb = dout.t_matmul(self.value(*a));
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, dout);
                acc(grads, *b, dout);
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, dout);
                acc(grads, *row, &dout.col_sums());
            }
            Op::Scale(a, s) => acc(grads, *a, &dout.scaled(*s)),
            Op::MulConst(a, mask) => {
                let mut g = dout.clone();
                for (gv, m) in g.data_mut().iter_mut().zip(mask.data()) {
                    *gv *= m;
                }
                acc(grads, *a, &g);
            }
            Op::Gelu(a) => {
                let mut g = self.value(*a).clone();
                for (gv, d) in g.data_mut().iter_mut().zip(dout.data()) {
                    let x = *gv;
                    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                    let t = u.tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                    *gv = d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
                acc(grads, *a, &g);
            }
            Op::Tanh(a) => {
                let y = self.node_value(idx);
                let mut g = dout.clone();
                for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                    *gv *= 1.0 - yv * yv;
                }
                acc(grads, *a, &g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let g = self.value(*gain).data();
                let mut dgain = Mat::zeros(1, cols);
                let mut dx = Mat::zeros(rows, cols);
                let n = cols as f64;
                for r in 0..rows {
                    let dy = dout.row(r);
                    let xh = xhat.row(r);
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    let dxhat: Vec<f64> = dy.iter().zip(g).map(|(d, gi)| d * gi).collect();
                    for c in 0..cols {
                        dgain.data_mut()[c] += dy[c] * xh[c];
                        sum_dxh += dxhat[c];
                        sum_dxh_xh += dxhat[c] * xh[c];
                    }
                    let inv = inv_std[r];
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv / n * (n * dxhat[c] - sum_dxh - xh[c] * sum_dxh_xh);
                    }
                }
                acc(grads, *x, &dx);
                acc(grads, *gain, &dgain);
                acc(grads, *bias, &dout.col_sums());
            }
            Op::Softmax { x, causal } => {
                let y = self.node_value(idx);
                let (rows, cols) = y.shape();
                let mut dx = Mat::zeros(rows, cols);
                for r in 0..rows {
                    let limit = if *causal { (r + 1).min(cols) } else { cols };
                    let yr = &y.row(r)[..limit];
                    let dr = &dout.row(r)[..limit];
                    let inner = tensor::dot(yr, dr);
                    for (c, o) in dx.row_mut(r)[..limit].iter_mut().enumerate() {
                        *o = yr[c] * (dr[c] - inner);
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut g = Mat::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, d) in g.row_mut(id).iter_mut().zip(dout.row(r)) {
                        *o += d;
                    }
                }
                acc(grads, *table, &g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    acc(grads, *p, &dout.slice_rows(start, start + rows));
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    acc(grads, *p, &dout.slice_cols(start, start + cols));
                    start += cols;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut g = Mat::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    g.row_mut(r)[*start..*start + dout.cols()].copy_from_slice(dout.row(r));
                }
                acc(grads, *x, &g);
            }
            Op::Row { x, index } => {
                let xv = self.value(*x);
                let mut g = Mat::zeros(xv.rows(), xv.cols());
                g.row_mut(*index).copy_from_slice(dout.data());
                acc(grads, *x, &g);
            }
            Op::Mix {
                weights,
                layers,
                probs,
            } => {
                let mut dp = Vec::with_capacity(layers.len());
                for (p, l) in probs.iter().zip(layers) {
                    dp.push(tensor::dot(dout.data(), self.value(*l).data()));
                    acc(grads, *l, &dout.scaled(*p));
                }
                let inner = tensor::dot(probs, &dp);
                let dw: Vec<f64> = probs
                    .iter()
                    .zip(&dp)
                    .map(|(p, d)| p * (d - inner))
                    .collect();
                acc(grads, *weights, &Mat::row_vector(dw));
            }
            Op::Nll {
                logits,
                targets,
                probs,
                allowed,
            } => {
                let scale = dout.item();
                let mut g = Mat::zeros(probs.rows(), probs.cols());
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = target else { continue };
                    for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                        if allowed[c] {
                            *o = scale * probs.get(r, c);
                        }
                    }
                    g.row_mut(r)[*t] -= scale;
                }
                acc(grads, *logits, &g);
            }
            Op::Bce { x, labels } => {
                let scale = dout.item();
                let xv = self.value(*x);
                let mut g = Mat::zeros(xv.rows(), xv.cols());
                for ((o, &z), &pos) in g.data_mut().iter_mut().zip(xv.data()).zip(labels) {
                    let s = tensor::sigmoid(z);
                    *o = scale * if pos { s - 1.0 } else { s };
                }
                acc(grads, *x, &g);
            }
            Op::WeightedSum(terms) => {
                let scale = dout.item();
                for (v, w) in terms {
                    acc(grads, *v, &Mat::scalar(scale * w));
                }
            }
        }
    }

    fn node_value(&self, idx: usize) -> &Mat {
        self.value(Var(idx))
    }

    /// Gradients with respect to every parameter touched by this graph.
    pub fn param_grads(&self, backward: &Backward) -> Grads {
        let mut out = Grads::new(self.params.len());
        for (i, v) in self.param_nodes.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = backward.grad(*v) {
                    out.accumulate(ParamId(i), g);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: &Mat) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Backward {
    grads: Vec<Option<Mat>>,
}

impl Backward {
    pub fn grad(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of every parameter entry of `store` against
    /// the tape gradient of the scalar built by `f`.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let analytic = {
            let mut g = Graph::new(store);
            let out = f(&mut g);
            let bw = g.backward(&[(out, Mat::scalar(1.0))]);
            g.param_grads(&bw)
        };
        let eval = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let out = f(&mut g);
            g.value(out).item()
        };
        let h = 1e-5;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let plus = eval(store);
                store.get_mut(id).data_mut()[k] = orig - h;
                let minus = eval(store);
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
                let denom = a.abs().max(numeric.abs()).max(1e-7);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "{} [{k}]: analytic {a} vs numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    fn seeded(rows: usize, cols: usize, seed: u64) -> Mat {
        // Deterministic, well-spread values without pulling in an RNG.
        let data = (0..rows * cols)
            .map(|i| ((i as f64 + 1.0) * 0.7 + seed as f64 * 1.3).sin())
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn attention_block_gradients() {
        let mut store = ParamStore::new();
        let x = store.add("x", seeded(3, 4, 1));
        let wq = store.add("wq", seeded(4, 4, 2));
        let wk = store.add("wk", seeded(4, 4, 3));
        let gain = store.add("gain", seeded(1, 4, 4));
        let bias = store.add("bias", seeded(1, 4, 5));
        check(&mut store, |g| {
            let xv = g.param(x);
            let wqv = g.param(wq);
            let q = g.matmul(xv, wqv);
            let kk = g.param(wk);
            let k = g.matmul(xv, kk);
            let s = g.matmul_t(q, k);
            let s = g.scale(s, 0.5);
            let p = g.softmax(s, true);
            let a = g.matmul(p, xv);
            let gn = g.param(gain);
            let bs = g.param(bias);
            let n = g.layer_norm(a, gn, bs);
            let h = g.gelu(n);
            let t = g.tanh(h);
            let r = g.row(t, 2);
            let sl = g.slice_cols(t, 1, 3);
            let c = g.concat_cols(&[sl, sl]);
            let rr = g.concat_rows(&[c, r]);
            g.bce(rr, &[true, false, true, false, true, true, false, false, true, false, true, true, false, false, true, true])
        });
    }

    #[test]
    fn embedding_mix_and_nll_gradients() {
        let mut store = ParamStore::new();
        let table = store.add("table", seeded(5, 3, 6));
        let w = store.add("mix", seeded(1, 2, 7));
        let out = store.add("out", seeded(3, 4, 8));
        let b = store.add("b", seeded(1, 4, 9));
        check(&mut store, |g| {
            let t = g.param(table);
            let e = g.gather(t, &[0, 3, 3, 1]);
            let e2 = g.gelu(e);
            let wv = g.param(w);
            let m = g.mix(wv, &[e, e2]);
            let o = g.param(out);
            let logits = g.matmul(m, o);
            let bv = g.param(b);
            let logits = g.add_row(logits, bv);
            let l1 = g.nll(logits, &[Some(1), None, Some(3), Some(2)], &[false, true, true, true]);
            let sum = g.add(logits, logits);
            let l2 = g.bce(sum, &[true; 16]);
            g.weighted_sum(&[(l1, 0.7), (l2, 0.1)])
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(seeded(3, 3, 1));
        let p = g.softmax(x, true);
        let pv = g.value(p);
        assert_eq!(pv.get(0, 1), 0.0);
        assert_eq!(pv.get(1, 2), 0.0);
        for r in 0..3 {
            assert!((pv.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn seeds_on_inputs_flow_to_inputs() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.input(Mat::row_vector(vec![1.0, 2.0]));
        let b = g.scale(a, 3.0);
        let bw = g.backward(&[(b, Mat::row_vector(vec![1.0, -1.0]))]);
        assert_eq!(bw.grad(a).unwrap().data(), &[3.0, -3.0]);
    }
}
