use std::ops::Range;

use super::{LayerParams, Model, Norm, Prompt, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::numerics::{gemm, Matrix, Real, View};
use crate::tokens;

/// Suppress block `layer`'s update at `positions`: `h_{layer+1}[t] := h_layer[t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSkip {
    pub layer: usize,
    pub positions: Vec<usize>,
}

/// Every residual-stream state of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTrace<R = f32> {
    pub tokens: Vec<u32>,
    /// `h_0 ..= h_L`, each `(T × d_model)`; `h_0` is the embedding output.
    pub states: Vec<Matrix<R>>,
    /// Effective attention update of each block (zero rows where skipped).
    pub attn_updates: Vec<Matrix<R>>,
    pub mlp_updates: Vec<Matrix<R>>,
    /// `(T × V)` readout of `h_L`.
    pub logits: Matrix<R>,
    /// Positions holding the MASK token.
    pub masked_positions: Vec<usize>,
    pub skip: Option<LayerSkip>,
}

impl<R: Real> ResidualTrace<R> {
    pub fn num_layers(&self) -> usize {
        self.states.len() - 1
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn intervened_positions(&self) -> &[usize] {
        self.skip.as_ref().map_or(&[], |s| &s.positions)
    }
}

pub(crate) struct NormOut<R> {
    pub y: Matrix<R>,
    pub xhat: Matrix<R>,
    pub rstd: Vec<f64>,
}

/// LayerNorm of one row; statistics in `f64`. Returns `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_row<R: Real>(
    x: &[R],
    norm: &Norm<R>,
    y: &mut [R],
    xhat: &mut [R],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for j in 0..x.len() {
        let xh = (x[j].as_f64() - mean) * rstd;
        xhat[j] = R::from_f64(xh);
        y[j] = R::from_f64(xh * norm.gain[j].as_f64() + norm.bias[j].as_f64());
    }
    rstd
}

pub(crate) fn layer_norm<R: Real>(x: &Matrix<R>, norm: &Norm<R>) -> NormOut<R> {
    let (t, d) = (x.rows(), x.cols());
    let mut y = Matrix::zeros(t, d);
    let mut xhat = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    for i in 0..t {
        let mut yr = vec![R::zero(); d];
        let mut xr = vec![R::zero(); d];
        rstd.push(layer_norm_row(x.row(i), norm, &mut yr, &mut xr));
        y.row_mut(i).copy_from_slice(&yr);
        xhat.row_mut(i).copy_from_slice(&xr);
    }
    NormOut { y, xhat, rstd }
}

/// `x W + b`.
pub(crate) fn linear<R: Real>(x: &Matrix<R>, w: &Matrix<R>, b: &[R]) -> Matrix<R> {
    let mut out = x.matmul(w);
    for i in 0..out.rows() {
        for (o, bb) in out.row_mut(i).iter_mut().zip(b) {
            *o += *bb;
        }
    }
    out
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044715;

#[inline]
pub(crate) fn gelu_tanh_arg<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    c * (x + a * x * x * x)
}

/// Fills `tanh` and `act` with the tanh-approximate GELU of `pre`.
pub(crate) fn gelu<R: Real>(pre: &Matrix<R>) -> (Matrix<R>, Matrix<R>) {
    let half = R::from_f64(0.5);
    let mut th = Matrix::zeros(pre.rows(), pre.cols());
    let mut act = Matrix::zeros(pre.rows(), pre.cols());
    for ((x, t), a) in pre
        .data()
        .iter()
        .zip(th.data_mut().iter_mut())
        .zip(act.data_mut().iter_mut())
    {
        *t = gelu_tanh_arg(*x).gelu_tanh();
        *a = half * *x * (R::one() + *t);
    }
    (th, act)
}

/// Multi-head scaled dot-product attention over independent row ranges
/// `segments` (one per sequence). Returns the concatenated head contexts and
/// the `(len × len)` attention probabilities, indexed `segment * heads + head`.
pub(crate) fn attention<R: Real>(
    q: &Matrix<R>,
    k: &Matrix<R>,
    v: &Matrix<R>,
    num_heads: usize,
    causal: bool,
    segments: &[Range<usize>],
) -> (Matrix<R>, Vec<Matrix<R>>) {
    let d = q.cols();
    let dh = d / num_heads;
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());
    let mut ctx = Matrix::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(num_heads * segments.len());
    for seg in segments {
        let t = seg.len();
        for h in 0..num_heads {
            let off = seg.start * d + h * dh;
            let mut p = Matrix::zeros(t, t);
            gemm(
                t,
                dh,
                t,
                scale,
                View::row_major(&q.data()[off..], d),
                View::transposed(&k.data()[off..], d),
                R::zero(),
                p.data_mut(),
                t,
                1,
            );
            for i in 0..t {
                let row = p.row_mut(i);
                let allowed = if causal { i + 1 } else { t };
                let max = row[..allowed]
                    .iter()
                    .fold(R::neg_infinity(), |m, &x| if x > m { x } else { m });
                let mut total = 0.0f64;
                for x in row[..allowed].iter_mut() {
                    *x = (*x - max).exp();
                    total += x.as_f64();
                }
                let inv = R::from_f64(1.0 / total);
                for x in row[..allowed].iter_mut() {
                    *x *= inv;
                }
                for x in row[allowed..].iter_mut() {
                    *x = R::zero();
                }
            }
            gemm(
                t,
                t,
                dh,
                R::one(),
                p.view(),
                View::row_major(&v.data()[off..], d),
                R::zero(),
                &mut ctx.data_mut()[off..],
                d,
                1,
            );
            probs.push(p);
        }
    }
    (ctx, probs)
}

/// Intermediates of one block, kept for the backward pass.
pub(crate) struct BlockCache<R> {
    pub norm1: NormOut<R>,
    pub q: Matrix<R>,
    pub k: Matrix<R>,
    pub v: Matrix<R>,
    pub probs: Vec<Matrix<R>>,
    pub ctx: Matrix<R>,
    pub attn_out: Matrix<R>,
    pub norm2: NormOut<R>,
    pub pre: Matrix<R>,
    pub tanh: Matrix<R>,
    pub act: Matrix<R>,
    pub mlp_out: Matrix<R>,
}

pub(crate) fn block_forward<R: Real>(
    layer: &LayerParams<R>,
    num_heads: usize,
    causal: bool,
    x: &Matrix<R>,
    segments: &[Range<usize>],
) -> BlockCache<R> {
    let norm1 = layer_norm(x, &layer.attn_norm);
    let q = linear(&norm1.y, &layer.wq, &layer.bq);
    let k = linear(&norm1.y, &layer.wk, &layer.bk);
    let v = linear(&norm1.y, &layer.wv, &layer.bv);
    let (ctx, probs) = attention(&q, &k, &v, num_heads, causal, segments);
    let attn_out = linear(&ctx, &layer.wo, &layer.bo);
    let mut mid = x.clone();
    for (m, a) in mid.data_mut().iter_mut().zip(attn_out.data()) {
        *m += *a;
    }
    let norm2 = layer_norm(&mid, &layer.mlp_norm);
    let pre = linear(&norm2.y, &layer.w_in, &layer.b_in);
    let (tanh, act) = gelu(&pre);
    let mlp_out = linear(&act, &layer.w_out, &layer.b_out);
    BlockCache {
        norm1,
        q,
        k,
        v,
        probs,
        ctx,
        attn_out,
        norm2,
        pre,
        tanh,
        act,
        mlp_out,
    }
}

impl<R: Real> Model<R> {
    pub(crate) fn embed(&self, tokens: &[u32]) -> Matrix<R> {
        let d = self.config.d_model;
        let mut h = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            let te = self.params.tok_emb.row(tok as usize);
            let pe = self.params.pos_emb.row(t);
            for ((o, a), b) in h.row_mut(t).iter_mut().zip(te).zip(pe) {
                *o = *a + *b;
            }
        }
        h
    }

    /// `unembed(final_norm(hidden))` for one `d_model` vector, accumulated in `f64`.
    pub fn readout(&self, hidden: &[R]) -> Vec<R> {
        let d = self.config.d_model;
        let vocab = self.config.vocab_size;
        let mut y = vec![R::zero(); d];
        let mut xhat = vec![R::zero(); d];
        layer_norm_row(hidden, &self.params.final_norm, &mut y, &mut xhat);
        readout_normed(&y, &self.params.unembed, vocab)
    }

    /// Readout of every row of a `(T × d_model)` state.
    pub fn readout_rows(&self, state: &Matrix<R>) -> Matrix<R> {
        let vocab = self.config.vocab_size;
        let mut out = Matrix::zeros(state.rows(), vocab);
        for t in 0..state.rows() {
            let row = self.readout(state.row(t));
            out.row_mut(t).copy_from_slice(&row);
        }
        out
    }

    /// Traced forward pass. Attention is causal for autoregressive models and
    /// bidirectional for masked ones.
    pub fn forward(&self, prompt: &Prompt) -> Result<ResidualTrace<R>> {
        self.run(&prompt.tokens, None)
    }

    pub fn forward_tokens(&self, tokens: &[u32]) -> Result<ResidualTrace<R>> {
        self.run(tokens, None)
    }

    /// Forward pass with block `skip.layer`'s update removed at `skip.positions`.
    /// Every other position of that block, and every later block, runs normally.
    pub fn forward_skipping(&self, tokens: &[u32], skip: &LayerSkip) -> Result<ResidualTrace<R>> {
        if skip.layer >= self.config.num_layers {
            return Err(Error::Intervention(format!(
                "source layer {} out of range for {} layers",
                skip.layer, self.config.num_layers
            )));
        }
        if let Some(&p) = skip.positions.iter().find(|&&p| p >= tokens.len()) {
            return Err(Error::Intervention(format!(
                "skip position {p} outside prompt of length {}",
                tokens.len()
            )));
        }
        self.run(tokens, Some(skip))
    }

    fn run(&self, tokens: &[u32], skip: Option<&LayerSkip>) -> Result<ResidualTrace<R>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let causal = cfg.objective.is_causal();
        let mut states = Vec::with_capacity(cfg.num_layers + 1);
        let mut attn_updates = Vec::with_capacity(cfg.num_layers);
        let mut mlp_updates = Vec::with_capacity(cfg.num_layers);
        states.push(self.embed(tokens));
        for (l, layer) in self.params.layers.iter().enumerate() {
            let h = &states[l];
            let cache = block_forward(layer, cfg.num_heads, causal, h, &[0..tokens.len()]);
            let mut attn = cache.attn_out;
            let mut mlp = cache.mlp_out;
            if let Some(s) = skip.filter(|s| s.layer == l) {
                for &p in &s.positions {
                    attn.row_mut(p).fill(R::zero());
                    mlp.row_mut(p).fill(R::zero());
                }
            }
            let mut next = h.clone();
            for ((n, a), m) in next.data_mut().iter_mut().zip(attn.data()).zip(mlp.data()) {
                *n = (*n + *a) + *m;
            }
            if let Some(s) = skip.filter(|s| s.layer == l) {
                for &p in &s.positions {
                    next.row_mut(p).copy_from_slice(h.row(p));
                }
            }
            states.push(next);
            attn_updates.push(attn);
            mlp_updates.push(mlp);
        }
        let last = states.last().expect("at least one state");
        let logits = self.readout_rows(last);
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        let masked_positions = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tokens::MASK)
            .map(|(i, _)| i)
            .collect();
        Ok(ResidualTrace {
            tokens: tokens.to_vec(),
            states,
            attn_updates,
            mlp_updates,
            logits,
            masked_positions,
            skip: skip.cloned(),
        })
    }
}

/// `y · U` for one normalized row, `f64` accumulation.
pub(crate) fn readout_normed<R: Real>(y: &[R], unembed: &Matrix<R>, vocab: usize) -> Vec<R> {
    let mut acc = vec![0.0f64; vocab];
    for (k, yk) in y.iter().enumerate() {
        let yk = yk.as_f64();
        for (a, u) in acc.iter_mut().zip(unembed.row(k)) {
            *a += yk * u.as_f64();
        }
    }
    acc.into_iter().map(R::from_f64).collect()
}
