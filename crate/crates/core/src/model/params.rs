use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::numerics::{Matrix, Real};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<R> {
    pub gain: Vec<R>,
    pub bias: Vec<R>,
}

impl<R: Real> Norm<R> {
    fn identity(d: usize) -> Self {
        Self {
            gain: vec![R::one(); d],
            bias: vec![R::zero(); d],
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: vec![R::zero(); d],
            bias: vec![R::zero(); d],
        }
    }

    fn cast<S: Real>(&self) -> Norm<S> {
        Norm {
            gain: cast_vec(&self.gain),
            bias: cast_vec(&self.bias),
        }
    }
}

/// Weights of one block. Projections are stored `(in × out)` so `y = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<R> {
    pub attn_norm: Norm<R>,
    pub wq: Matrix<R>,
    pub bq: Vec<R>,
    pub wk: Matrix<R>,
    pub bk: Vec<R>,
    pub wv: Matrix<R>,
    pub bv: Vec<R>,
    pub wo: Matrix<R>,
    pub bo: Vec<R>,
    pub mlp_norm: Norm<R>,
    pub w_in: Matrix<R>,
    pub b_in: Vec<R>,
    pub w_out: Matrix<R>,
    pub b_out: Vec<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<R> {
    pub tok_emb: Matrix<R>,
    pub pos_emb: Matrix<R>,
    pub layers: Vec<LayerParams<R>>,
    pub final_norm: Norm<R>,
    /// `(d_model × vocab)`, untied from `tok_emb`.
    pub unembed: Matrix<R>,
}

type Entry<'a, R> = (String, Vec<usize>, &'a [R]);

fn mat_entry<R: Real>(name: String, m: &Matrix<R>) -> Entry<'_, R> {
    (name, m.shape().to_vec(), m.data())
}

fn vec_entry<R>(name: String, v: &[R]) -> Entry<'_, R> {
    (name, vec![v.len()], v)
}

fn cast_vec<R: Real, S: Real>(v: &[R]) -> Vec<S> {
    v.iter().map(|x| S::from_f64(x.as_f64())).collect()
}

impl<R: Real> Params<R> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, ff) = (cfg.d_model, cfg.d_ff);
        let layer = || LayerParams {
            attn_norm: Norm::zeros(d),
            wq: Matrix::zeros(d, d),
            bq: vec![R::zero(); d],
            wk: Matrix::zeros(d, d),
            bk: vec![R::zero(); d],
            wv: Matrix::zeros(d, d),
            bv: vec![R::zero(); d],
            wo: Matrix::zeros(d, d),
            bo: vec![R::zero(); d],
            mlp_norm: Norm::zeros(d),
            w_in: Matrix::zeros(d, ff),
            b_in: vec![R::zero(); ff],
            w_out: Matrix::zeros(ff, d),
            b_out: vec![R::zero(); d],
        };
        Self {
            tok_emb: Matrix::zeros(cfg.vocab_size, d),
            pos_emb: Matrix::zeros(cfg.max_seq_len, d),
            layers: (0..cfg.num_layers).map(|_| layer()).collect(),
            final_norm: Norm::zeros(d),
            unembed: Matrix::zeros(d, cfg.vocab_size),
        }
    }

    pub(crate) fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let std = 0.02;
        let out_std = std / (2.0 * cfg.num_layers as f64).sqrt();
        let mut fill = |m: &mut Matrix<R>, s: f64| {
            let dist = Normal::new(0.0, s).expect("positive std");
            for x in m.data_mut() {
                *x = R::from_f64(dist.sample(rng));
            }
        };
        let mut p = Self::zeros(cfg);
        fill(&mut p.tok_emb, std);
        fill(&mut p.pos_emb, std);
        for l in &mut p.layers {
            l.attn_norm = Norm::identity(cfg.d_model);
            l.mlp_norm = Norm::identity(cfg.d_model);
            fill(&mut l.wq, std);
            fill(&mut l.wk, std);
            fill(&mut l.wv, std);
            fill(&mut l.wo, out_std);
            fill(&mut l.w_in, std);
            fill(&mut l.w_out, out_std);
        }
        p.final_norm = Norm::identity(cfg.d_model);
        fill(&mut p.unembed, std);
        p
    }

    pub fn cast<S: Real>(&self) -> Params<S> {
        Params {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    bq: cast_vec(&l.bq),
                    wk: l.wk.cast(),
                    bk: cast_vec(&l.bk),
                    wv: l.wv.cast(),
                    bv: cast_vec(&l.bv),
                    wo: l.wo.cast(),
                    bo: cast_vec(&l.bo),
                    mlp_norm: l.mlp_norm.cast(),
                    w_in: l.w_in.cast(),
                    b_in: cast_vec(&l.b_in),
                    w_out: l.w_out.cast(),
                    b_out: cast_vec(&l.b_out),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
        }
    }

    /// Every tensor as `(name, shape, data)` in canonical (file) order.
    pub fn tensors(&self) -> Vec<Entry<'_, R>> {
        let mut out = vec![
            mat_entry("tok_emb".into(), &self.tok_emb),
            mat_entry("pos_emb".into(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let v = |n: &str, x| vec_entry(format!("layers.{i}.{n}"), x);
            let mm = |n: &str, x| mat_entry(format!("layers.{i}.{n}"), x);
            out.push(v("attn_norm.gain", &l.attn_norm.gain));
            out.push(v("attn_norm.bias", &l.attn_norm.bias));
            out.push(mm("attn.wq", &l.wq));
            out.push(v("attn.bq", &l.bq));
            out.push(mm("attn.wk", &l.wk));
            out.push(v("attn.bk", &l.bk));
            out.push(mm("attn.wv", &l.wv));
            out.push(v("attn.bv", &l.bv));
            out.push(mm("attn.wo", &l.wo));
            out.push(v("attn.bo", &l.bo));
            out.push(v("mlp_norm.gain", &l.mlp_norm.gain));
            out.push(v("mlp_norm.bias", &l.mlp_norm.bias));
            out.push(mm("mlp.w_in", &l.w_in));
            out.push(v("mlp.b_in", &l.b_in));
            out.push(mm("mlp.w_out", &l.w_out));
            out.push(v("mlp.b_out", &l.b_out));
        }
        let g = &self.final_norm.gain;
        let b = &self.final_norm.bias;
        out.push(("final_norm.gain".into(), vec![g.len()], g));
        out.push(("final_norm.bias".into(), vec![b.len()], b));
        out.push(mat_entry("unembed".into(), &self.unembed));
        out
    }

    /// Mutable views in the same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [R])> {
        let mut out: Vec<(String, &mut [R])> = vec![
            ("tok_emb".into(), self.tok_emb.data_mut()),
            ("pos_emb".into(), self.pos_emb.data_mut()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = |n: &str| format!("layers.{i}.{n}");
            out.push((name("attn_norm.gain"), &mut l.attn_norm.gain));
            out.push((name("attn_norm.bias"), &mut l.attn_norm.bias));
            out.push((name("attn.wq"), l.wq.data_mut()));
            out.push((name("attn.bq"), &mut l.bq));
            out.push((name("attn.wk"), l.wk.data_mut()));
            out.push((name("attn.bk"), &mut l.bk));
            out.push((name("attn.wv"), l.wv.data_mut()));
            out.push((name("attn.bv"), &mut l.bv));
            out.push((name("attn.wo"), l.wo.data_mut()));
            out.push((name("attn.bo"), &mut l.bo));
            out.push((name("mlp_norm.gain"), &mut l.mlp_norm.gain));
            out.push((name("mlp_norm.bias"), &mut l.mlp_norm.bias));
            out.push((name("mlp.w_in"), l.w_in.data_mut()));
            out.push((name("mlp.b_in"), &mut l.b_in));
            out.push((name("mlp.w_out"), l.w_out.data_mut()));
            out.push((name("mlp.b_out"), &mut l.b_out));
        }
        out.push(("final_norm.gain".into(), &mut self.final_norm.gain));
        out.push(("final_norm.bias".into(), &mut self.final_norm.bias));
        out.push(("unembed".into(), self.unembed.data_mut()));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params<R>) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }

    pub fn scale(&mut self, factor: R) {
        for (_, t) in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }
}
