//! Test oracles. The forward pass, softmax, KL and rank correlation here are
//! independent straight-line `f64` loops that share no code with the library;
//! the gradient check compares the library against its own loss.

#![allow(dead_code)]

use depthprobe::model::{Norm, Params};
use depthprobe::rng::rng_for;
use depthprobe::tokens::MASK;
use depthprobe::train::{batch_loss, loss_and_grads, TrainExample};
use depthprobe::{Exec, Matrix, Model, ModelConfig, Objective};
use rand::Rng as _;

pub struct OracleTrace {
    /// `states[l][t][j]` for `l = 0..=L`.
    pub states: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
}

fn at(m: &Matrix<f64>, i: usize, j: usize) -> f64 {
    m.get(i, j)
}

fn norm_row(x: &[f64], n: &Norm<f64>) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let s = (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / s * n.gain[j] + n.bias[j])
        .collect()
}

fn affine(x: &[f64], w: &Matrix<f64>, b: &[f64]) -> Vec<f64> {
    (0..w.cols())
        .map(|o| {
            let mut acc = b[o];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * at(w, i, o);
            }
            acc
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn readout(m: &Model<f64>, h: &[f64]) -> Vec<f64> {
    affine(&norm_row(h, &m.params.final_norm), &m.params.unembed, &vec![0.0; m.config.vocab_size])
}

/// Forward pass; with `skip = Some((s, positions))` block `s` leaves those
/// rows unchanged.
pub fn forward(m: &Model<f64>, tokens: &[u32], skip: Option<(usize, &[usize])>) -> OracleTrace {
    let cfg = &m.config;
    let (d, heads) = (cfg.d_model, cfg.num_heads);
    let dh = d / heads;
    let causal = cfg.objective == Objective::Autoregressive;
    let t_len = tokens.len();
    let mut h: Vec<Vec<f64>> = (0..t_len)
        .map(|t| (0..d).map(|j| at(&m.params.tok_emb, tokens[t] as usize, j) + at(&m.params.pos_emb, t, j)).collect())
        .collect();
    let mut states = vec![h.clone()];
    for (l, p) in m.params.layers.iter().enumerate() {
        let n1: Vec<Vec<f64>> = h.iter().map(|r| norm_row(r, &p.attn_norm)).collect();
        let q: Vec<Vec<f64>> = n1.iter().map(|r| affine(r, &p.wq, &p.bq)).collect();
        let k: Vec<Vec<f64>> = n1.iter().map(|r| affine(r, &p.wk, &p.bk)).collect();
        let v: Vec<Vec<f64>> = n1.iter().map(|r| affine(r, &p.wv, &p.bv)).collect();
        let mut ctx = vec![vec![0.0; d]; t_len];
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            for i in 0..t_len {
                let visible = if causal { i + 1 } else { t_len };
                let scores: Vec<f64> = (0..visible)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = w.iter().sum();
                for c in cols.clone() {
                    ctx[i][c] = (0..visible).map(|j| w[j] / z * v[j][c]).sum();
                }
            }
        }
        let mut next = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let attn = affine(&ctx[t], &p.wo, &p.bo);
            let mid: Vec<f64> = h[t].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let n2 = norm_row(&mid, &p.mlp_norm);
            let act: Vec<f64> = affine(&n2, &p.w_in, &p.b_in).into_iter().map(gelu).collect();
            let mlp = affine(&act, &p.w_out, &p.b_out);
            let out: Vec<f64> = mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
            let skipped = matches!(skip, Some((s, pos)) if s == l && pos.contains(&t));
            next.push(if skipped { h[t].clone() } else { out });
        }
        h = next;
        states.push(h.clone());
    }
    let logits = h.iter().map(|r| readout(m, r)).collect();
    OracleTrace { states, logits }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Layer-`layer` (1-based) readout of an oracle trace at position `t`.
pub fn layer_logits(m: &Model<f64>, tr: &OracleTrace, layer: usize, t: usize) -> Vec<f64> {
    readout(m, &tr.states[layer][t])
}

/// Average ranks by counting: `1 + #smaller + (#equal - 1) / 2`.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa.sqrt() * sbb.sqrt()))
    }
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

pub fn toy_config(objective: Objective) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        d_ff: 16,
        vocab_size: 25,
        max_seq_len: 16,
        objective,
        ..ModelConfig::default()
    }
}

/// Random toy model with weights large enough that every layer matters.
pub fn toy_model(objective: Objective, seed: u64) -> Model<f64> {
    let mut m: Model<f64> = Model::zeros(toy_config(objective)).unwrap();
    let mut rng = rng_for(seed, &[]);
    for (name, t) in m.params.tensors_mut() {
        let gain = name.ends_with(".gain");
        for x in t.iter_mut() {
            let u: f64 = rng.random_range(-1.0..1.0);
            *x = if gain { 1.0 + 0.3 * u } else { 0.5 * u };
        }
    }
    m
}

/// The toy model rounded to `f32` and both precisions of it.
pub fn toy_pair(objective: Objective, seed: u64) -> (Model<f32>, Model<f64>) {
    let m32: Model<f32> = toy_model(objective, seed).cast();
    let m64 = m32.cast();
    (m32, m64)
}

pub fn max_abs_diff<R: depthprobe::Real>(lib: &Matrix<R>, oracle: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in oracle.iter().enumerate() {
        for (j, o) in row.iter().enumerate() {
            worst = worst.max((lib.get(i, j).as_f64() - o).abs());
        }
    }
    worst
}

/// Small fixed batch that exercises padding-free packing of two sequences.
pub fn gradient_batch(objective: Objective) -> Vec<TrainExample> {
    match objective {
        Objective::Masked => vec![
            TrainExample {
                tokens: vec![0, MASK, 5, 9, MASK, 19, 3],
                targets: vec![(1, 4), (4, 11)],
            },
            TrainExample {
                tokens: vec![7, 7, MASK, 2, 24],
                targets: vec![(2, 17)],
            },
        ],
        Objective::Autoregressive => vec![
            TrainExample::autoregressive("MKVLAW"),
            TrainExample::autoregressive("CDE"),
        ],
    }
}

/// Max relative error of the analytic gradient of the toy model against the
/// fourth-order central difference at step `h`, with the location of the
/// worst entry. The denominator is floored so exactly-zero entries compare
/// absolutely.
pub fn gradient_check(objective: Objective, seed: u64, h: f64) -> (f64, String) {
    let model = toy_model(objective, seed);
    let batch = gradient_batch(objective);
    let (_, grads): (f64, Params<f64>) = loss_and_grads(&model, &batch, Exec::Sequential).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, _, d)| (n, d.to_vec()))
        .collect();
    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    for (ti, (name, expect)) in analytic.iter().enumerate() {
        for (i, &a) in expect.iter().enumerate() {
            let orig = probe.params.tensors_mut()[ti].1[i];
            let mut loss_at = |x: f64| {
                probe.params.tensors_mut()[ti].1[i] = x;
                batch_loss(&probe, &batch, Exec::Sequential).unwrap()
            };
            let (p1, m1) = (loss_at(orig + h), loss_at(orig - h));
            let (p2, m2) = (loss_at(orig + 2.0 * h), loss_at(orig - 2.0 * h));
            probe.params.tensors_mut()[ti].1[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}
