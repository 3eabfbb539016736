//! Hand-differentiated training of the toy transformer.
//!
//! The loss is the mean cross-entropy over every target position of a batch:
//! masked positions for masked models, next tokens for autoregressive ones.
//! A batch is cut into fixed chunks of [`CHUNK`] examples whose rows are
//! packed into one matrix, so position-wise layers run as a single GEMM while
//! attention stays within each sequence. Chunks run in parallel when enabled
//! and their gradients are summed in chunk order, so the result is independent
//! of the worker count.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::{block_forward, layer_norm_row, BlockCache, NormOut};
use crate::model::forward::{readout_normed, GELU_A, GELU_C};
use crate::model::{mask_prompt, LayerParams, Model, ModelConfig, Norm, Objective, Params, Prompt};
use crate::numerics::{gemm, Matrix, Real, View};
use crate::par::Exec;
use crate::rng::{rng_for, stream, Rng};
use crate::synth::{sample_sequence, SeqGenerator};

/// One sequence with the positions whose predictions enter the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    /// `(position, target token)`: the logits at `position` should predict the token.
    pub targets: Vec<(usize, u32)>,
}

impl TrainExample {
    /// Masks `residues` and targets the original tokens at masked positions.
    pub fn masked(residues: &str, mask_rate: f64, rng: &mut Rng) -> Result<Self> {
        let (prompt, _) = Prompt::from_residues("", residues, Objective::Masked);
        let masked = mask_prompt(&prompt, mask_rate, rng)?;
        let targets = masked
            .positions
            .iter()
            .map(|&p| (p, prompt.tokens[p]))
            .collect();
        Ok(Self {
            tokens: masked.prompt.tokens,
            targets,
        })
    }

    /// BOS-prefixed sequence; position `t` predicts token `t + 1`.
    pub fn autoregressive(residues: &str) -> Self {
        let (prompt, _) = Prompt::from_residues("", residues, Objective::Autoregressive);
        let targets = (1..prompt.len()).map(|t| (t - 1, prompt.tokens[t])).collect();
        Self {
            tokens: prompt.tokens,
            targets,
        }
    }
}

fn total_targets(batch: &[TrainExample]) -> Result<usize> {
    let n: usize = batch.iter().map(|e| e.targets.len()).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("batch has no target positions".into()));
    }
    Ok(n)
}

/// Examples per packed chunk. Part of the determinism contract: changing it
/// changes the floating-point summation order.
pub const CHUNK: usize = 8;

/// Rows of several sequences stacked into one matrix.
struct Packed<R> {
    segments: Vec<Range<usize>>,
    states: Vec<Matrix<R>>,
    caches: Vec<BlockCache<R>>,
}

fn run_forward<R: Real>(model: &Model<R>, examples: &[TrainExample]) -> Result<Packed<R>> {
    let cfg = &model.config;
    let mut segments = Vec::with_capacity(examples.len());
    let mut rows = 0;
    for ex in examples {
        model.check_tokens(&ex.tokens)?;
        if let Some(&(pos, target)) = ex
            .targets
            .iter()
            .find(|(p, t)| *p >= ex.tokens.len() || *t as usize >= cfg.vocab_size)
        {
            return Err(Error::InvalidArgument(format!(
                "target ({pos}, {target}) outside a length-{} sequence or the vocabulary",
                ex.tokens.len()
            )));
        }
        segments.push(rows..rows + ex.tokens.len());
        rows += ex.tokens.len();
    }
    let mut h0 = Matrix::zeros(rows, cfg.d_model);
    for (ex, seg) in examples.iter().zip(&segments) {
        let e = model.embed(&ex.tokens);
        h0.data_mut()[seg.start * cfg.d_model..seg.end * cfg.d_model].copy_from_slice(e.data());
    }
    let causal = cfg.objective.is_causal();
    let mut states = vec![h0];
    let mut caches = Vec::with_capacity(cfg.num_layers);
    for layer in &model.params.layers {
        let h = states.last().expect("embedding state");
        let cache = block_forward(layer, cfg.num_heads, causal, h, &segments);
        let mut next = h.clone();
        for ((n, a), m) in next
            .data_mut()
            .iter_mut()
            .zip(cache.attn_out.data())
            .zip(cache.mlp_out.data())
        {
            *n = (*n + *a) + *m;
        }
        states.push(next);
        caches.push(cache);
    }
    Ok(Packed {
        segments,
        states,
        caches,
    })
}

/// Cross-entropy of `logits` against `target`, plus `softmax - onehot`.
fn cross_entropy<R: Real>(logits: &[R], target: u32) -> (f64, Vec<f64>) {
    let max = logits
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[target as usize].as_f64();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[target as usize] -= 1.0;
    (loss, grad)
}

/// Summed loss of a chunk (no gradient).
fn chunk_loss<R: Real>(model: &Model<R>, examples: &[TrainExample]) -> Result<f64> {
    let fwd = run_forward(model, examples)?;
    let last = fwd.states.last().expect("final state");
    let mut total = 0.0;
    for (ex, seg) in examples.iter().zip(&fwd.segments) {
        for &(pos, target) in &ex.targets {
            let logits = model.readout(last.row(seg.start + pos));
            total += cross_entropy(&logits, target).0;
        }
    }
    Ok(total)
}

/// `dx` of a LayerNorm row given `dy`; accumulates gain and bias gradients.
fn layer_norm_row_backward<R: Real>(
    dy: &[R],
    xhat: &[R],
    rstd: f64,
    norm: &Norm<R>,
    grad: &mut Norm<R>,
    dx: &mut [R],
) {
    let n = dy.len() as f64;
    let mut mean_dxh = 0.0;
    let mut mean_dxh_xh = 0.0;
    for j in 0..dy.len() {
        grad.gain[j] += dy[j] * xhat[j];
        grad.bias[j] += dy[j];
        let dxh = dy[j].as_f64() * norm.gain[j].as_f64();
        mean_dxh += dxh;
        mean_dxh_xh += dxh * xhat[j].as_f64();
    }
    mean_dxh /= n;
    mean_dxh_xh /= n;
    for j in 0..dy.len() {
        let dxh = dy[j].as_f64() * norm.gain[j].as_f64();
        dx[j] = R::from_f64(rstd * (dxh - mean_dxh - xhat[j].as_f64() * mean_dxh_xh));
    }
}

fn layer_norm_backward<R: Real>(
    dy: &Matrix<R>,
    cache: &NormOut<R>,
    norm: &Norm<R>,
    grad: &mut Norm<R>,
) -> Matrix<R> {
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for i in 0..dy.rows() {
        let mut row = vec![R::zero(); dy.cols()];
        layer_norm_row_backward(dy.row(i), cache.xhat.row(i), cache.rstd[i], norm, grad, &mut row);
        dx.row_mut(i).copy_from_slice(&row);
    }
    dx
}

/// For `y = x W + b`: `dW += x^T dy`, `db += colsum(dy)`; returns `dy W^T`.
fn linear_backward<R: Real>(
    x: &Matrix<R>,
    w: &Matrix<R>,
    dy: &Matrix<R>,
    dw: &mut Matrix<R>,
    db: &mut [R],
) -> Matrix<R> {
    let (t, m, n) = (x.rows(), x.cols(), dy.cols());
    gemm(m, t, n, R::one(), x.view_t(), dy.view(), R::one(), dw.data_mut(), n, 1);
    for i in 0..t {
        for (b, g) in db.iter_mut().zip(dy.row(i)) {
            *b += *g;
        }
    }
    let mut dx = Matrix::zeros(t, m);
    gemm(t, n, m, R::one(), dy.view(), w.view_t(), R::zero(), dx.data_mut(), m, 1);
    dx
}

fn add_into<R: Real>(dst: &mut Matrix<R>, src: &Matrix<R>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += *s;
    }
}

/// Backpropagates `dout = dL/d h_{l+1}` through one block; returns `dL/d h_l`.
fn block_backward<R: Real>(
    layer: &LayerParams<R>,
    grad: &mut LayerParams<R>,
    cache: &BlockCache<R>,
    num_heads: usize,
    segments: &[Range<usize>],
    dout: &Matrix<R>,
) -> Matrix<R> {
    let (rows, d) = (dout.rows(), dout.cols());
    let dh = d / num_heads;

    // MLP branch: h_{l+1} = mid + act W_out + b_out
    let mut dact = linear_backward(&cache.act, &layer.w_out, dout, &mut grad.w_out, &mut grad.b_out);
    let half = R::from_f64(0.5);
    let c = R::from_f64(GELU_C);
    let a3 = R::from_f64(3.0 * GELU_A);
    for ((g, &x), &th) in dact
        .data_mut()
        .iter_mut()
        .zip(cache.pre.data())
        .zip(cache.tanh.data())
    {
        let du = c * (R::one() + a3 * x * x);
        let dgelu = half * (R::one() + th) + half * x * (R::one() - th * th) * du;
        *g *= dgelu;
    }
    let dpre = dact;
    let dn2 = linear_backward(&cache.norm2.y, &layer.w_in, &dpre, &mut grad.w_in, &mut grad.b_in);
    let mut dmid = layer_norm_backward(&dn2, &cache.norm2, &layer.mlp_norm, &mut grad.mlp_norm);
    add_into(&mut dmid, dout);

    // attention branch: mid = x + ctx Wo + bo
    let dctx = linear_backward(&cache.ctx, &layer.wo, &dmid, &mut grad.wo, &mut grad.bo);
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = Matrix::zeros(rows, d);
    let mut dk = Matrix::zeros(rows, d);
    let mut dv = Matrix::zeros(rows, d);
    for (i, p) in cache.probs.iter().enumerate() {
        let seg = &segments[i / num_heads];
        let t = seg.len();
        let off = seg.start * d + (i % num_heads) * dh;
        // dP = dctx_h V_h^T
        let mut dp = Matrix::zeros(t, t);
        gemm(
            t,
            dh,
            t,
            R::one(),
            View::row_major(&dctx.data()[off..], d),
            View::transposed(&cache.v.data()[off..], d),
            R::zero(),
            dp.data_mut(),
            t,
            1,
        );
        // dV_h = P^T dctx_h
        gemm(
            t,
            t,
            dh,
            R::one(),
            p.view_t(),
            View::row_major(&dctx.data()[off..], d),
            R::zero(),
            &mut dv.data_mut()[off..],
            d,
            1,
        );
        // softmax backward; masked entries have P = 0 and stay 0
        for r in 0..t {
            let pr = p.row(r);
            let row = dp.row_mut(r);
            let dot: f64 = row.iter().zip(pr).map(|(g, q)| g.as_f64() * q.as_f64()).sum();
            let dot = R::from_f64(dot);
            for (g, &q) in row.iter_mut().zip(pr) {
                *g = q * (*g - dot);
            }
        }
        let ds = dp;
        // dQ_h = scale dS K_h, dK_h = scale dS^T Q_h
        gemm(
            t,
            t,
            dh,
            scale,
            ds.view(),
            View::row_major(&cache.k.data()[off..], d),
            R::zero(),
            &mut dq.data_mut()[off..],
            d,
            1,
        );
        gemm(
            t,
            t,
            dh,
            scale,
            ds.view_t(),
            View::row_major(&cache.q.data()[off..], d),
            R::zero(),
            &mut dk.data_mut()[off..],
            d,
            1,
        );
    }
    let n1 = &cache.norm1.y;
    let mut dn1 = linear_backward(n1, &layer.wq, &dq, &mut grad.wq, &mut grad.bq);
    add_into(&mut dn1, &linear_backward(n1, &layer.wk, &dk, &mut grad.wk, &mut grad.bk));
    add_into(&mut dn1, &linear_backward(n1, &layer.wv, &dv, &mut grad.wv, &mut grad.bv));
    let mut dx = layer_norm_backward(&dn1, &cache.norm1, &layer.attn_norm, &mut grad.attn_norm);
    add_into(&mut dx, &dmid);
    dx
}

/// Summed loss and gradient of a chunk.
fn chunk_grads<R: Real>(model: &Model<R>, examples: &[TrainExample]) -> Result<(f64, Params<R>)> {
    let cfg = &model.config;
    let mut grad = Params::zeros(cfg);
    let fwd = run_forward(model, examples)?;
    let d = cfg.d_model;
    let vocab = cfg.vocab_size;
    let last = fwd.states.last().expect("final state");

    let mut loss = 0.0;
    let mut dh = Matrix::zeros(last.rows(), d);
    let mut y = vec![R::zero(); d];
    let mut xhat = vec![R::zero(); d];
    let mut dy = vec![R::zero(); d];
    let mut dx = vec![R::zero(); d];
    for (ex, seg) in examples.iter().zip(&fwd.segments) {
        for &(pos, target) in &ex.targets {
            let row = seg.start + pos;
            let rstd = layer_norm_row(last.row(row), &model.params.final_norm, &mut y, &mut xhat);
            let logits = readout_normed(&y, &model.params.unembed, vocab);
            let (l, dlogits) = cross_entropy(&logits, target);
            loss += l;
            let dl: Vec<R> = dlogits.iter().map(|&g| R::from_f64(g)).collect();
            for k in 0..d {
                let urow = model.params.unembed.row(k);
                let grow = grad.unembed.row_mut(k);
                let mut acc = 0.0f64;
                for v in 0..vocab {
                    grow[v] += y[k] * dl[v];
                    acc += urow[v].as_f64() * dlogits[v];
                }
                dy[k] = R::from_f64(acc);
            }
            layer_norm_row_backward(&dy, &xhat, rstd, &model.params.final_norm, &mut grad.final_norm, &mut dx);
            for (a, b) in dh.row_mut(row).iter_mut().zip(&dx) {
                *a += *b;
            }
        }
    }
    for l in (0..cfg.num_layers).rev() {
        dh = block_backward(
            &model.params.layers[l],
            &mut grad.layers[l],
            &fwd.caches[l],
            cfg.num_heads,
            &fwd.segments,
            &dh,
        );
    }
    for (ex, seg) in examples.iter().zip(&fwd.segments) {
        for (t, &tok) in ex.tokens.iter().enumerate() {
            let g = dh.row(seg.start + t);
            for (a, b) in grad.tok_emb.row_mut(tok as usize).iter_mut().zip(g) {
                *a += *b;
            }
            for (a, b) in grad.pos_emb.row_mut(t).iter_mut().zip(g) {
                *a += *b;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean cross-entropy over all batch targets and its gradient.
pub fn loss_and_grads<R: Real>(
    model: &Model<R>,
    batch: &[TrainExample],
    exec: Exec,
) -> Result<(f64, Params<R>)> {
    let n = total_targets(batch)?;
    let chunks: Vec<&[TrainExample]> = batch.chunks(CHUNK).collect();
    let parts = exec.try_map(&chunks, |c| chunk_grads(model, c))?;
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grad.add_assign(&g);
    }
    grad.scale(R::from_f64(1.0 / n as f64));
    Ok((loss / n as f64, grad))
}

/// Mean cross-entropy over all batch targets.
pub fn batch_loss<R: Real>(model: &Model<R>, batch: &[TrainExample], exec: Exec) -> Result<f64> {
    let n = total_targets(batch)?;
    let chunks: Vec<&[TrainExample]> = batch.chunks(CHUNK).collect();
    let parts = exec.try_map(&chunks, |c| chunk_loss(model, c))?;
    Ok(parts.iter().sum::<f64>() / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor Adam moments, in the canonical tensor order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<R: Real>(params: &Params<R>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.2.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update of one tensor at 1-based step `step`.
pub fn adam_update_slice<R: Real>(
    param: &mut [R],
    grad: &[R],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        let p = param[i].as_f64() - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        param[i] = R::from_f64(p);
    }
}

/// One Adam step. Rejects the whole update if any gradient is non-finite.
pub fn adam_step<R: Real>(
    model: &mut Model<R>,
    grads: &Params<R>,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    let grads = grads.tensors();
    if grads.len() != state.m.len() {
        return Err(Error::InvalidArgument("optimizer state does not match the model".into()));
    }
    for (name, _, g) in &grads {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{name}[{i}]")));
        }
    }
    state.step += 1;
    for (i, (_, dst)) in model.params.tensors_mut().into_iter().enumerate() {
        let g = grads[i].2;
        if g.len() != dst.len() {
            return Err(Error::InvalidArgument(format!("gradient shape mismatch for {}", grads[i].0)));
        }
        adam_update_slice(dst, g, &mut state.m[i], &mut state.v[i], state.step, cfg);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mask_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Residues per training sequence (autoregressive examples add BOS).
    pub seq_len: usize,
    pub adam: AdamConfig,
    pub heldout_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mask_rate: 0.15,
            steps: 3000,
            batch_size: 32,
            seq_len: 64,
            adam: AdamConfig::default(),
            heldout_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask rate {} outside (0, 1)", self.mask_rate));
        }
        if self.steps == 0 || self.batch_size == 0 || self.heldout_size == 0 {
            return bad("steps, batch size and held-out size must be positive".into());
        }
        let needed = self.seq_len + usize::from(self.model.objective.is_causal());
        if self.seq_len < 2 || needed > self.model.max_seq_len {
            return bad(format!(
                "sequence length {} does not fit max_seq_len {}",
                self.seq_len, self.model.max_seq_len
            ));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("invalid optimizer hyperparameters".into());
        }
        Ok(())
    }
}

fn make_example(cfg: &TrainConfig, gen: &SeqGenerator, rng: &mut Rng) -> Result<TrainExample> {
    let seq = sample_sequence(gen, cfg.seq_len, rng);
    match cfg.model.objective {
        Objective::Masked => TrainExample::masked(&seq, cfg.mask_rate, rng),
        Objective::Autoregressive => Ok(TrainExample::autoregressive(&seq)),
    }
}

/// Training batch `index`, a pure function of the seed.
pub fn sample_batch(cfg: &TrainConfig, gen: &SeqGenerator, index: u64) -> Result<Vec<TrainExample>> {
    let mut rng = rng_for(cfg.seed, &[stream::BATCH, index]);
    (0..cfg.batch_size).map(|_| make_example(cfg, gen, &mut rng)).collect()
}

/// Fixed held-out set drawn from a stream disjoint from the training batches.
pub fn heldout_set(cfg: &TrainConfig, gen: &SeqGenerator) -> Result<Vec<TrainExample>> {
    let mut rng = rng_for(cfg.seed, &[stream::HELDOUT]);
    (0..cfg.heldout_size).map(|_| make_example(cfg, gen, &mut rng)).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// `(step, training batch loss)` with 1-based steps.
    pub curve: Vec<(usize, f64)>,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
}

/// Initializes a model from the seed and runs `cfg.steps` Adam steps.
pub fn train(cfg: &TrainConfig, gen: &SeqGenerator, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::init(cfg.model.clone(), &mut rng_for(cfg.seed, &[stream::INIT]))?;
    let heldout = heldout_set(cfg, gen)?;
    let initial_heldout_loss = batch_loss(&model, &heldout, exec)?;
    log::info!("initial held-out loss {initial_heldout_loss:.4}");
    let mut state = OptimizerState::new(&model.params);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = sample_batch(cfg, gen, step as u64)?;
        let (loss, grads) = loss_and_grads(&model, &batch, exec)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        adam_step(&mut model, &grads, &mut state, &cfg.adam)?;
        curve.push((step, loss));
        if step % 100 == 0 || step == cfg.steps {
            log::info!("step {step} loss {loss:.4}");
        } else {
            log::debug!("step {step} loss {loss:.4}");
        }
    }
    let final_heldout_loss = batch_loss(&model, &heldout, exec)?;
    log::info!("final held-out loss {final_heldout_loss:.4}");
    Ok(TrainOutcome {
        model,
        curve,
        initial_heldout_loss,
        final_heldout_loss,
    })
}
