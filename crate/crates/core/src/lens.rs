//! LogitLens depth profiles.
//!
//! Each intermediate state `h_l` is read out through the model's own final
//! normalization and unembedding, and the implied distribution `p_l` is
//! compared with the final one by `KL(p_L || p_l)` (natural log) and by top-1
//! agreement. Profiles pool every evaluated position of every prompt, so the
//! profile of a union of prompt sets is the position-weighted mean of the
//! parts.

use crate::error::{Error, Result};
use crate::model::{mask_prompt, Model, Objective, Prompt, ResidualTrace};
use crate::numerics::{kl_divergence, softmax, ProbVector};
use crate::par::Exec;
use crate::rng::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalPolicy {
    /// Masked models: only the masked positions.
    MaskedPositions,
    /// Autoregressive models: every position that predicts a next token.
    PredictivePositions,
}

impl EvalPolicy {
    pub fn for_objective(objective: Objective) -> Self {
        match objective {
            Objective::Masked => Self::MaskedPositions,
            Objective::Autoregressive => Self::PredictivePositions,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MaskedPositions => "masked-positions",
            Self::PredictivePositions => "all-ar-positions",
        }
    }
}

/// `p_l` at each of `positions` for `l = 1..=L`, indexed `[l - 1][i]`. The
/// last layer reuses the trace's own logits.
pub fn lens_distributions(model: &Model, trace: &ResidualTrace, positions: &[usize]) -> Result<Vec<Vec<ProbVector>>> {
    let l_max = trace.num_layers();
    if l_max != model.num_layers() {
        return Err(Error::InvalidArgument("trace does not come from this model".into()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= trace.seq_len()) {
        return Err(Error::InvalidArgument(format!(
            "lens position {p} outside prompt of length {}",
            trace.seq_len()
        )));
    }
    (1..=l_max)
        .map(|l| {
            positions
                .iter()
                .map(|&t| {
                    if l == l_max {
                        softmax(trace.logits.row(t))
                    } else {
                        softmax(&model.readout(trace.states[l].row(t)))
                    }
                })
                .collect()
        })
        .collect()
}

/// Pooled per-layer sums; means are derived on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct LensProfile {
    pub num_layers: usize,
    pub policy: EvalPolicy,
    /// `sum KL(p_L || p_l)` per layer `l = 1..=L`.
    pub kl_sum: Vec<f64>,
    /// Positions where `argmax p_l == argmax p_L`.
    pub top1_hits: Vec<usize>,
    pub positions: usize,
    pub prompts: usize,
    /// KL terms where `p_l` was exactly zero and had to be floored.
    pub clamped: usize,
}

impl LensProfile {
    pub fn empty(num_layers: usize, policy: EvalPolicy) -> Self {
        Self {
            num_layers,
            policy,
            kl_sum: vec![0.0; num_layers],
            top1_hits: vec![0; num_layers],
            positions: 0,
            prompts: 0,
            clamped: 0,
        }
    }

    /// Mean KL at layer `layer` (1-based); zero positions give `NaN`.
    pub fn mean_kl(&self, layer: usize) -> f64 {
        self.kl_sum[layer - 1] / self.positions as f64
    }

    pub fn top1_overlap(&self, layer: usize) -> f64 {
        self.top1_hits[layer - 1] as f64 / self.positions as f64
    }

    pub fn relative_depth(&self, layer: usize) -> f64 {
        layer as f64 / self.num_layers as f64
    }

    pub fn merge(&mut self, other: &LensProfile) -> Result<()> {
        if other.num_layers != self.num_layers || other.policy != self.policy {
            return Err(Error::InvalidArgument("lens profiles are not comparable".into()));
        }
        for (a, b) in self.kl_sum.iter_mut().zip(&other.kl_sum) {
            *a += b;
        }
        for (a, b) in self.top1_hits.iter_mut().zip(&other.top1_hits) {
            *a += b;
        }
        self.positions += other.positions;
        self.prompts += other.prompts;
        self.clamped += other.clamped;
        Ok(())
    }
}

/// Profile of one trace at the given positions.
pub fn trace_profile(
    model: &Model,
    trace: &ResidualTrace,
    positions: &[usize],
    policy: EvalPolicy,
) -> Result<LensProfile> {
    let dists = lens_distributions(model, trace, positions)?;
    let l_max = model.num_layers();
    let mut prof = LensProfile::empty(l_max, policy);
    let finals = &dists[l_max - 1];
    for (l, layer) in dists.iter().enumerate() {
        for (p_l, p_final) in layer.iter().zip(finals) {
            let kl = kl_divergence(p_final, p_l)?;
            prof.kl_sum[l] += kl.value;
            prof.clamped += usize::from(kl.clamped);
            if p_l.argmax() == p_final.argmax() {
                prof.top1_hits[l] += 1;
            }
        }
    }
    prof.positions = positions.len();
    prof.prompts = 1;
    Ok(prof)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LensOptions {
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for LensOptions {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

/// Evaluated tokens and positions of prompt `index`. Masked prompts draw
/// their mask from stream `[LENS, index]`.
pub fn lens_prompt(model: &Model, prompt: &Prompt, index: usize, opts: &LensOptions) -> Result<(Vec<u32>, Vec<usize>)> {
    match model.config.objective {
        Objective::Masked => {
            let mut rng = rng_for(opts.seed, &[stream::LENS, index as u64]);
            let masked = mask_prompt(prompt, opts.mask_rate, &mut rng)?;
            Ok((masked.prompt.tokens, masked.positions))
        }
        Objective::Autoregressive => {
            let n = prompt.len().saturating_sub(1);
            Ok((prompt.tokens.clone(), (0..n).collect()))
        }
    }
}

/// Pooled lens profile over a prompt set.
pub fn lens_profile(model: &Model, prompts: &[Prompt], opts: &LensOptions, exec: Exec) -> Result<LensProfile> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("lens needs at least one prompt".into()));
    }
    let policy = EvalPolicy::for_objective(model.config.objective);
    let parts = exec.try_map_range(prompts.len(), |i| {
        let ctx = |e: Error| Error::InPrompt {
            prompt: i,
            layer: 0,
            source: Box::new(e),
        };
        let (tokens, positions) = lens_prompt(model, &prompts[i], i, opts).map_err(ctx)?;
        let trace = model.forward_tokens(&tokens).map_err(ctx)?;
        trace_profile(model, &trace, &positions, policy).map_err(ctx)
    })?;
    let mut out = LensProfile::empty(model.num_layers(), policy);
    for p in &parts {
        out.merge(p)?;
    }
    if out.positions == 0 {
        return Err(Error::EmptyEvalSet);
    }
    Ok(out)
}

/// Mean KL per layer `1..=L`.
pub fn lens_kl_profile(model: &Model, prompts: &[Prompt], opts: &LensOptions, exec: Exec) -> Result<Vec<f64>> {
    let p = lens_profile(model, prompts, opts, exec)?;
    Ok((1..=p.num_layers).map(|l| p.mean_kl(l)).collect())
}

/// Top-1 agreement with the final layer per layer `1..=L`.
pub fn lens_top1_profile(model: &Model, prompts: &[Prompt], opts: &LensOptions, exec: Exec) -> Result<Vec<f64>> {
    let p = lens_profile(model, prompts, opts, exec)?;
    Ok((1..=p.num_layers).map(|l| p.top1_overlap(l)).collect())
}
