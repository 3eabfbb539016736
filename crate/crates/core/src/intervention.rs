//! Layer-skip interventions and their propagated effects.
//!
//! Skipping block `s` at a set of positions replaces `h_{s+1}[t]` by `h_s[t]`
//! there. The effect of the skip is measured on held-out "future" positions:
//! tokens after the split for autoregressive models, and masked positions that
//! were not intervened on for masked models.
//!
//! Layer indices follow the blocks: block `l` maps `h_l` to `h_{l+1}`, and
//! [`EffectMatrix`] entry `(s, l)` is the effect of skipping block `s` on the
//! output of block `l`, defined for `l > s`.

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{mask_prompt, LayerSkip, Model, Objective, Prompt, ResidualTrace};
use crate::numerics::{l2_diff, l2_norm, softmax};
use crate::par::Exec;
use crate::rng::{rng_for, stream, Rng};

/// Bounds of the intervened fraction of masked and of non-masked positions.
pub const FRACTION_RANGE: (f64, f64) = (0.2, 0.8);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InterventionKind {
    /// Skip positions `0..=split`, evaluate `split+1..T`.
    ArSplit { split: usize },
    /// Skip the listed masked and non-masked positions, evaluate the other masked ones.
    MaskedSubset {
        masked: Vec<usize>,
        unmasked: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterventionSpec {
    pub source_layer: usize,
    pub kind: InterventionKind,
    /// Sorted positions whose block-`source_layer` update is suppressed.
    pub intervened: Vec<usize>,
    /// Sorted evaluation positions, disjoint from `intervened`.
    pub eval_positions: Vec<usize>,
}

impl InterventionSpec {
    /// Autoregressive split at `split`; requires `1 < split < T - 1`.
    pub fn ar_split(source_layer: usize, seq_len: usize, split: usize) -> Result<Self> {
        if seq_len < 4 {
            return Err(Error::Intervention(format!(
                "autoregressive split needs T >= 4, got {seq_len}"
            )));
        }
        if split <= 1 || split >= seq_len - 1 {
            return Err(Error::Intervention(format!(
                "split {split} outside (1, {})",
                seq_len - 1
            )));
        }
        Ok(Self {
            source_layer,
            kind: InterventionKind::ArSplit { split },
            intervened: (0..=split).collect(),
            eval_positions: (split + 1..seq_len).collect(),
        })
    }

    /// Masked-subset spec from explicit position sets.
    pub fn masked_subset(
        source_layer: usize,
        masked_positions: &[usize],
        intervened_masked: Vec<usize>,
        intervened_unmasked: Vec<usize>,
    ) -> Result<Self> {
        let mut masked = intervened_masked;
        let mut unmasked = intervened_unmasked;
        masked.sort_unstable();
        unmasked.sort_unstable();
        if let Some(p) = masked.iter().find(|p| !masked_positions.contains(p)) {
            return Err(Error::Intervention(format!("position {p} is not masked")));
        }
        if let Some(p) = unmasked.iter().find(|p| masked_positions.contains(p)) {
            return Err(Error::Intervention(format!("position {p} is masked")));
        }
        let eval_positions: Vec<usize> = masked_positions
            .iter()
            .copied()
            .filter(|p| masked.binary_search(p).is_err())
            .collect();
        if eval_positions.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        let mut intervened: Vec<usize> = masked.iter().chain(&unmasked).copied().collect();
        intervened.sort_unstable();
        intervened.dedup();
        Ok(Self {
            source_layer,
            kind: InterventionKind::MaskedSubset { masked, unmasked },
            intervened,
            eval_positions,
        })
    }

    /// The same positions applied to another source block.
    pub fn with_source(&self, source_layer: usize) -> Self {
        Self {
            source_layer,
            ..self.clone()
        }
    }

    pub fn skip(&self) -> LayerSkip {
        LayerSkip {
            layer: self.source_layer,
            positions: self.intervened.clone(),
        }
    }
}

/// `round(fraction * n)`, kept inside `[lo, hi]`.
fn subset_size(fraction: f64, n: usize, lo: usize, hi: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(lo, hi)
}

/// Masked-subset spec for given intervened fractions: `round(f * M)` masked
/// positions (at least one kept for evaluation) and `round(g * N)` of the
/// `N` non-masked ones.
pub fn sample_masked_with_fractions(
    source_layer: usize,
    seq_len: usize,
    masked_positions: &[usize],
    masked_fraction: f64,
    unmasked_fraction: f64,
    rng: &mut Rng,
) -> Result<InterventionSpec> {
    let m = masked_positions.len();
    if m < 2 {
        return Err(Error::Intervention(format!(
            "masked intervention needs at least 2 masked positions, got {m}"
        )));
    }
    if masked_positions.iter().any(|&p| p >= seq_len) {
        return Err(Error::Intervention("masked position outside the prompt".into()));
    }
    let unmasked_pool: Vec<usize> = (0..seq_len).filter(|p| !masked_positions.contains(p)).collect();
    let k = subset_size(masked_fraction, m, 1, m - 1);
    let j = subset_size(unmasked_fraction, unmasked_pool.len(), 0, unmasked_pool.len());
    let masked = index::sample(rng, m, k).iter().map(|i| masked_positions[i]).collect();
    let unmasked = index::sample(rng, unmasked_pool.len(), j)
        .iter()
        .map(|i| unmasked_pool[i])
        .collect();
    InterventionSpec::masked_subset(source_layer, masked_positions, masked, unmasked)
}

/// Draws a spec: autoregressive splits uniformly over `1 < t_s < T - 1`;
/// masked fractions uniformly in [`FRACTION_RANGE`].
pub fn sample_intervention(
    objective: Objective,
    source_layer: usize,
    seq_len: usize,
    masked_positions: &[usize],
    rng: &mut Rng,
) -> Result<InterventionSpec> {
    match objective {
        Objective::Autoregressive => {
            if seq_len < 4 {
                return Err(Error::Intervention(format!(
                    "autoregressive split needs T >= 4, got {seq_len}"
                )));
            }
            let split = rng.random_range(2..seq_len - 1);
            InterventionSpec::ar_split(source_layer, seq_len, split)
        }
        Objective::Masked => {
            let (lo, hi) = FRACTION_RANGE;
            let f = rng.random_range(lo..=hi);
            let g = rng.random_range(lo..=hi);
            sample_masked_with_fractions(source_layer, seq_len, masked_positions, f, g, rng)
        }
    }
}

fn check_spec(model: &Model, tokens: &[u32], spec: &InterventionSpec) -> Result<()> {
    if spec.source_layer >= model.num_layers() {
        return Err(Error::Intervention(format!(
            "source layer {} out of range for {} layers",
            spec.source_layer,
            model.num_layers()
        )));
    }
    let t = tokens.len();
    if spec.intervened.iter().chain(&spec.eval_positions).any(|&p| p >= t) {
        return Err(Error::Intervention(format!(
            "spec positions exceed prompt length {t}"
        )));
    }
    Ok(())
}

/// Forward pass with the spec's skip applied.
pub fn skipped_forward(model: &Model, tokens: &[u32], spec: &InterventionSpec) -> Result<ResidualTrace> {
    check_spec(model, tokens, spec)?;
    model.forward_skipping(tokens, &spec.skip())
}

fn check_pair(normal: &ResidualTrace, skipped: &ResidualTrace, eval: &[usize]) -> Result<()> {
    if normal.tokens != skipped.tokens || normal.states.len() != skipped.states.len() {
        return Err(Error::Intervention("traces come from different prompts or models".into()));
    }
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if eval.iter().any(|&p| p >= normal.seq_len()) {
        return Err(Error::Intervention("evaluation position outside the prompt".into()));
    }
    Ok(())
}

/// Per-layer maxima over evaluation positions, for states `h_{s+1} ..= h_L`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagatedEffects {
    pub source_layer: usize,
    /// `max_t ||h_l[t] - h'_l[t]||_2`, index `i` is state `s + 1 + i`.
    pub l2: Vec<f64>,
    /// `max_t ||h_l[t] - h'_l[t]||_2 / ||h_l[t]||_2` (zero where the norm is zero).
    pub rel_l2: Vec<f64>,
}

pub fn propagated_effects(
    normal: &ResidualTrace,
    skipped: &ResidualTrace,
    source_layer: usize,
    eval_positions: &[usize],
) -> Result<PropagatedEffects> {
    check_pair(normal, skipped, eval_positions)?;
    let l_max = normal.num_layers();
    if source_layer >= l_max {
        return Err(Error::Intervention(format!("source layer {source_layer} out of range")));
    }
    let mut l2 = Vec::with_capacity(l_max - source_layer);
    let mut rel_l2 = Vec::with_capacity(l_max - source_layer);
    for l in source_layer + 1..=l_max {
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for &t in eval_positions {
            let a = normal.states[l].row(t);
            let diff = l2_diff(a, skipped.states[l].row(t))?;
            let norm = l2_norm(a);
            max_abs = max_abs.max(diff);
            if norm > 0.0 {
                max_rel = max_rel.max(diff / norm);
            }
        }
        l2.push(max_abs);
        rel_l2.push(max_rel);
    }
    Ok(PropagatedEffects {
        source_layer,
        l2,
        rel_l2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OutputSpace {
    #[default]
    Probabilities,
    Logits,
}

/// `max_t ||y[t] - y'[t]||_2` over evaluation positions.
pub fn output_effect(
    normal: &ResidualTrace,
    skipped: &ResidualTrace,
    eval_positions: &[usize],
    space: OutputSpace,
) -> Result<f64> {
    check_pair(normal, skipped, eval_positions)?;
    let mut max = 0.0f64;
    for &t in eval_positions {
        let (a, b) = (normal.logits.row(t), skipped.logits.row(t));
        let d = match space {
            OutputSpace::Logits => l2_diff(a, b)?,
            OutputSpace::Probabilities => l2_diff(softmax(a)?.as_slice(), softmax(b)?.as_slice())?,
        };
        max = max.max(d);
    }
    Ok(max)
}

/// Effects of one spec, combining [`propagated_effects`] and both [`output_effect`] spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecEffects {
    pub propagated: PropagatedEffects,
    pub prob_l2: f64,
    pub logit_l2: f64,
}

pub fn spec_effects(model: &Model, normal: &ResidualTrace, spec: &InterventionSpec) -> Result<SpecEffects> {
    let skipped = skipped_forward(model, &normal.tokens, spec)?;
    let eval = &spec.eval_positions;
    Ok(SpecEffects {
        propagated: propagated_effects(normal, &skipped, spec.source_layer, eval)?,
        prob_l2: output_effect(normal, &skipped, eval, OutputSpace::Probabilities)?,
        logit_l2: output_effect(normal, &skipped, eval, OutputSpace::Logits)?,
    })
}

/// Max-aggregated layer-skip effects.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectMatrix {
    pub num_layers: usize,
    /// Row-major `L × L`; `None` where `l <= s`.
    pub propagated: Vec<Option<f64>>,
    pub propagated_rel: Vec<Option<f64>>,
    /// Per source layer.
    pub output_prob: Vec<f64>,
    pub output_logit: Vec<f64>,
    pub repeats: usize,
    pub prompts: usize,
}

impl EffectMatrix {
    /// All defined entries zero.
    pub fn new(num_layers: usize) -> Self {
        let cells = (0..num_layers * num_layers)
            .map(|i| (i % num_layers > i / num_layers).then_some(0.0))
            .collect::<Vec<_>>();
        Self {
            num_layers,
            propagated: cells.clone(),
            propagated_rel: cells,
            output_prob: vec![0.0; num_layers],
            output_logit: vec![0.0; num_layers],
            repeats: 0,
            prompts: 0,
        }
    }

    pub fn get(&self, source: usize, layer: usize) -> Option<f64> {
        self.propagated[source * self.num_layers + layer]
    }

    pub fn get_rel(&self, source: usize, layer: usize) -> Option<f64> {
        self.propagated_rel[source * self.num_layers + layer]
    }

    /// Folds in one spec's effects with elementwise max.
    pub fn absorb(&mut self, effects: &SpecEffects) {
        let s = effects.propagated.source_layer;
        let l_max = self.num_layers;
        // index 0 is the output of block s itself, which has no cell
        for (i, (&a, &r)) in effects
            .propagated
            .l2
            .iter()
            .zip(&effects.propagated.rel_l2)
            .enumerate()
            .skip(1)
        {
            let cell = s * l_max + s + i;
            for (slot, v) in [(&mut self.propagated[cell], a), (&mut self.propagated_rel[cell], r)] {
                if let Some(x) = slot {
                    *x = x.max(v);
                }
            }
        }
        self.output_prob[s] = self.output_prob[s].max(effects.prob_l2);
        self.output_logit[s] = self.output_logit[s].max(effects.logit_l2);
    }

    /// Elementwise max of two matrices over the same depth; run counts add up.
    pub fn merge_max(&mut self, other: &EffectMatrix) -> Result<()> {
        if other.num_layers != self.num_layers {
            return Err(Error::InvalidArgument("effect matrices of different depth".into()));
        }
        let max_cells = |a: &mut [Option<f64>], b: &[Option<f64>]| {
            for (x, y) in a.iter_mut().zip(b) {
                if let (Some(x), Some(y)) = (x.as_mut(), y) {
                    *x = x.max(*y);
                }
            }
        };
        max_cells(&mut self.propagated, &other.propagated);
        max_cells(&mut self.propagated_rel, &other.propagated_rel);
        for (x, y) in self.output_prob.iter_mut().zip(&other.output_prob) {
            *x = x.max(*y);
        }
        for (x, y) in self.output_logit.iter_mut().zip(&other.output_logit) {
            *x = x.max(*y);
        }
        self.prompts += other.prompts;
        self.repeats = self.repeats.max(other.repeats);
        Ok(())
    }

    /// Mean over the defined cells of row `source`, `None` if it has none.
    pub fn row_mean(&self, source: usize) -> Option<f64> {
        let row = &self.propagated[source * self.num_layers..(source + 1) * self.num_layers];
        let vals: Vec<f64> = row.iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkiplayerOptions {
    pub repeats: usize,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for SkiplayerOptions {
    fn default() -> Self {
        Self {
            repeats: 4,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

/// Prompt `p` as the experiment sees it: masked once (masked models only)
/// with stream `[MASK, p]`.
pub fn experiment_prompt(model: &Model, prompt: &Prompt, index: usize, opts: &SkiplayerOptions) -> Result<(Vec<u32>, Vec<usize>)> {
    match model.config.objective {
        Objective::Autoregressive => Ok((prompt.tokens.clone(), Vec::new())),
        Objective::Masked => {
            let mut rng = rng_for(opts.seed, &[stream::MASK, index as u64]);
            let masked = mask_prompt(prompt, opts.mask_rate, &mut rng)?;
            Ok((masked.prompt.tokens, masked.positions))
        }
    }
}

/// Runs every source layer on every prompt for `opts.repeats` specs.
///
/// Spec `r` of prompt `p` is drawn from stream `[INTERVENTION, p, r]` and
/// shared by all source layers, so rows of the matrix compare the same
/// position sets.
pub fn skiplayer_experiment(
    model: &Model,
    prompts: &[Prompt],
    opts: &SkiplayerOptions,
    exec: Exec,
) -> Result<EffectMatrix> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("skiplayer needs at least one prompt".into()));
    }
    if opts.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let l_max = model.num_layers();
    let objective = model.config.objective;
    let with_context = |p: usize, layer: usize| {
        move |e: Error| Error::InPrompt {
            prompt: p,
            layer,
            source: Box::new(e),
        }
    };
    // (normal trace, specs at source 0) per prompt
    let setups = exec.try_map_range(prompts.len(), |p| {
        let (tokens, masked) = experiment_prompt(model, &prompts[p], p, opts).map_err(with_context(p, 0))?;
        let normal = model.forward_tokens(&tokens).map_err(with_context(p, 0))?;
        let specs = (0..opts.repeats)
            .map(|r| {
                let mut rng = rng_for(opts.seed, &[stream::INTERVENTION, p as u64, r as u64]);
                sample_intervention(objective, 0, tokens.len(), &masked, &mut rng)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(with_context(p, 0))?;
        Ok::<_, Error>((normal, specs))
    })?;
    let tasks: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..l_max).map(move |s| (p, s)))
        .collect();
    let partials = exec.try_map(&tasks, |&(p, s)| {
        let (normal, specs) = &setups[p];
        let mut m = EffectMatrix::new(l_max);
        for spec in specs {
            let eff = spec_effects(model, normal, &spec.with_source(s)).map_err(with_context(p, s))?;
            m.absorb(&eff);
        }
        Ok::<_, Error>(m)
    })?;
    let mut out = EffectMatrix::new(l_max);
    for m in &partials {
        out.merge_max(m)?;
    }
    out.prompts = prompts.len();
    out.repeats = opts.repeats;
    Ok(out)
}
