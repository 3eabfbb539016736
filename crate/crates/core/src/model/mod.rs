//! Pre-norm transformer with full residual-stream tracing.
//!
//! Block `l` maps `h_l` to `h_{l+1} = h_l + attn_l + mlp_l`, where both
//! updates read layer-normed inputs. Readout is `unembed(final_norm(h))`, and
//! the same readout path serves the model's own logits and every early exit.

mod checkpoint;
pub(crate) mod forward;
mod params;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use checkpoint::{from_bytes, load_model, save_model, to_bytes, MAGIC};
pub use forward::{LayerSkip, ResidualTrace};
pub use params::{LayerParams, Norm, Params};

use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::rng::Rng;
use crate::tokens;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Bidirectional attention, MASK-token prediction.
    Masked,
    /// Strict causal attention, next-token prediction.
    Autoregressive,
}

impl Objective {
    pub fn is_causal(self) -> bool {
        self == Objective::Autoregressive
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Objective::Masked),
            "autoregressive" | "ar" => Ok(Objective::Autoregressive),
            other => Err(Error::InvalidArgument(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positional {
    #[default]
    #[serde(rename = "learned-absolute")]
    LearnedAbsolute,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub objective: Objective,
    #[serde(default)]
    pub positional: Positional,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            vocab_size: tokens::MIN_VOCAB,
            max_seq_len: 128,
            objective: Objective::Masked,
            positional: Positional::LearnedAbsolute,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_layers < 1 {
            return bad("num_layers must be at least 1".into());
        }
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("d_ff and max_seq_len must be positive".into());
        }
        if self.vocab_size < tokens::MIN_VOCAB {
            return bad(format!(
                "vocab_size {} below minimum {}",
                self.vocab_size,
                tokens::MIN_VOCAB
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<R = f32> {
    pub config: ModelConfig,
    pub params: Params<R>,
}

impl<R: Real> Model<R> {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual output
    /// projections scaled by `1/sqrt(2L)`, zero biases, unit gains.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::zeros(&config);
        Ok(Self { config, params })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Zeroes every attention-output and MLP-output weight and bias of `layer`,
    /// which makes that block's update identically zero.
    pub fn zero_block_updates(&mut self, layer: usize) {
        let l = &mut self.params.layers[layer];
        for x in l
            .wo
            .data_mut()
            .iter_mut()
            .chain(l.bo.iter_mut())
            .chain(l.w_out.data_mut().iter_mut())
            .chain(l.b_out.iter_mut())
        {
            *x = R::zero();
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::PromptTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.config.vocab_size)
        {
            return Err(Error::TokenOutOfRange {
                position,
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

/// A tokenized input sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    /// FASTA record name or synthetic seed label.
    pub origin: String,
}

impl Prompt {
    pub fn new(origin: impl Into<String>, tokens: Vec<u32>) -> Self {
        Self {
            tokens,
            origin: origin.into(),
        }
    }

    /// Encodes residue letters; autoregressive prompts get a leading BOS.
    /// Also returns the number of letters mapped to UNK.
    pub fn from_residues(
        origin: impl Into<String>,
        residues: &str,
        objective: Objective,
    ) -> (Self, usize) {
        let (mut ids, unknown) = tokens::encode_residues(residues);
        if objective == Objective::Autoregressive {
            ids.insert(0, tokens::BOS);
        }
        (Self::new(origin, ids), unknown)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedPrompt {
    pub prompt: Prompt,
    /// Sorted masked positions.
    pub positions: Vec<usize>,
}

/// Number of positions masked at `rate` in a length-`len` prompt, `ceil(rate * len)`.
pub fn mask_count(rate: f64, len: usize) -> usize {
    // the epsilon keeps e.g. 0.15 * 100 from rounding up to 16
    let raw = rate * len as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(len)
}

/// Replaces `ceil(rate * T)` uniformly chosen positions with MASK.
pub fn mask_prompt(prompt: &Prompt, rate: f64, rng: &mut Rng) -> Result<MaskedPrompt> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask rate {rate} outside (0, 1)"
        )));
    }
    let len = prompt.len();
    if len < 2 {
        return Err(Error::InvalidArgument(format!(
            "prompt of length {len} is too short to mask"
        )));
    }
    let count = mask_count(rate, len);
    let mut positions = index::sample(rng, len, count).into_vec();
    positions.sort_unstable();
    let mut masked = prompt.clone();
    for &p in &positions {
        masked.tokens[p] = tokens::MASK;
    }
    Ok(MaskedPrompt {
        prompt: masked,
        positions,
    })
}
