//! Layer-wise zero-shot mutation-effect scoring.
//!
//! Masked models use masked marginals: mask one mutated position of the
//! wildtype, read layer-`l` logits at that position through the model's own
//! readout and take `log p(mutant) - log p(wildtype)`, summed over the
//! mutations of a variant. Autoregressive models use the likelihood ratio
//! `sum_t log p_l(x_t | x_<t)` of mutant vs. wildtype.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{AssayError, Error, Result};
use crate::model::{Model, Objective};
use crate::numerics::{log_softmax, spearman, Real};
use crate::par::Exec;
use crate::tokens::{self, aa_index, encode_residues, is_amino_acid};

/// A substitution such as `A24G` (1-based position).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mutation {
    pub wildtype: char,
    pub position: usize,
    pub mutant: char,
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}{}", self.wildtype, self.position, self.mutant)
    }
}

impl FromStr for Mutation {
    type Err = Error;

    fn from_str(code: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed mutation code {code:?}"));
        let code = code.trim();
        let mut chars = code.chars();
        let wildtype = chars.next().ok_or_else(bad)?;
        let mutant = chars.next_back().ok_or_else(bad)?;
        let digits = chars.as_str();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let position: usize = digits.parse().map_err(|_| bad())?;
        let (wildtype, mutant) = (wildtype.to_ascii_uppercase(), mutant.to_ascii_uppercase());
        if position == 0 || !is_amino_acid(wildtype) || !is_amino_acid(mutant) {
            return Err(bad());
        }
        Ok(Self {
            wildtype,
            position,
            mutant,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    /// Original code as written in the assay, e.g. `A24G:L56W`.
    pub code: String,
    pub mutations: Vec<Mutation>,
    pub measurement: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assay {
    pub id: String,
    pub wildtype: String,
    pub variants: Vec<Variant>,
}

fn check_mutations(
    wildtype: &[u8],
    mutations: &[Mutation],
    row: usize,
    code: &str,
) -> std::result::Result<(), AssayError> {
    let mut seen = BTreeSet::new();
    for m in mutations {
        if m.position > wildtype.len() {
            return Err(AssayError::PositionOutOfRange {
                row,
                position: m.position,
                length: wildtype.len(),
            });
        }
        let actual = wildtype[m.position - 1] as char;
        if actual != m.wildtype {
            return Err(AssayError::WildtypeMismatch {
                row,
                code: code.to_string(),
                actual,
            });
        }
        if !seen.insert(m.position) {
            return Err(AssayError::DuplicatePosition {
                row,
                position: m.position,
            });
        }
    }
    Ok(())
}

fn check_wildtype(wildtype: &str) -> Result<()> {
    if wildtype.is_empty() || !wildtype.chars().all(is_amino_acid) {
        return Err(Error::InvalidArgument(
            "wildtype must be a non-empty sequence of standard residues".into(),
        ));
    }
    Ok(())
}

impl Assay {
    /// Validates every variant against the wildtype. Row numbers in errors are
    /// 1-based variant indices.
    pub fn new(id: impl Into<String>, wildtype: String, variants: Vec<Variant>) -> Result<Self> {
        check_wildtype(&wildtype)?;
        for (i, v) in variants.iter().enumerate() {
            check_mutations(wildtype.as_bytes(), &v.mutations, i + 1, &v.code)?;
            if !v.measurement.is_finite() {
                return Err(AssayError::BadMeasurement {
                    row: i + 1,
                    value: v.measurement.to_string(),
                }
                .into());
            }
        }
        Ok(Self {
            id: id.into(),
            wildtype,
            variants,
        })
    }

    /// `mutant,mutated_sequence,DMS_score` with exact (shortest round-trip) scores.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("mutant,mutated_sequence,DMS_score\n");
        for v in &self.variants {
            let seq = apply_mutations(&self.wildtype, &v.mutations)?;
            out.push_str(&format!("{},{},{}\n", v.code, seq, v.measurement));
        }
        Ok(out)
    }
}

/// Reads a ProteinGym-style CSV (`mutant`, `DMS_score`; other columns ignored).
pub fn parse_assay(id: impl Into<String>, csv_text: &str, wildtype: &str) -> Result<Assay> {
    let wildtype = wildtype.trim().to_ascii_uppercase();
    check_wildtype(&wildtype)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| AssayError::Csv(e.to_string()))?
        .clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(AssayError::MissingColumn(name))
    };
    let mutant_col = col("mutant")?;
    let score_col = col("DMS_score")?;

    let mut variants = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| AssayError::Csv(e.to_string()))?;
        let code = record.get(mutant_col).unwrap_or("").to_string();
        let malformed = || AssayError::MalformedCode {
            row,
            code: code.clone(),
        };
        if code.is_empty() {
            return Err(malformed().into());
        }
        let mutations = code
            .split(':')
            .map(|c| c.parse::<Mutation>().map_err(|_| malformed()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        check_mutations(wildtype.as_bytes(), &mutations, row, &code)?;
        let raw = record.get(score_col).unwrap_or("");
        let measurement: f64 = raw
            .parse()
            .ok()
            .filter(|x: &f64| x.is_finite())
            .ok_or_else(|| AssayError::BadMeasurement {
                row,
                value: raw.to_string(),
            })?;
        variants.push(Variant {
            code,
            mutations,
            measurement,
        });
    }
    Ok(Assay {
        id: id.into(),
        wildtype,
        variants,
    })
}

pub fn apply_mutations(wildtype: &str, mutations: &[Mutation]) -> Result<String> {
    let mut seq = wildtype.as_bytes().to_vec();
    let mut seen = BTreeSet::new();
    for m in mutations {
        if m.position == 0 || m.position > seq.len() {
            return Err(Error::InvalidArgument(format!(
                "{m}: position outside sequence of length {}",
                seq.len()
            )));
        }
        if !seen.insert(m.position) {
            return Err(Error::InvalidArgument(format!(
                "duplicate position {} in mutation set",
                m.position
            )));
        }
        if wildtype.as_bytes()[m.position - 1] as char != m.wildtype {
            return Err(Error::InvalidArgument(format!(
                "{m}: wildtype mismatch"
            )));
        }
        seq[m.position - 1] = m.mutant as u8;
    }
    Ok(String::from_utf8(seq).expect("ascii residues"))
}

fn check_layer<R: Real>(model: &Model<R>, layer: usize) -> Result<()> {
    if layer == 0 || layer > model.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} outside [1, {}]",
            model.num_layers()
        )));
    }
    Ok(())
}

fn require<R: Real>(model: &Model<R>, objective: Objective) -> Result<()> {
    if model.config.objective != objective {
        return Err(Error::ObjectiveMismatch(format!(
            "scorer needs a {objective:?} model, got {:?}",
            model.config.objective
        )));
    }
    Ok(())
}

fn residue_id(letter: char) -> usize {
    aa_index(letter as u8).expect("validated residue") as usize
}

/// Log-probabilities over the vocabulary at `position` (0-based) of the
/// wildtype with that position masked, for layers `1..=L`.
fn masked_position_logprobs<R: Real>(model: &Model<R>, wt_tokens: &[u32], position: usize) -> Result<Vec<Vec<f64>>> {
    let mut toks = wt_tokens.to_vec();
    toks[position] = tokens::MASK;
    let trace = model.forward_tokens(&toks)?;
    let l_max = model.num_layers();
    (1..=l_max)
        .map(|l| {
            if l == l_max {
                log_softmax(trace.logits.row(position))
            } else {
                log_softmax(&model.readout(trace.states[l].row(position)))
            }
        })
        .collect()
}

/// Masked-marginal score of a mutation set, read out at `layer` (1-based).
pub fn masked_marginal_score<R: Real>(
    model: &Model<R>,
    wildtype: &str,
    mutations: &[Mutation],
    layer: usize,
) -> Result<f64> {
    require(model, Objective::Masked)?;
    check_layer(model, layer)?;
    check_wildtype(wildtype)?;
    check_mutations(wildtype.as_bytes(), mutations, 0, "mutation set")?;
    let (wt_tokens, _) = encode_residues(wildtype);
    let mut total = 0.0;
    for m in mutations {
        let lp = masked_position_logprobs(model, &wt_tokens, m.position - 1)?;
        total += lp[layer - 1][residue_id(m.mutant)] - lp[layer - 1][residue_id(m.wildtype)];
    }
    Ok(total)
}

fn check_ar_tokens<R: Real>(model: &Model<R>, tokens: &[u32]) -> Result<()> {
    require(model, Objective::Autoregressive)?;
    if tokens.first() != Some(&tokens::BOS) {
        return Err(Error::InvalidArgument(
            "autoregressive scoring needs a BOS-prefixed sequence".into(),
        ));
    }
    if tokens.len() > model.config.max_seq_len {
        return Err(Error::PromptTooLong {
            len: tokens.len(),
            max: model.config.max_seq_len,
        });
    }
    Ok(())
}

/// `sum_{t>=1} log p_l(x_t | x_<t)` for every layer `l` in `1..=L`; BOS is
/// context only. With `length_normalize` the sums become per-token means.
pub fn ar_layer_logliks<R: Real>(model: &Model<R>, tokens: &[u32], length_normalize: bool) -> Result<Vec<f64>> {
    check_ar_tokens(model, tokens)?;
    let trace = model.forward_tokens(tokens)?;
    let l_max = model.num_layers();
    let targets = tokens.len() - 1;
    let mut out = Vec::with_capacity(l_max);
    for l in 1..=l_max {
        let mut sum = 0.0;
        for t in 1..tokens.len() {
            let lp = if l == l_max {
                log_softmax(trace.logits.row(t - 1))?
            } else {
                log_softmax(&model.readout(trace.states[l].row(t - 1)))?
            };
            sum += lp[tokens[t] as usize];
        }
        if length_normalize && targets > 0 {
            sum /= targets as f64;
        }
        out.push(sum);
    }
    Ok(out)
}

/// Autoregressive log-likelihood of a BOS-prefixed token sequence at `layer`.
pub fn ar_score<R: Real>(model: &Model<R>, tokens: &[u32], layer: usize, length_normalize: bool) -> Result<f64> {
    check_layer(model, layer)?;
    Ok(ar_layer_logliks(model, tokens, length_normalize)?[layer - 1])
}

fn ar_tokens(residues: &str) -> Vec<u32> {
    let (mut ids, _) = encode_residues(residues);
    ids.insert(0, tokens::BOS);
    ids
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScoreOptions {
    /// Autoregressive only: score by mean instead of summed log-likelihood.
    pub length_normalize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerScores {
    /// 1-based layer whose readout produced the scores.
    pub layer: usize,
    pub relative_depth: f64,
    /// One score per assay variant, in assay order.
    pub scores: Vec<f64>,
    /// `None` when the correlation is undefined (zero rank variance).
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub assay_id: String,
    pub num_layers: usize,
    pub objective: Objective,
    pub length_normalize: bool,
    pub codes: Vec<String>,
    pub measurements: Vec<f64>,
    pub layers: Vec<LayerScores>,
}

/// Scores every variant at every layer and correlates with the measurements.
pub fn layerwise_spearman<R: Real>(
    model: &Model<R>,
    assay: &Assay,
    opts: ScoreOptions,
    exec: Exec,
) -> Result<ScoreTable> {
    let l_max = model.num_layers();
    let n = assay.variants.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "assay {} has {n} variants; spearman needs at least 2",
            assay.id
        )));
    }
    // per_layer[l][v]
    let mut per_layer = vec![vec![0.0f64; n]; l_max];
    match model.config.objective {
        Objective::Masked => {
            let positions: Vec<usize> = assay
                .variants
                .iter()
                .flat_map(|v| v.mutations.iter().map(|m| m.position))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let (wt_tokens, _) = encode_residues(&assay.wildtype);
            if wt_tokens.len() > model.config.max_seq_len {
                return Err(Error::PromptTooLong {
                    len: wt_tokens.len(),
                    max: model.config.max_seq_len,
                });
            }
            let tables = exec.try_map_range(positions.len(), |i| {
                masked_position_logprobs(model, &wt_tokens, positions[i] - 1)
            })?;
            let lookup = |pos: usize| &tables[positions.binary_search(&pos).expect("collected")];
            for (vi, v) in assay.variants.iter().enumerate() {
                for (l, scores) in per_layer.iter_mut().enumerate() {
                    let mut total = 0.0;
                    for m in &v.mutations {
                        let lp = &lookup(m.position)[l];
                        total += lp[residue_id(m.mutant)] - lp[residue_id(m.wildtype)];
                    }
                    scores[vi] = total;
                }
            }
        }
        Objective::Autoregressive => {
            let norm = opts.length_normalize;
            let wt = ar_layer_logliks(model, &ar_tokens(&assay.wildtype), norm)?;
            let mutant_ll = exec.try_map_range(n, |vi| {
                let seq = apply_mutations(&assay.wildtype, &assay.variants[vi].mutations)?;
                ar_layer_logliks(model, &ar_tokens(&seq), norm)
            })?;
            for (vi, ll) in mutant_ll.iter().enumerate() {
                for l in 0..l_max {
                    per_layer[l][vi] = ll[l] - wt[l];
                }
            }
        }
    }
    let measurements: Vec<f64> = assay.variants.iter().map(|v| v.measurement).collect();
    let layers = per_layer
        .into_iter()
        .enumerate()
        .map(|(l, scores)| {
            let rho = spearman(&scores, &measurements)?;
            Ok(LayerScores {
                layer: l + 1,
                relative_depth: (l + 1) as f64 / l_max as f64,
                scores,
                spearman: rho,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable {
        assay_id: assay.id.clone(),
        num_layers: l_max,
        objective: model.config.objective,
        length_normalize: opts.length_normalize,
        codes: assay.variants.iter().map(|v| v.code.clone()).collect(),
        measurements,
        layers,
    })
}

/// Per-layer mean of the defined per-assay correlations.
pub fn mean_spearman(tables: &[ScoreTable]) -> Result<Vec<Option<f64>>> {
    let Some(first) = tables.first() else {
        return Ok(Vec::new());
    };
    if tables.iter().any(|t| t.num_layers != first.num_layers) {
        return Err(Error::InvalidArgument(
            "score tables come from models of different depth".into(),
        ));
    }
    Ok((0..first.num_layers)
        .map(|l| {
            let vals: Vec<f64> = tables.iter().filter_map(|t| t.layers[l].spearman).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect())
}
