//! Synthetic protein-like sequences from a hidden Markov model.
//!
//! The HMM gives an exact log-likelihood, so a synthetic assay's "measured"
//! fitness of a variant is its true log-likelihood ratio to the wildtype.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scoring::{Assay, Mutation, Variant};
use crate::tokens::{aa_index, AMINO_ACIDS, NUM_AMINO_ACIDS};

const ROW_TOLERANCE: f64 = 1e-9;
/// Uniform mass mixed into every Dirichlet draw so no log-probability is `-inf`.
const UNIFORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqGenerator {
    pub initial: Vec<f64>,
    /// `transition[i][j] = P(state j | state i)`.
    pub transition: Vec<Vec<f64>>,
    /// `emission[i][a] = P(residue a | state i)` over [`AMINO_ACIDS`].
    pub emission: Vec<Vec<f64>>,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Config(format!("{what}: negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::Config(format!("{what}: row sums to {s}")));
    }
    Ok(())
}

impl SeqGenerator {
    pub fn new(
        initial: Vec<f64>,
        transition: Vec<Vec<f64>>,
        emission: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let k = initial.len();
        if k == 0 || transition.len() != k || emission.len() != k {
            return Err(Error::Config("inconsistent number of hidden states".into()));
        }
        check_row(&initial, "initial")?;
        for (i, row) in transition.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Config(format!("transition row {i} has wrong length")));
            }
            check_row(row, &format!("transition row {i}"))?;
        }
        for (i, row) in emission.iter().enumerate() {
            if row.len() != NUM_AMINO_ACIDS {
                return Err(Error::Config(format!("emission row {i} has wrong length")));
            }
            check_row(row, &format!("emission row {i}"))?;
        }
        Ok(Self {
            initial,
            transition,
            emission,
        })
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }
}

fn dirichlet_row(len: usize, gamma: &Gamma<f64>, rng: &mut Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let uniform = 1.0 / len as f64;
    let mut row: Vec<f64> = if total > 0.0 && total.is_finite() {
        draws
            .iter()
            .map(|g| (1.0 - UNIFORM_FLOOR) * g / total + UNIFORM_FLOOR * uniform)
            .collect()
    } else {
        vec![uniform; len]
    };
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
    row
}

/// Draws every stochastic row from a symmetric Dirichlet with the given concentration.
pub fn build_generator(k: usize, concentration: f64, rng: &mut Rng) -> Result<SeqGenerator> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "generator needs at least 2 hidden states, got {k}"
        )));
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|_| {
        Error::InvalidArgument(format!("concentration {concentration} must be positive"))
    })?;
    let initial = dirichlet_row(k, &gamma, rng);
    let transition = (0..k).map(|_| dirichlet_row(k, &gamma, rng)).collect();
    let emission = (0..k)
        .map(|_| dirichlet_row(NUM_AMINO_ACIDS, &gamma, rng))
        .collect();
    SeqGenerator::new(initial, transition, emission)
}

fn categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Residue sequence and the hidden path that produced it.
pub fn sample_with_states(gen: &SeqGenerator, length: usize, rng: &mut Rng) -> (String, Vec<usize>) {
    let mut seq = String::with_capacity(length);
    let mut states = Vec::with_capacity(length);
    let mut state = categorical(&gen.initial, rng);
    for i in 0..length {
        if i > 0 {
            state = categorical(&gen.transition[state], rng);
        }
        states.push(state);
        seq.push(AMINO_ACIDS[categorical(&gen.emission[state], rng)] as char);
    }
    (seq, states)
}

pub fn sample_sequence(gen: &SeqGenerator, length: usize, rng: &mut Rng) -> String {
    sample_with_states(gen, length, rng).0
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Exact `log P(sequence)` by the forward algorithm in log space.
pub fn true_loglik(gen: &SeqGenerator, sequence: &str) -> Result<f64> {
    let obs = sequence
        .bytes()
        .map(|b| {
            aa_index(b).map(|i| i as usize).ok_or_else(|| {
                Error::InvalidArgument(format!("letter {:?} outside alphabet", b as char))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if obs.is_empty() {
        return Ok(0.0);
    }
    let k = gen.num_states();
    let ln = |p: f64| p.ln();
    let mut alpha: Vec<f64> = (0..k)
        .map(|s| ln(gen.initial[s]) + ln(gen.emission[s][obs[0]]))
        .collect();
    let mut terms = vec![0.0; k];
    for &o in &obs[1..] {
        let next: Vec<f64> = (0..k)
            .map(|j| {
                for (i, t) in terms.iter_mut().enumerate() {
                    *t = alpha[i] + ln(gen.transition[i][j]);
                }
                log_sum_exp(&terms) + ln(gen.emission[j][o])
            })
            .collect();
        alpha = next;
    }
    Ok(log_sum_exp(&alpha))
}

/// Every single substitution of `wildtype`, measured as the exact
/// log-likelihood ratio plus `N(0, noise_sigma)` noise.
pub fn make_assay(
    gen: &SeqGenerator,
    id: impl Into<String>,
    wildtype: &str,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Assay> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma {noise_sigma} must be finite and non-negative"
        )));
    }
    let base = true_loglik(gen, wildtype)?;
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let mut variants = Vec::with_capacity(19 * wildtype.len());
    let mut mutated = wildtype.as_bytes().to_vec();
    for (i, wt) in wildtype.bytes().enumerate() {
        for &aa in AMINO_ACIDS.iter().filter(|&&a| a != wt) {
            mutated[i] = aa;
            let seq = std::str::from_utf8(&mutated).expect("ascii");
            let delta = true_loglik(gen, seq)? - base;
            let eps = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            let m = Mutation {
                wildtype: wt as char,
                position: i + 1,
                mutant: aa as char,
            };
            variants.push(Variant {
                code: m.to_string(),
                mutations: vec![m],
                measurement: delta + eps,
            });
        }
        mutated[i] = wt;
    }
    Assay::new(id, wildtype.to_string(), variants)
}
