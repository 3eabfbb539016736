mod support;

use depthprobe::numerics::{log_softmax, spearman};
use depthprobe::rng::rng_for;
use depthprobe::scoring::{
    apply_mutations, ar_layer_logliks, ar_score, layerwise_spearman, masked_marginal_score, Assay, Mutation,
    ScoreOptions, Variant,
};
use depthprobe::tokens::{aa_index, encode_residues, BOS, MASK};
use depthprobe::{Exec, Model, Objective};
use rand::seq::SliceRandom;
use rand::Rng as _;
use support::toy_pair;

const WT: &str = "MKVLAW";

fn muts(codes: &str) -> Vec<Mutation> {
    codes.split(':').map(|c| c.parse().unwrap()).collect()
}

fn aa(c: char) -> usize {
    aa_index(c as u8).unwrap() as usize
}

/// Mask each mutated position in turn, run the oracle forward and look up
/// the two log-probabilities at that layer.
fn masked_oracle(m: &Model<f64>, wildtype: &str, mutations: &[Mutation], layer: usize) -> f64 {
    let (wt, _) = encode_residues(wildtype);
    mutations
        .iter()
        .map(|mu| {
            let mut toks = wt.clone();
            toks[mu.position - 1] = MASK;
            let tr = support::forward(m, &toks, None);
            let lp = support::log_softmax(&support::layer_logits(m, &tr, layer, mu.position - 1));
            lp[aa(mu.mutant)] - lp[aa(mu.wildtype)]
        })
        .sum()
}

/// `sum_t log p_l(x_t | x_<t)` by enumerating each conditional distribution.
fn ar_oracle(m: &Model<f64>, residues: &str, layer: usize) -> f64 {
    let (mut toks, _) = encode_residues(residues);
    toks.insert(0, BOS);
    let tr = support::forward(m, &toks, None);
    (1..toks.len())
        .map(|t| {
            let probs = support::softmax(&support::layer_logits(m, &tr, layer, t - 1));
            let z: f64 = probs.iter().sum();
            (probs[toks[t] as usize] / z).ln()
        })
        .sum()
}

#[test]
fn masked_marginals_match_brute_force() {
    for seed in [41, 42] {
        let (m32, m64) = toy_pair(Objective::Masked, seed);
        for codes in ["K2A", "M1W", "V3C:W6Y", "M1A:K2C:A5D"] {
            let ms = muts(codes);
            for layer in 1..=2 {
                let expect = masked_oracle(&m64, WT, &ms, layer);
                let got = masked_marginal_score(&m64, WT, &ms, layer).unwrap();
                assert!((got - expect).abs() < 1e-6, "{codes} layer {layer}: {got} vs {expect}");
                let got32 = masked_marginal_score(&m32, WT, &ms, layer).unwrap();
                assert!((got32 - expect).abs() < 1e-4, "f32 {codes} layer {layer}");
            }
        }
    }
}

#[test]
fn ar_scores_match_enumeration() {
    for seed in [43, 44] {
        let (m32, m64) = toy_pair(Objective::Autoregressive, seed);
        for seq in [WT, "ACDEFGH", "W"] {
            let (mut toks, _) = encode_residues(seq);
            toks.insert(0, BOS);
            let lls = ar_layer_logliks(&m64, &toks, false).unwrap();
            let normed = ar_layer_logliks(&m64, &toks, true).unwrap();
            for layer in 1..=2 {
                let expect = ar_oracle(&m64, seq, layer);
                assert!((lls[layer - 1] - expect).abs() < 1e-6, "{seq} layer {layer}");
                assert!((normed[layer - 1] - expect / seq.len() as f64).abs() < 1e-6);
                let got32 = ar_score(&m32, &toks, layer, false).unwrap();
                assert!((got32 - expect).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn multi_mutation_is_exact_sum_of_singles() {
    let (m, _) = toy_pair(Objective::Masked, 45);
    let ms = muts("M1A:V3C:W6Y");
    for layer in 1..=2 {
        let total = masked_marginal_score(&m, WT, &ms, layer).unwrap();
        let sum: f64 = ms
            .iter()
            .map(|mu| masked_marginal_score(&m, WT, std::slice::from_ref(mu), layer).unwrap())
            .sum();
        assert_eq!(total, sum);
    }
}

#[test]
fn last_layer_uses_native_logits() {
    let (m, _) = toy_pair(Objective::Masked, 46);
    let mu = muts("L4P");
    let (mut toks, _) = encode_residues(WT);
    toks[3] = MASK;
    let trace = m.forward_tokens(&toks).unwrap();
    let lp = log_softmax(trace.logits.row(3)).unwrap();
    assert_eq!(masked_marginal_score(&m, WT, &mu, 2).unwrap(), lp[aa('P')] - lp[aa('L')]);

    let (ar, _) = toy_pair(Objective::Autoregressive, 46);
    let (mut toks, _) = encode_residues(WT);
    toks.insert(0, BOS);
    let trace = ar.forward_tokens(&toks).unwrap();
    let mut native = 0.0;
    for t in 1..toks.len() {
        native += log_softmax(trace.logits.row(t - 1)).unwrap()[toks[t] as usize];
    }
    assert_eq!(ar_score(&ar, &toks, 2, false).unwrap(), native);
}

#[test]
fn table_scores_equal_direct_scores() {
    let (m, _) = toy_pair(Objective::Masked, 47);
    let codes = ["K2A", "V3C", "V3C:W6Y", "A5D", "M1W"];
    let mut rng = rng_for(47, &[]);
    let mut measured: Vec<f64> = (0..codes.len()).map(|i| i as f64).collect();
    measured.shuffle(&mut rng);
    let variants = codes
        .iter()
        .zip(&measured)
        .map(|(c, &y)| Variant {
            code: c.to_string(),
            mutations: muts(c),
            measurement: y,
        })
        .collect();
    let assay = Assay::new("toy", WT.to_string(), variants).unwrap();
    let table = layerwise_spearman(&m, &assay, ScoreOptions::default(), Exec::Parallel).unwrap();
    for ls in &table.layers {
        for (v, s) in assay.variants.iter().zip(&ls.scores) {
            assert_eq!(*s, masked_marginal_score(&m, WT, &v.mutations, ls.layer).unwrap());
        }
        let oracle = support::spearman(&ls.scores, &measured).unwrap();
        assert!((ls.spearman.unwrap() - oracle).abs() < 1e-12);
    }
    assert_eq!(apply_mutations(WT, &muts("V3C:W6Y")).unwrap(), "MKCLAY");
}

#[test]
fn ar_table_uses_likelihood_ratios() {
    let (m, _) = toy_pair(Objective::Autoregressive, 48);
    let variants = ["K2A", "V3C:W6Y", "A5D"]
        .iter()
        .enumerate()
        .map(|(i, c)| Variant {
            code: c.to_string(),
            mutations: muts(c),
            measurement: i as f64,
        })
        .collect();
    let assay = Assay::new("toy", WT.to_string(), variants).unwrap();
    let m64: Model<f64> = m.cast();
    let table = layerwise_spearman(&m64, &assay, ScoreOptions::default(), Exec::Sequential).unwrap();
    for ls in &table.layers {
        let wt = ar_oracle(&m64, WT, ls.layer);
        for (v, s) in assay.variants.iter().zip(&ls.scores) {
            let mutant = apply_mutations(WT, &v.mutations).unwrap();
            assert!((s - (ar_oracle(&m64, &mutant, ls.layer) - wt)).abs() < 1e-6);
        }
    }
}

#[test]
fn spearman_matches_rank_then_pearson_oracle() {
    let mut rng = rng_for(49, &[]);
    let mut checked = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        // few distinct values force ties
        let levels = rng.random_range(1..=6);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
        let got = spearman(&a, &b).unwrap();
        let expect = support::spearman(&a, &b);
        match (got, expect) {
            (Some(x), Some(y)) => {
                assert!((x - y).abs() < 1e-9, "{a:?} {b:?}");
                checked += 1;
            }
            (None, None) => {}
            other => panic!("definedness differs: {other:?}"),
        }
    }
    assert!(checked > 500);
    let up: Vec<f64> = (0..20).map(|i| (i * i) as f64).collect();
    let down: Vec<f64> = up.iter().map(|x| -x).collect();
    let lin: Vec<f64> = (0..20).map(f64::from).collect();
    assert_eq!(spearman(&up, &lin).unwrap(), Some(1.0));
    assert_eq!(spearman(&down, &lin).unwrap(), Some(-1.0));
}
