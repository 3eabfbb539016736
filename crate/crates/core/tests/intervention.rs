mod support;

use depthprobe::intervention::{
    experiment_prompt, output_effect, propagated_effects, sample_intervention, skiplayer_experiment,
    skipped_forward, spec_effects, EffectMatrix, InterventionSpec, OutputSpace, SkiplayerOptions,
};
use depthprobe::rng::rng_for;
use depthprobe::{Exec, Model, Objective, Prompt};
use proptest::prelude::*;
use support::{max_abs_diff, toy_pair};

fn prompt(objective: Objective, residues: &str) -> Prompt {
    Prompt::from_residues("p", residues, objective).0
}

fn subsets(items: &[usize], sizes: std::ops::RangeInclusive<usize>) -> Vec<Vec<usize>> {
    (0u32..1 << items.len())
        .filter(|bits| sizes.contains(&(bits.count_ones() as usize)))
        .map(|bits| (0..items.len()).filter(|i| bits >> i & 1 == 1).map(|i| items[i]).collect())
        .collect()
}

#[test]
fn single_position_skip_matches_oracle_and_is_local() {
    let (m32, m64) = toy_pair(Objective::Masked, 21);
    let tokens = [4, 21, 7, 7, 13, 2];
    let spec = InterventionSpec::masked_subset(0, &[1, 4], vec![1], vec![]).unwrap();
    let normal = m32.forward_tokens(&tokens).unwrap();
    let skipped = skipped_forward(&m32, &tokens, &spec).unwrap();
    // at the source output only the skipped row moves, and it equals h_0 there
    assert_eq!(skipped.states[1].row(1), normal.states[0].row(1));
    for t in (0..tokens.len()).filter(|&t| t != 1) {
        assert_eq!(skipped.states[1].row(t), normal.states[1].row(t));
    }
    let oracle = support::forward(&m64, &tokens, Some((0, &[1])));
    for (l, st) in skipped.states.iter().enumerate() {
        assert!(max_abs_diff(st, &oracle.states[l]) < 1e-5);
    }
    // attention spreads the change to other rows one block later
    assert_ne!(skipped.states[2].row(4), normal.states[2].row(4));
}

#[test]
fn effects_match_diff_oracle() {
    for obj in [Objective::Masked, Objective::Autoregressive] {
        let (_, m64) = toy_pair(obj, 22);
        let m: Model<f32> = m64.cast();
        let m64: Model<f64> = m.cast();
        let p = prompt(obj, "MKVLAWQER");
        let (tokens, masked) = experiment_prompt(&m, &p, 0, &SkiplayerOptions { mask_rate: 0.4, ..Default::default() }).unwrap();
        for s in 0..2 {
            let spec = sample_intervention(obj, s, tokens.len(), &masked, &mut rng_for(s as u64, &[])).unwrap();
            let normal = m.forward_tokens(&tokens).unwrap();
            let skipped = skipped_forward(&m, &tokens, &spec).unwrap();
            let eff = propagated_effects(&normal, &skipped, s, &spec.eval_positions).unwrap();
            let a = support::forward(&m64, &tokens, None);
            let b = support::forward(&m64, &tokens, Some((s, &spec.intervened)));
            for (i, l) in (s + 1..=2).enumerate() {
                let expect = spec
                    .eval_positions
                    .iter()
                    .map(|&t| support::l2(&a.states[l][t], &b.states[l][t]))
                    .fold(0.0, f64::max);
                assert!((eff.l2[i] - expect).abs() < 1e-6, "{obj:?} s={s} l={l}");
            }
            let prob = output_effect(&normal, &skipped, &spec.eval_positions, OutputSpace::Probabilities).unwrap();
            let logit = output_effect(&normal, &skipped, &spec.eval_positions, OutputSpace::Logits).unwrap();
            let (mut ep, mut el) = (0.0f64, 0.0f64);
            for &t in &spec.eval_positions {
                ep = ep.max(support::l2(&support::softmax(&a.logits[t]), &support::softmax(&b.logits[t])));
                el = el.max(support::l2(&a.logits[t], &b.logits[t]));
            }
            assert!((prob - ep).abs() < 1e-6);
            assert!((logit - el).abs() < 1e-5 * el.max(1.0));
        }
    }
}

#[test]
fn experiment_max_equals_exhaustive_enumeration() {
    let (m, _) = toy_pair(Objective::Masked, 23);
    let p = prompt(Objective::Masked, "MKVLAW");
    let opts = SkiplayerOptions {
        repeats: 400,
        mask_rate: 0.5,
        seed: 3,
    };
    let got = skiplayer_experiment(&m, std::slice::from_ref(&p), &opts, Exec::Parallel).unwrap();

    let (tokens, masked) = experiment_prompt(&m, &p, 0, &opts).unwrap();
    assert_eq!(masked.len(), 3);
    let unmasked: Vec<usize> = (0..6).filter(|t| !masked.contains(t)).collect();
    let normal = m.forward_tokens(&tokens).unwrap();
    let mut expect = EffectMatrix::new(2);
    let mut specs = 0;
    for a in subsets(&masked, 1..=2) {
        for b in subsets(&unmasked, 1..=2) {
            specs += 1;
            for s in 0..2 {
                let spec = InterventionSpec::masked_subset(s, &masked, a.clone(), b.clone()).unwrap();
                let eff = spec_effects(&m, &normal, &spec).unwrap();
                // cell (s, l) holds the state after block l
                for l in s + 1..2 {
                    let cell = &mut expect.propagated[s * 2 + l];
                    *cell = Some(cell.unwrap().max(eff.propagated.l2[l - s]));
                }
                expect.output_prob[s] = expect.output_prob[s].max(eff.prob_l2);
                expect.output_logit[s] = expect.output_logit[s].max(eff.logit_l2);
            }
        }
    }
    assert_eq!(specs, 36);
    assert_eq!(got.propagated, expect.propagated);
    assert_eq!(got.output_prob, expect.output_prob);
    assert_eq!(got.output_logit, expect.output_logit);
}

#[test]
fn zero_update_source_gives_zero_row() {
    for obj in [Objective::Masked, Objective::Autoregressive] {
        let (mut m, _) = toy_pair(obj, 24);
        m.zero_block_updates(0);
        let prompts = vec![prompt(obj, "MKVLAWQERT"), prompt(obj, "ACDEFGHIK")];
        let opts = SkiplayerOptions { mask_rate: 0.3, ..Default::default() };
        let e = skiplayer_experiment(&m, &prompts, &opts, Exec::Sequential).unwrap();
        assert_eq!(e.get(0, 1), Some(0.0));
        assert_eq!(e.output_prob[0], 0.0);
        assert_eq!(e.output_logit[0], 0.0);
        // the last block only changes rows that are never evaluated
        assert_eq!(e.output_prob[1], 0.0);
        let (intact, _) = toy_pair(obj, 24);
        let e = skiplayer_experiment(&intact, &prompts, &opts, Exec::Sequential).unwrap();
        assert!(e.get(0, 1).unwrap() > 0.0);
    }
}

#[test]
fn last_source_row_is_undefined() {
    let (m, _) = toy_pair(Objective::Autoregressive, 25);
    let e = skiplayer_experiment(&m, &[prompt(Objective::Autoregressive, "MKVLAW")], &SkiplayerOptions::default(), Exec::Sequential).unwrap();
    assert_eq!(e.get(1, 0), None);
    assert_eq!(e.get(1, 1), None);
    assert_eq!(e.row_mean(1), None);
    assert!(e.get(0, 1).unwrap() >= 0.0);
}

#[test]
fn thread_policy_does_not_change_results() {
    let (m, _) = toy_pair(Objective::Masked, 26);
    let prompts: Vec<Prompt> = ["MKVLAWQERT", "ACDEFGHIKLM", "WWPPGGAACC"].iter().map(|s| prompt(Objective::Masked, s)).collect();
    let opts = SkiplayerOptions { seed: 7, mask_rate: 0.3, ..Default::default() };
    assert_eq!(
        skiplayer_experiment(&m, &prompts, &opts, Exec::Parallel).unwrap(),
        skiplayer_experiment(&m, &prompts, &opts, Exec::Sequential).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn skip_is_local_at_source(
        tokens in prop::collection::vec(0u32..25, 4..12),
        bits in any::<u16>(),
        s in 0usize..2,
        seed in 0u64..4,
        causal in any::<bool>(),
    ) {
        let obj = if causal { Objective::Autoregressive } else { Objective::Masked };
        let (m, _) = toy_pair(obj, seed);
        let positions: Vec<usize> = (0..tokens.len()).filter(|i| bits >> i & 1 == 1).collect();
        let skip = depthprobe::model::LayerSkip { layer: s, positions: positions.clone() };
        let normal = m.forward_tokens(&tokens).unwrap();
        let skipped = m.forward_skipping(&tokens, &skip).unwrap();
        for t in 0..tokens.len() {
            for l in 0..=s {
                prop_assert_eq!(normal.states[l].row(t), skipped.states[l].row(t));
            }
            if positions.contains(&t) {
                prop_assert_eq!(skipped.states[s + 1].row(t), normal.states[s].row(t));
            } else {
                prop_assert_eq!(skipped.states[s + 1].row(t), normal.states[s + 1].row(t));
            }
        }
    }

    #[test]
    fn ar_skip_leaves_earlier_outputs(
        residues in "[ACDEFGHIKLMNPQRSTVWY]{4,12}",
        s in 0usize..2,
        seed in 0u64..4,
        split_draw in any::<u64>(),
    ) {
        let (m, _) = toy_pair(Objective::Autoregressive, seed);
        let p = prompt(Objective::Autoregressive, &residues);
        let t_len = p.len();
        let split = 2 + (split_draw as usize) % (t_len - 3);
        // skipping positions after the split never touches positions up to it
        let late = depthprobe::model::LayerSkip { layer: s, positions: (split + 1..t_len).collect() };
        let normal = m.forward_tokens(&p.tokens).unwrap();
        let skipped = m.forward_skipping(&p.tokens, &late).unwrap();
        for t in 0..=split {
            prop_assert_eq!(normal.logits.row(t), skipped.logits.row(t));
        }
        let spec = InterventionSpec::ar_split(s, t_len, split).unwrap();
        prop_assert!(spec_effects(&m, &normal, &spec).unwrap().prob_l2 <= 2f64.sqrt());
    }
}
