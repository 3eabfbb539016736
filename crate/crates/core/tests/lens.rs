mod support;

use depthprobe::lens::{lens_distributions, lens_profile, lens_prompt, EvalPolicy, LensOptions};
use depthprobe::numerics::softmax;
use depthprobe::{Exec, Objective, Prompt};
use proptest::prelude::*;
use support::toy_pair;

fn prompts(objective: Objective) -> Vec<Prompt> {
    ["MKVLAWQERT", "ACDEFGHIKLMN", "WWPPGGAACCS"]
        .iter()
        .enumerate()
        .map(|(i, s)| Prompt::from_residues(format!("p{i}"), s, objective).0)
        .collect()
}

#[test]
fn distributions_match_oracle() {
    for obj in [Objective::Masked, Objective::Autoregressive] {
        let (m32, m64) = toy_pair(obj, 31);
        let p = &prompts(obj)[0];
        let trace = m32.forward(p).unwrap();
        let oracle = support::forward(&m64, &p.tokens, None);
        let positions: Vec<usize> = (0..p.len()).collect();
        let dists = lens_distributions(&m32, &trace, &positions).unwrap();
        for l in 1..=2 {
            for &t in &positions {
                let expect = support::softmax(&support::layer_logits(&m64, &oracle, l, t));
                for (a, b) in dists[l - 1][t].as_slice().iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-6, "{obj:?} l={l} t={t}");
                }
            }
        }
        // the final layer is the model's own distribution, bit for bit
        for &t in &positions {
            assert_eq!(dists[1][t], softmax(trace.logits.row(t)).unwrap());
        }
    }
}

#[test]
fn single_prompt_profile_matches_direct_averaging() {
    for obj in [Objective::Masked, Objective::Autoregressive] {
        let (m32, m64) = toy_pair(obj, 32);
        let ps = &prompts(obj)[1..2];
        let opts = LensOptions { mask_rate: 0.3, seed: 5 };
        let prof = lens_profile(&m32, ps, &opts, Exec::Sequential).unwrap();
        let (tokens, positions) = lens_prompt(&m32, &ps[0], 0, &opts).unwrap();
        assert_eq!(prof.positions, positions.len());
        assert_eq!(prof.policy, EvalPolicy::for_objective(obj));
        let oracle = support::forward(&m64, &tokens, None);
        for l in 1..=2 {
            let (mut kl, mut hits) = (0.0, 0usize);
            for &t in &positions {
                let p_final = support::softmax(&oracle.logits[t]);
                let p_l = support::softmax(&support::layer_logits(&m64, &oracle, l, t));
                kl += support::kl(&p_final, &p_l);
                hits += usize::from(support::argmax(&p_l) == support::argmax(&p_final));
            }
            let n = positions.len() as f64;
            assert!((prof.mean_kl(l) - kl / n).abs() < 1e-6, "{obj:?} l={l}");
            assert_eq!(prof.top1_overlap(l), hits as f64 / n, "{obj:?} l={l}");
        }
    }
}

#[test]
fn ar_policy_covers_every_predictive_position() {
    let (m, _) = toy_pair(Objective::Autoregressive, 33);
    let p = &prompts(Objective::Autoregressive)[0];
    let (_, positions) = lens_prompt(&m, p, 0, &LensOptions::default()).unwrap();
    assert_eq!(positions, (0..p.len() - 1).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn final_layer_is_exact_on_any_model(
        residues in prop::collection::vec("[ACDEFGHIKLMNPQRSTVWY]{4,14}", 1..4),
        seed in 0u64..1000,
        causal in any::<bool>(),
    ) {
        let obj = if causal { Objective::Autoregressive } else { Objective::Masked };
        let (m, _) = toy_pair(obj, seed);
        let ps: Vec<Prompt> = residues.iter().map(|s| Prompt::from_residues("p", s, obj).0).collect();
        let prof = lens_profile(&m, &ps, &LensOptions { mask_rate: 0.3, seed }, Exec::Parallel).unwrap();
        prop_assert!(prof.mean_kl(2).abs() <= 1e-9);
        prop_assert_eq!(prof.top1_overlap(2), 1.0);
        for l in 1..=2 {
            prop_assert!(prof.mean_kl(l) >= -1e-9);
            prop_assert!((0.0..=1.0).contains(&prof.top1_overlap(l)));
        }
    }
}
