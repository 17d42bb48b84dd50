use proptest::prelude::*;

use rankgrad::harness::{parse_config, serialize_config};
use rankgrad::model::{read_checkpoint, write_checkpoint, LambdaModel};
use rankgrad::offpolicy::{Algorithm, TrainRunConfig};
use rankgrad::policy::{greedy, pairwise_probs, softmax};
use rankgrad::theory::{exploration_efficiency_random, expected_exploration_efficiency, sl_sample_bound};

fn lambdas() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 2..8)
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(l in lambdas(), shift in -50.0f64..50.0) {
        let p = softmax(&l, 1.0);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = l.iter().map(|v| v + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted, 1.0)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_with_dummy_sums_to_one(l in lambdas()) {
        let p = pairwise_probs(&l, true).unwrap();
        prop_assert_eq!(p.len(), l.len() + 1);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_picks_the_largest_pairwise_probability(l in lambdas()) {
        let p = pairwise_probs(&l, false).unwrap();
        let g = greedy(&l);
        prop_assert!(p.iter().all(|&v| v <= p[g] + 1e-15));
    }

    #[test]
    fn exploration_tail_is_monotone(total in 1u64..30, frac in 0.0f64..1.0, k in 0u64..60) {
        let optimal = ((total as f64 * frac) as u64).max(1).min(total);
        let mut prev = 1.0;
        for i in 0..=optimal {
            let p = exploration_efficiency_random(total, optimal, k, i).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&p));
            prop_assert!(p <= prev + 1e-12);
            let more = exploration_efficiency_random(total, optimal, k + 1, i).unwrap();
            prop_assert!(more >= p - 1e-12);
            prev = p;
        }
        let e = expected_exploration_efficiency(total, optimal, k).unwrap();
        prop_assert!(e <= optimal as f64 + 1e-9 && e <= k as f64 + 1e-9);
    }

    #[test]
    fn sl_bound_shrinks_with_margin(g in 0.01f64..1.0, delta in 0.001f64..0.999, h in 1u64..100_000) {
        let a = sl_sample_bound(g, delta, h).unwrap();
        let b = sl_sample_bound(g * 1.5, delta, h).unwrap();
        prop_assert!(b < a);
    }

    #[test]
    fn checkpoints_round_trip(params in prop::collection::vec(-1e6f64..1e6, 12), squash in prop::option::of(0.01f64..5.0)) {
        let mut model = LambdaModel::tabular(4, 3);
        model.params_mut().copy_from_slice(&params);
        if let Some(c) = squash {
            model = model.with_squash(c);
        }
        let mut buf = Vec::new();
        write_checkpoint(&model, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back, model);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6f64..10.0, batch in 1usize..512, alg in 0usize..4) {
        let algorithm = [Algorithm::Rpg, Algorithm::Lpg, Algorithm::Epg, Algorithm::Reinforce][alg];
        let cfg = TrainRunConfig { seed, learning_rate: lr, batch_size: batch, ..TrainRunConfig::preset(algorithm) };
        let text = serialize_config(&cfg);
        prop_assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}
