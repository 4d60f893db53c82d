use proptest::prelude::*;
use rlsd_core::advantage::{clip_weight, EPS_STD};
use rlsd_core::report::format_sig;
use rlsd_core::*;

fn normalized(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn row(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(normalized)
}

proptest! {
    #[test]
    fn group_advantages_are_standardized(rewards in prop::collection::vec(-5.0f64..5.0, 2..16)) {
        let adv = group_advantages(&rewards, EPS_STD).unwrap();
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        if adv.iter().any(|a| *a != 0.0) {
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_rewards_give_zero_advantage(r in -3.0f64..3.0, n in 2usize..12) {
        prop_assert!(group_advantages(&vec![r; n], EPS_STD).unwrap().iter().all(|a| *a == 0.0));
    }

    #[test]
    fn group_advantages_ignore_affine_reward_changes(
        rewards in prop::collection::vec(0.0f64..1.0, 2..10),
        scale in 0.5f64..4.0,
        shift in -2.0f64..2.0,
    ) {
        let a = group_advantages(&rewards, EPS_STD).unwrap();
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let b = group_advantages(&moved, EPS_STD).unwrap();
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn clipped_weight_stays_in_band(delta in -30.0f64..30.0, a in -3.0f64..3.0, eps in 0.01f64..0.9) {
        let w = evidence_weight(delta, a);
        let c = clip_weight(w, eps);
        prop_assert!(c >= 1.0 - eps && c <= 1.0 + eps);
        prop_assert!(w > 0.0);
    }

    #[test]
    fn token_advantage_keeps_sign_and_band(
        delta in -20.0f64..20.0,
        a in -3.0f64..3.0,
        eps in 0.01f64..0.9,
        lambda in 0.0f64..=1.0,
    ) {
        let w = evidence_weight(delta, a);
        let hat = rlsd_token_advantage(a, w, eps, lambda);
        prop_assert!(hat * a >= 0.0);
        prop_assert_eq!(hat == 0.0, a == 0.0);
        let lo = (1.0 - lambda) + lambda * (1.0 - eps);
        let hi = (1.0 - lambda) + lambda * (1.0 + eps);
        prop_assert!(hat.abs() >= a.abs() * lo - 1e-12);
        prop_assert!(hat.abs() <= a.abs() * hi + 1e-12);
        for form in [RlsdForm::Interpolated, RlsdForm::Clip, RlsdForm::MinClip] {
            let h = rlsd_token_advantage_with(form, a, w, eps, lambda);
            prop_assert!(h * a >= 0.0);
        }
    }

    #[test]
    fn zero_lambda_is_plain_advantage(delta in -20.0f64..20.0, a in -3.0f64..3.0, eps in 0.01f64..0.9) {
        prop_assert_eq!(rlsd_token_advantage(a, evidence_weight(delta, a), eps, 0.0), a);
    }

    #[test]
    fn kl_decomposition_holds(
        n in 2usize..10,
        n_r in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |k: usize| normalized((0..k).map(|_| rng.gen_range(0.01..1.0)).collect());
        let rows: Vec<Vec<f64>> = (0..n_r).map(|_| draw(n)).collect();
        let prior = draw(n_r);
        let student = draw(n);
        let rep = check_kl_decomposition(&rows, &prior, &student).unwrap();
        prop_assert!(rep.residual <= 1e-9);
        prop_assert!(rep.mutual_information >= -1e-15);
        prop_assert!(rep.l_opsd + 1e-12 >= rep.l_star);
    }

    #[test]
    fn scores_give_a_distribution(scores in prop::collection::vec(-30.0f64..30.0, 2..12), shift in -50.0f64..50.0) {
        let d = TokenDistribution::from_scores(&scores);
        prop_assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let moved: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let e = TokenDistribution::from_scores(&moved);
        for (a, b) in d.probs().iter().zip(e.probs()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(d.entropy() >= -1e-15);
    }

    #[test]
    fn kl_to_self_is_zero(p in row(6)) {
        let d = TokenDistribution::from_probs(p).unwrap();
        prop_assert!(d.kl_to(&d).abs() < 1e-15);
    }

    #[test]
    fn twelve_significant_digits(x in -1e9f64..1e9, e in -12i32..12) {
        let v = x * 10f64.powi(e);
        let back: f64 = format_sig(v).parse().unwrap();
        prop_assert!((back - v).abs() <= 1e-11 * v.abs().max(f64::MIN_POSITIVE));
    }

    #[test]
    fn suites_round_trip(count in 1usize..30, seed in any::<u64>(), hidden in any::<bool>()) {
        let family = if hidden { TaskFamily::HiddenRuleSequence } else { TaskFamily::ModularArithmeticChain };
        let suite = make_suite(&SuiteConfig::new(family, count, seed)).unwrap();
        prop_assert_eq!(parse_suite(&write_suite(&suite)).unwrap(), suite);
    }

    #[test]
    fn lambda_schedule_decays(step in 0usize..500, l0 in 0.0f64..=1.0, horizon in 1usize..200) {
        let l = lambda_schedule(step, l0, horizon);
        prop_assert!(l >= 0.0 && l <= l0);
        prop_assert!(lambda_schedule(step + 1, l0, horizon) <= l);
    }
}
