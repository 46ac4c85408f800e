use dar_core::baselines::{grpo_advantage, rloo_advantage};
use dar_core::dar::{dar_train, mc_advantage, normalize_batch, sample_weights, Estimation, RegConfig, Sample};
use dar_core::envs::{make_task, TaskSpec};
use dar_core::oracle::{closed_form_optimal, dual_kl_objective};
use dar_core::policy::{interpolated_reference, kl_divergence, Distribution};
use proptest::prelude::*;

fn dist(n: usize) -> impl Strategy<Value = Distribution> {
    prop::collection::vec(-4.0f64..4.0, n).prop_map(|l| Distribution::from_logits(&l).unwrap())
}

fn instance() -> impl Strategy<Value = (Distribution, Distribution, Distribution, Vec<f64>)> {
    (2usize..=64).prop_flat_map(|n| (dist(n), dist(n), dist(n), prop::collection::vec(-2.0f64..2.0, n)))
}

proptest! {
    #[test]
    fn dual_kl_equals_single_kl_to_interpolation((p, pi0, pit, _) in instance(), alpha in 0.0f64..=1.0) {
        let r = interpolated_reference(&pi0, &pit, alpha).unwrap();
        let lhs = alpha * kl_divergence(&p, &pi0).unwrap() + (1.0 - alpha) * kl_divergence(&p, &pit).unwrap();
        let rhs = kl_divergence(&p, &r.dist).unwrap() - r.log_c;
        prop_assert!((lhs - rhs).abs() < 1e-10);
        prop_assert!(r.log_c <= 1e-15);
    }

    #[test]
    fn kl_is_nonnegative((p, q, _, _) in instance()) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-14);
    }

    #[test]
    fn softmax_sums_to_one(p in (1usize..=64).prop_flat_map(dist)) {
        let total: f64 = p.probs().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(p.is_strictly_positive());
    }

    #[test]
    fn closed_form_beats_perturbations(
        (q, pi0, pit, adv) in instance(),
        alpha in 0.0f64..=1.0,
        beta in 0.05f64..5.0,
    ) {
        let star = closed_form_optimal(&pi0, &pit, &adv, alpha, beta).unwrap();
        let best = dual_kl_objective(&star.dist, &pi0, &pit, &adv, alpha, beta).unwrap();
        prop_assert!(dual_kl_objective(&q, &pi0, &pit, &adv, alpha, beta).unwrap() <= best + 1e-10);
        // The optimum value is beta log Z.
        prop_assert!((best - beta * star.log_z).abs() < 1e-9 * (1.0 + best.abs()));
    }

    #[test]
    fn group_advantages_center(group in prop::collection::vec(-10.0f64..10.0, 1..16)) {
        prop_assert!(mc_advantage(&group).iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn normalized_batches_are_standard(raw in prop::collection::vec(-10.0f64..10.0, 2..64)) {
        let (out, _, sigma) = normalize_batch(&raw, 1e-8).unwrap();
        prop_assume!(sigma > 1e-6);
        let n = out.len() as f64;
        let m = out.iter().sum::<f64>() / n;
        let sd = (out.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n).sqrt();
        prop_assert!(m.abs() < 1e-12);
        prop_assert!((sd - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_stay_in_clip_range(
        rows in prop::collection::vec((-30.0f64..0.0, -30.0f64..0.0, -50.0f64..50.0), 1..32),
        alpha in 0.0f64..=1.0,
        beta in 0.01f64..2.0,
        w_clip in 1.0f64..100.0,
    ) {
        let samples: Vec<Sample> = rows
            .iter()
            .map(|&(a, b, _)| Sample { prompt: 0, response: 0, reward: 0.0, log_pi0: a, log_pit: b })
            .collect();
        let adv: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let w = sample_weights(&samples, &adv, alpha, beta, w_clip).unwrap();
        for (i, f) in w.w_final.iter().enumerate() {
            prop_assert!(*f > 0.0 && *f <= w_clip * (1.0 + 1e-15));
            let raw = (alpha * (samples[i].log_pi0 - samples[i].log_pit) + adv[i] / beta).exp();
            prop_assert!((f - raw.min(w_clip)).abs() <= 1e-9 * f.max(1e-300) || raw < 1e-300);
        }
    }

    #[test]
    fn rloo_is_rescaled_group_mean(group in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let k = group.len() as f64;
        let r = rloo_advantage(&group).unwrap();
        for (a, b) in r.iter().zip(mc_advantage(&group)) {
            prop_assert!((a - k / (k - 1.0) * b).abs() < 1e-12);
        }
    }

    #[test]
    fn grpo_is_affine_invariant(
        group in prop::collection::vec(-10.0f64..10.0, 2..16),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let base = grpo_advantage(&group).unwrap();
        let moved: Vec<f64> = group.iter().map(|r| scale * r + shift).collect();
        let sd = {
            let m = group.iter().sum::<f64>() / group.len() as f64;
            (group.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / group.len() as f64).sqrt()
        };
        prop_assume!(sd > 1e-6);
        for (a, b) in base.iter().zip(grpo_advantage(&moved).unwrap()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let task = make_task(&TaskSpec::hackable()).unwrap();
    let config = RegConfig { steps: 50, ..RegConfig::default() };
    let a = dar_train(&task, &config, 4).unwrap();
    let b = dar_train(&task, &config, 4).unwrap();
    assert_eq!(a.trace, b.trace);
    let exact = RegConfig { estimation: Estimation::Exact, ..config };
    assert_eq!(dar_train(&task, &exact, 1).unwrap().trace, dar_train(&task, &exact, 2).unwrap().trace);
}
