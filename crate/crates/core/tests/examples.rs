//! Hand-worked instances with the expected values computed here.

use std::sync::Arc;

use dar_core::baselines::{bon_select, grpo_advantage, rloo_advantage};
use dar_core::dar::{dar_loss_and_grad, mc_advantage, normalize_batch, sample_weights, Sample};
use dar_core::oracle::{
    brute_force_optimal, closed_form_optimal, dual_kl_objective, finite_diff_grad, fixed_point_policy, relative_error,
    rlhf_objective, BRUTE_FORCE_BUDGET,
};
use dar_core::policy::{
    enumerate_responses, interpolated_reference, kl_divergence, Distribution, Parametrization, SequenceMode,
    TabularPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn d(p: &[f64]) -> Distribution {
    Distribution::from_probs(p.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn enumeration_counts_and_order() {
    assert_eq!(enumerate_responses(2, 1, SequenceMode::FixedLength).unwrap().len(), 2);
    let two = enumerate_responses(2, 2, SequenceMode::FixedLength).unwrap();
    assert_eq!(two.responses(), &[vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    assert_eq!(enumerate_responses(4, 3, SequenceMode::FixedLength).unwrap().len(), 4 * 4 * 4);
}

#[test]
fn log_prob_hand_values() {
    let space = Arc::new(enumerate_responses(4, 1, SequenceMode::FixedLength).unwrap());
    let uniform = TabularPolicy::uniform(space, 1, Parametrization::Flat).unwrap();
    assert!((uniform.log_prob(0, 2).unwrap() - 0.25f64.ln()).abs() < 1e-15);

    let space = Arc::new(enumerate_responses(2, 1, SequenceMode::FixedLength).unwrap());
    let p = TabularPolicy::from_flat_logits(space, vec![vec![0.0, 3f64.ln()]]).unwrap();
    assert!((p.log_prob(0, 1).unwrap() - 0.75f64.ln()).abs() < 1e-15);

    let space = Arc::new(enumerate_responses(2, 2, SequenceMode::FixedLength).unwrap());
    let ar = TabularPolicy::uniform(space, 1, Parametrization::Autoregressive).unwrap();
    for y in 0..4 {
        assert!((ar.log_prob(0, y).unwrap() - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn sampling_frequencies_and_point_mass() {
    let space = Arc::new(enumerate_responses(4, 1, SequenceMode::FixedLength).unwrap());
    let uniform = TabularPolicy::uniform(space.clone(), 1, Parametrization::Flat).unwrap();
    let n = 40_000;
    let draws = uniform.sample_k(0, n, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
    for y in 0..4 {
        let freq = draws.iter().filter(|&&d| d == y).count() as f64 / n as f64;
        assert!((freq - 0.25).abs() < 3.0 * sigma, "response {y}: {freq}");
    }
    let again = uniform.sample_k(0, n, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert_eq!(draws, again);

    let peaked = TabularPolicy::from_flat_logits(space, vec![vec![-20.0, 20.0, -20.0, -20.0]]).unwrap();
    let draws = peaked.sample_k(0, 1000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(draws.iter().all(|&y| y == 1));
}

#[test]
fn kl_hand_values() {
    let p = d(&[0.3, 0.7]);
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    assert!((kl_divergence(&d(&[1.0, 0.0]), &d(&[0.5, 0.5])).unwrap() - 2f64.ln()).abs() < 1e-15);
    let expect = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
    assert!((kl_divergence(&d(&[0.5, 0.5]), &d(&[0.75, 0.25])).unwrap() - expect).abs() < 1e-15);
    assert!((expect - 0.1438).abs() < 1e-4);
}

#[test]
fn interpolated_reference_hand_values() {
    let r = interpolated_reference(&d(&[0.8, 0.2]), &d(&[0.2, 0.8]), 0.5).unwrap();
    // sqrt(0.8 * 0.2) = 0.4 on both responses.
    assert!((r.log_c.exp() - 0.8).abs() < 1e-15);
    assert!(close(r.dist.probs(), &[0.5, 0.5], 1e-15));
    let q = d(&[0.1, 0.6, 0.3]);
    let same = interpolated_reference(&q, &q, 0.4).unwrap();
    assert!(close(same.dist.probs(), q.probs(), 1e-15) && same.log_c.abs() < 1e-15);
    let end = interpolated_reference(&d(&[0.8, 0.2]), &d(&[0.2, 0.8]), 1.0).unwrap();
    assert!(close(end.dist.probs(), &[0.8, 0.2], 0.0) && end.log_c == 0.0);
}

#[test]
fn objective_hand_values() {
    let pi = d(&[0.2, 0.5, 0.3]);
    assert!((rlhf_objective(&pi, &pi, &[2.0, 2.0, 2.0], 0.7).unwrap() - 2.0).abs() < 1e-15);
    let v = rlhf_objective(&d(&[1.0, 0.0]), &d(&[0.5, 0.5]), &[1.0, 0.0], 1.0).unwrap();
    assert!((v - (1.0 - 2f64.ln())).abs() < 1e-15);

    let (pi0, pit, adv) = (d(&[0.5, 0.2, 0.3]), d(&[0.1, 0.1, 0.8]), [0.4, -0.1, 0.2]);
    let single = rlhf_objective(&pi, &pi0, &adv, 0.3).unwrap();
    assert!((dual_kl_objective(&pi, &pi0, &pit, &adv, 1.0, 0.3).unwrap() - single).abs() < 1e-12);
    let on_policy = dual_kl_objective(&pi, &pi, &pi, &adv, 0.4, 0.3).unwrap();
    assert!((on_policy - (0.2 * 0.4 - 0.5 * 0.1 + 0.3 * 0.2)).abs() < 1e-15);
}

#[test]
fn closed_form_hand_values() {
    let u = d(&[0.5, 0.5]);
    // Unnormalized [0.5 * 3, 0.5].
    let s = closed_form_optimal(&u, &u, &[3f64.ln(), 0.0], 0.3, 1.0).unwrap();
    assert!(close(s.dist.probs(), &[0.75, 0.25], 1e-15));
    assert!((s.log_z - 2f64.ln()).abs() < 1e-15);

    let (pi0, pit) = (d(&[0.8, 0.2]), d(&[0.2, 0.8]));
    let zero = closed_form_optimal(&pi0, &pit, &[0.0, 0.0], 0.5, 0.7).unwrap();
    assert!(close(zero.dist.probs(), &[0.5, 0.5], 1e-15));
    assert!((zero.log_z - 0.8f64.ln()).abs() < 1e-15);

    let q = brute_force_optimal(&u, &u, &[3f64.ln(), 0.0], 0.3, 1.0, BRUTE_FORCE_BUDGET).unwrap();
    assert!(close(q.probs(), &[0.75, 0.25], 1e-4));
    let q = brute_force_optimal(&pi0, &pit, &[0.0, 0.0], 0.5, 0.7, BRUTE_FORCE_BUDGET).unwrap();
    assert!(close(q.probs(), &[0.5, 0.5], 1e-4));
}

#[test]
fn fixed_point_hand_values() {
    let (alpha, beta) = (0.2, 0.5);
    let u = d(&[0.5, 0.5]);
    let p = fixed_point_policy(&u, &[alpha * beta * 9f64.ln(), 0.0], alpha, beta).unwrap();
    assert!(close(p.probs(), &[0.9, 0.1], 1e-14));
    let pi0 = d(&[0.1, 0.2, 0.7]);
    assert!(close(fixed_point_policy(&pi0, &[0.0; 3], alpha, beta).unwrap().probs(), pi0.probs(), 1e-15));
}

#[test]
fn finite_difference_hand_values() {
    let g = finite_diff_grad(|t| t.iter().map(|x| x * x).sum(), &[1.0, -2.0], 1e-5).unwrap();
    assert!(close(&g, &[2.0, -4.0], 1e-8));
    assert_eq!(finite_diff_grad(|_| 3.0, &[0.3, 0.1], 1e-5).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn advantage_and_normalization_hand_values() {
    assert_eq!(mc_advantage(&[1.0, 2.0, 3.0, 4.0]), vec![-1.5, -0.5, 0.5, 1.5]);
    assert_eq!(mc_advantage(&[0.7; 4]), vec![0.0; 4]);
    assert_eq!(normalize_batch(&[-1.0, 1.0], 1e-8).unwrap().0, vec![-1.0, 1.0]);
    assert_eq!(normalize_batch(&[0.0; 3], 1e-8).unwrap().0, vec![0.0; 3]);
    let s = 1.25f64.sqrt();
    let expect: Vec<f64> = [-1.5, -0.5, 0.5, 1.5].iter().map(|a| a / s).collect();
    let got = normalize_batch(&[-1.5, -0.5, 0.5, 1.5], 1e-8).unwrap().0;
    assert!(close(&got, &expect, 1e-15));
    assert!(close(&got, &[-1.3416, -0.4472, 0.4472, 1.3416], 1e-4));
}

#[test]
fn group_baseline_hand_values() {
    assert_eq!(rloo_advantage(&[1.0, 3.0]).unwrap(), vec![-2.0, 2.0]);
    assert_eq!(rloo_advantage(&[5.0; 3]).unwrap(), vec![0.0; 3]);
    let g = grpo_advantage(&[1.0, 2.0, 3.0]).unwrap();
    let sd = (2.0f64 / 3.0).sqrt();
    assert!(close(&g, &[-1.0 / sd, 0.0, 1.0 / sd], 1e-15));
    assert!(close(&g, &[-1.2247, 0.0, 1.2247], 1e-4));
    assert!(rloo_advantage(&[1.0]).is_err());
}

fn sample(log_pi0: f64, log_pit: f64) -> Sample {
    Sample { prompt: 0, response: 0, reward: 0.0, log_pi0, log_pit }
}

#[test]
fn weight_hand_values() {
    let samples = [sample(-1.0, -2.0), sample(-0.5, -0.5), sample(0.5f64.ln(), 0.5f64.ln())];
    let w = sample_weights(&samples, &[0.3, -0.2, 0.0], 0.0, 0.1, 20.0).unwrap();
    assert_eq!(w.w_reg, vec![1.0; 3]);
    let neutral = sample_weights(&samples[2..], &[0.0], 0.4, 0.1, 20.0).unwrap();
    assert_eq!(neutral.w_final, vec![1.0]);
    // w_reg = 1, w_adv = 50.
    let big = sample_weights(&[sample(-1.0, -1.0)], &[50f64.ln() * 0.1], 0.3, 0.1, 20.0).unwrap();
    assert!((big.w_reg[0] * big.w_adv[0] - 50.0).abs() < 1e-12);
    assert!((big.w_final[0] - 20.0).abs() < 1e-12 && big.clipped[0]);
}

#[test]
fn loss_reductions_and_gradient() {
    let space = Arc::new(enumerate_responses(3, 1, SequenceMode::FixedLength).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = TabularPolicy::from_flat_logits(space, vec![logits.clone()]).unwrap();
    let pairs = [(0, 0), (0, 2), (0, 2), (0, 1)];

    let (loss, grad) = dar_loss_and_grad(&p, &pairs, &[0.0; 4]).unwrap();
    assert!(loss == 0.0 && grad.iter().all(|g| *g == 0.0));

    let (nll, _) = dar_loss_and_grad(&p, &pairs, &[1.0; 4]).unwrap();
    let expect = -pairs.iter().map(|&(x, y)| p.log_prob(x, y).unwrap()).sum::<f64>() / 4.0;
    assert!((nll - expect).abs() < 1e-14);

    let w = [0.5, 2.0, 1.3, 0.1];
    let (_, grad) = dar_loss_and_grad(&p, &pairs, &w).unwrap();
    let mut probe = p.clone();
    let fd = finite_diff_grad(
        |t| {
            probe.set_logits(t).unwrap();
            dar_loss_and_grad(&probe, &pairs, &w).unwrap().0
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(relative_error(&grad, &fd, 1e-8) < 1e-5);
}

#[test]
fn best_of_n_prefers_lowest_index_on_ties() {
    assert_eq!(bon_select(&[4, 2, 7], &[0.5, 0.9, 0.9]), 1);
    assert_eq!(bon_select(&[7, 2, 4], &[0.9, 0.9, 0.1]), 1);
    assert_eq!(bon_select(&[3], &[-1.0]), 0);
}
