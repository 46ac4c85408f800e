use dar_core::envs::TaskSpec;
use dar_harness::algo::Algorithm;
use dar_harness::config::ExperimentConfig;
use dar_harness::pareto::{fit_quadratic, ParetoPoint};
use dar_harness::stats::summarize;
use proptest::prelude::*;

proptest! {
    #[test]
    fn interval_is_scaled_sample_deviation(values in prop::collection::vec(-100.0f64..100.0, 1..20)) {
        let n = values.len() as f64;
        let s = summarize(&values);
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        prop_assert!((s.mean - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        prop_assert!((s.ci95 - 1.96 * sd / n.sqrt()).abs() <= 1e-12 * (1.0 + sd));
    }

    #[test]
    fn hash_ignores_output_dir_only(dir in "[a-z]{1,12}", beta in 0.01f64..1.0) {
        let base = ExperimentConfig::new(TaskSpec::hackable(), Algorithm::Dar);
        let mut moved = base.clone();
        moved.output_dir = Some(dir.into());
        prop_assert_eq!(base.hash(), moved.hash());
        let mut changed = base.clone();
        changed.reg.beta = beta;
        prop_assert_eq!(base.hash() == changed.hash(), beta == base.reg.beta);
    }

    #[test]
    fn exact_parabolas_are_recovered(
        c in (-1.0f64..1.0, -2.0f64..2.0, -3.0f64..-0.1),
        kls in prop::collection::btree_set(0u32..1000, 3..12),
    ) {
        let points: Vec<ParetoPoint> = kls
            .iter()
            .map(|&k| {
                let x = k as f64 / 500.0;
                ParetoPoint { beta: 0.1, final_reward: c.0 + c.1 * x + c.2 * x * x, kl_measure: x, seed: 0 }
            })
            .collect();
        let fit = fit_quadratic(&points).unwrap();
        for (got, want) in fit.coefficients.iter().zip([c.0, c.1, c.2]) {
            prop_assert!((got - want).abs() < 1e-8);
        }
        prop_assert!(fit.residuals.iter().all(|r| r.abs() < 1e-9));
        prop_assert!(fit.kl_at_95 >= fit.kl_range.0 && fit.kl_at_95 <= fit.peak_kl);
    }
}
