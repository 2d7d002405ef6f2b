use student_rmt::ensemble::{CorrelationMatrix, EnsembleParams};
use student_rmt::kl::{kl_monte_carlo, zprime_gaussian, KlMode};
use student_rmt::SigmaLaw;

#[test]
fn gaussian_pair_divergence_matches_limit_up_to_finite_n() {
    let params = EnsembleParams::new(100, 300, SigmaLaw::DeltaGaussian).unwrap();
    let est = kl_monte_carlo(&params, &CorrelationMatrix::identity(100), KlMode::E1VsE2, 200, 4).unwrap();
    let limit = zprime_gaussian(3.0).unwrap();
    assert_eq!(limit, 0.25);
    // corrections are O(1/N) relative
    assert!((est.mean / limit - 1.0).abs() < 5.0 / 100.0, "{} vs {limit}", est.mean);
    assert!(est.mean > limit);
}

#[test]
fn student_pair_divergence_near_table_value() {
    let params = EnsembleParams::new(100, 200, SigmaLaw::student(4.0).unwrap()).unwrap();
    let est = kl_monte_carlo(&params, &CorrelationMatrix::identity(100), KlMode::E1VsE2, 200, 5).unwrap();
    assert!((est.mean / 0.568792 - 1.0).abs() < 0.05, "{} ± {}", est.mean, est.std_error);
}

#[test]
fn divergence_fluctuations_shrink_with_n() {
    let sd = |n: usize| {
        let params = EnsembleParams::new(n, 3 * n, SigmaLaw::DeltaGaussian).unwrap();
        kl_monte_carlo(&params, &CorrelationMatrix::identity(n), KlMode::EVsC, 100, 6).unwrap().std_dev
    };
    let (small, large) = (sd(20), sd(80));
    assert!(large < 0.6 * small, "{small} -> {large}");
}
