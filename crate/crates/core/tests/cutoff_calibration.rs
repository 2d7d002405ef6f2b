use student_rmt::dos::DosSolver;
use student_rmt::empirical::{significance_cutoffs, CutoffModel};
use student_rmt::ensemble::{sample_spectra, CorrelationMatrix, EnsembleParams};
use student_rmt::SigmaLaw;

// The median cutoff should bound the largest sampled eigenvalue half the time.
#[test]
fn median_cutoff_bounds_half_of_sampled_spectra() {
    let (n, t, mu) = (100, 200, 6.0);
    let law = SigmaLaw::student(mu).unwrap();
    let solver = DosSolver::new(law, t as f64 / n as f64).unwrap();
    let cut = significance_cutoffs(&solver, n, &[0.5], CutoffModel::Poisson).unwrap()[0].lambda;
    let params = EnsembleParams::new(n, t, law).unwrap();
    let spectra = sample_spectra(&params, &CorrelationMatrix::identity(n), 10_000, 17).unwrap();
    let below = spectra.iter().filter(|s| *s.values().last().unwrap() < cut).count();
    let fraction = below as f64 / spectra.len() as f64;
    println!("lambda_0.5 = {cut:.4}, fraction below = {fraction:.4}");
    assert!((fraction - 0.5).abs() <= 0.05, "fraction {fraction} at cutoff {cut}");
}
