//! Maximum-likelihood correlation estimator for Student returns: the fixed
//! point of `M ↦ (N+μ)/T Σ_t r rᵀ / (μ + rᵀM⁻¹r)`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rayon::prelude::*;
use serde::Serialize;

use crate::dos::{mp_cdf, mp_density};
use crate::ensemble::{
    correlation_factor, eigenvalues, pearson_estimator, sample_rng, sample_with_factor, spectrum_histogram,
    sup_cdf_distance, CorrelationMatrix, EnsembleParams, ReturnsMatrix, Spectrum,
};
use crate::error::{invalid, Error, Result};

/// Condition number above which an iterate is regularized.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Rescale the fixed point so that `trace = N`.
    TraceN,
    /// Return the fixed point as found.
    None,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MLEConfig {
    pub mu: f64,
    /// Relative Frobenius change between iterates that ends the iteration.
    pub tol: f64,
    pub max_iter: usize,
    pub normalization: Normalization,
    /// Drop `μ` against `rᵀM⁻¹r`: the large-`N` map `N/T Σ r rᵀ/(rᵀM⁻¹r)`,
    /// whose fixed point is defined up to scale (iterates are kept at trace `N`).
    pub large_n_form: bool,
}

impl MLEConfig {
    pub fn new(mu: f64) -> Result<Self> {
        let cfg = Self {
            mu,
            tol: 1e-10,
            max_iter: 2000,
            normalization: Normalization::TraceN,
            large_n_form: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || self.mu.is_nan() {
            return Err(invalid(format!("tail exponent must be > 0 (got {})", self.mu)));
        }
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tolerance must be > 0 (got {})", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// Fixed point together with the iteration record.
#[derive(Debug, Clone)]
pub struct MleSolution {
    pub estimator: CorrelationMatrix,
    pub iterations: usize,
    /// Relative Frobenius change at each step.
    pub residuals: Vec<f64>,
    /// Steps after the third whose residual exceeded the previous one.
    pub monotonicity_violations: Vec<usize>,
    /// Step at which damping by 1/2 was switched on.
    pub damping_from: Option<usize>,
    /// Steps at which a ridge was added to an ill-conditioned iterate.
    pub ridge_steps: Vec<usize>,
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
}

/// Factors `m`, adding `1e-10·trace/N·I` first when it is singular or its
/// condition number (estimated from the Cholesky diagonal) exceeds [`MAX_CONDITION`].
fn factor(m: &DMatrix<f64>) -> Result<(Factor, bool)> {
    let well_conditioned = |c: &Cholesky<f64, Dyn>| {
        let d = c.l_dirty().diagonal();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), x| (lo.min(*x), hi.max(*x)));
        lo > 0.0 && (hi / lo).powi(2) <= MAX_CONDITION
    };
    if let Some(c) = Cholesky::new(m.clone()) {
        if well_conditioned(&c) {
            return Ok((Factor { chol: c }, false));
        }
    }
    let n = m.nrows();
    let eps = 1e-10 * m.trace() / n as f64;
    let ridged = m + DMatrix::identity(n, n) * eps;
    Cholesky::new(ridged)
        .map(|c| (Factor { chol: c }, true))
        .ok_or_else(|| Error::Singular("iterate is not positive definite even after regularization".into()))
}

/// Quadratic forms `r_tᵀ M⁻¹ r_t` for every column.
fn quadratic_forms(f: &Factor, r: &DMatrix<f64>) -> Vec<f64> {
    let z = f.chol.l().solve_lower_triangular(r).expect("Cholesky factor is invertible");
    z.column_iter().map(|c| c.norm_squared()).collect()
}

fn weighted_scatter(r: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let mut scaled = r.clone();
    for (mut col, w) in scaled.column_iter_mut().zip(weights) {
        col *= *w;
    }
    let m = &scaled * r.transpose();
    (&m + m.transpose()) * 0.5
}

fn trace_normalized(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let tr = m.trace();
    m * (n / tr)
}

/// The factor `s` for which `M s` satisfies the trace of the likelihood
/// equation, `T⁻¹ Σ_t (N+μ) q_t/(μ s + q_t) = N`, with `q_t = r_tᵀM⁻¹r_t`.
fn trace_scale(q: &[f64], n: f64, mu: f64) -> f64 {
    let t = q.len() as f64;
    let g = |ln_s: f64| {
        let s = ln_s.exp();
        let (mut v, mut d) = (0.0, 0.0);
        for &qt in q {
            let den = mu * s + qt;
            v += (n + mu) * qt / den;
            d -= (n + mu) * qt * mu * s / (den * den);
        }
        (v / t - n, d / t)
    };
    // g is decreasing in ln s, from μ at s = 0 to -N at s = ∞
    let mut x = 0.0;
    for _ in 0..100 {
        let (v, d) = g(x);
        if v.abs() <= 1e-15 * n || d == 0.0 {
            break;
        }
        let step = (v / d).clamp(-2.0, 2.0);
        x -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    x.exp()
}

/// Solves the likelihood equation by fixed-point iteration from the
/// trace-normalized Pearson estimator. Each step first rescales the
/// iterate to satisfy the traced equation exactly, which leaves the fixed
/// point unchanged. Damping by 1/2 is engaged the first time the residual grows.
pub fn mle_solve(r: &ReturnsMatrix, cfg: &MLEConfig) -> Result<MleSolution> {
    cfg.validate()?;
    let (n, t) = (r.n(), r.t());
    if t <= n {
        return Err(invalid(format!("need T > N for invertible iterates (N={n}, T={t})")));
    }
    let values = r.values();
    let nf = n as f64;
    let mut m = trace_normalized(pearson_estimator(r).into_matrix());
    let mut residuals = Vec::new();
    let mut violations = Vec::new();
    let mut ridge_steps = Vec::new();
    let mut damping_from = None;
    for it in 1..=cfg.max_iter {
        let (f, ridged) = factor(&m)?;
        if ridged {
            ridge_steps.push(it);
        }
        let mut q = quadratic_forms(&f, values);
        let mut scale_change = 0.0;
        let weights: Vec<f64> = if cfg.large_n_form {
            q.iter().map(|qt| nf / (t as f64 * qt)).collect()
        } else {
            // The overall scale relaxes at rate N/(N+μ); solve for it exactly first.
            let s = trace_scale(&q, nf, cfg.mu);
            scale_change = (s - 1.0).abs();
            m *= s;
            q.iter_mut().for_each(|x| *x /= s);
            q.iter().map(|qt| (nf + cfg.mu) / (t as f64 * (cfg.mu + qt))).collect()
        };
        let mut next = weighted_scatter(values, &weights);
        if cfg.large_n_form {
            next = trace_normalized(next);
        }
        if damping_from.is_some() {
            next = (&next + &m) * 0.5;
        }
        let res = (&next - &m).norm() / m.norm();
        if !res.is_finite() {
            return Err(Error::Singular(format!("iterate {it} is not finite")));
        }
        if let Some(&prev) = residuals.last() {
            if res > prev {
                if it > 3 {
                    violations.push(it);
                }
                if damping_from.is_none() {
                    damping_from = Some(it);
                }
            }
        }
        residuals.push(res);
        m = next;
        if res <= cfg.tol && scale_change <= cfg.tol {
            let m = match cfg.normalization {
                Normalization::TraceN => trace_normalized(m),
                Normalization::None => m,
            };
            return Ok(MleSolution {
                estimator: CorrelationMatrix::new(m)?,
                iterations: it,
                residuals,
                monotonicity_violations: violations,
                damping_from,
                ridge_steps,
            });
        }
    }
    Err(Error::FixedPoint {
        iterations: cfg.max_iter,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

/// `d_t = N⁻¹ η_tᵀ E*⁻¹ η_t` with `η_t = r_t/σ_t`; requires the
/// volatilities attached to `r`.
pub fn mle_denominator_check(r: &ReturnsMatrix, estar: &CorrelationMatrix) -> Result<Vec<f64>> {
    let sigma = r
        .sigma()
        .ok_or_else(|| invalid("returns carry no volatilities, so η cannot be recovered"))?;
    if estar.dim() != r.n() {
        return Err(Error::Dimension(format!("E* is {0}x{0}, N={1}", estar.dim(), r.n())));
    }
    let chol = Cholesky::new(estar.matrix().clone()).ok_or_else(|| Error::Singular("E* is not positive definite".into()))?;
    let mut eta = r.values().clone();
    for (mut col, s) in eta.column_iter_mut().zip(sigma) {
        col /= *s;
    }
    let n = r.n() as f64;
    Ok(quadratic_forms(&Factor { chol }, &eta).into_iter().map(|q| q / n).collect())
}

/// Pooled spectra of MLE estimates against the Marčenko-Pastur law.
#[derive(Debug, Clone, Serialize)]
pub struct MleSpectrumReport {
    pub n: usize,
    pub t: usize,
    pub samples: usize,
    pub bin_edges: Vec<f64>,
    pub histogram: Vec<f64>,
    /// Marčenko-Pastur density at the bin centers.
    pub mp_density: Vec<f64>,
    /// `sup |F_emp - F_MP|` over the pooled eigenvalues.
    pub sup_distance: f64,
    /// The same distance for the Pearson estimators of the same samples.
    pub pearson_sup_distance: f64,
    pub max_eigenvalue: f64,
    pub pearson_max_eigenvalue: f64,
    pub monotonicity_violations: usize,
    pub ridge_events: usize,
}

/// Draws `samples` return matrices with identity true correlation, solves
/// the likelihood equation for each and compares the pooled spectrum with
/// Marčenko-Pastur at `q = N/T`.
pub fn mle_spectrum_vs_mp(
    params: &EnsembleParams,
    cfg: &MLEConfig,
    samples: usize,
    seed: u64,
    bins: usize,
) -> Result<MleSpectrumReport> {
    params.require_invertible()?;
    if samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let l = correlation_factor(&CorrelationMatrix::identity(params.n))?;
    let per_sample: Vec<(Spectrum, Spectrum, usize, usize)> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = sample_rng(seed, k as u64);
            let r = sample_with_factor(params, &l, &mut rng);
            let sol = mle_solve(&r, cfg)?;
            let pearson = CorrelationMatrix::new(trace_normalized(pearson_estimator(&r).into_matrix()))?;
            Ok((
                eigenvalues(&sol.estimator)?,
                eigenvalues(&pearson)?,
                sol.monotonicity_violations.len(),
                sol.ridge_steps.len(),
            ))
        })
        .collect::<Result<_>>()?;
    let q = params.q();
    let pooled: Vec<f64> = per_sample.iter().flat_map(|s| s.0.values().iter().copied()).collect();
    let pooled_pearson: Vec<f64> = per_sample.iter().flat_map(|s| s.1.values().iter().copied()).collect();
    let cdf = |x: f64| mp_cdf(x, q).expect("q in (0, 1)");
    let (lo, hi) = crate::dos::mp_edges(q)?;
    let top = pooled.iter().copied().fold(hi, f64::max);
    let bins = bins.max(1);
    let bin_edges: Vec<f64> = (0..=bins)
        .map(|i| 0.5 * lo + (1.1 * top - 0.5 * lo) * i as f64 / bins as f64)
        .collect();
    let spectra: Vec<Spectrum> = per_sample.iter().map(|s| s.0.clone()).collect();
    let histogram = spectrum_histogram(&spectra, &bin_edges)?;
    let mp = bin_edges
        .windows(2)
        .map(|w| mp_density(0.5 * (w[0] + w[1]), q))
        .collect::<Result<Vec<_>>>()?;
    Ok(MleSpectrumReport {
        n: params.n,
        t: params.t,
        samples,
        bin_edges,
        histogram,
        mp_density: mp,
        sup_distance: sup_cdf_distance(&pooled, cdf),
        pearson_sup_distance: sup_cdf_distance(&pooled_pearson, cdf),
        max_eigenvalue: pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        pearson_max_eigenvalue: pooled_pearson.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        monotonicity_violations: per_sample.iter().map(|s| s.2).sum(),
        ridge_events: per_sample.iter().map(|s| s.3).sum(),
    })
}

/// Spectra of `samples` MLE estimates, sample `k` drawn from stream `k` of
/// `seed` with true correlation `true_c`.
pub fn sample_mle_spectra(
    params: &EnsembleParams,
    true_c: &CorrelationMatrix,
    cfg: &MLEConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<Spectrum>> {
    params.require_invertible()?;
    let l = correlation_factor(true_c)?;
    if l.nrows() != params.n {
        return Err(Error::Dimension(format!("true correlation is {0}x{0}, N={1}", l.nrows(), params.n)));
    }
    (0..samples)
        .into_par_iter()
        .map(|k| {
            let r = sample_with_factor(params, &l, &mut sample_rng(seed, k as u64));
            eigenvalues(&mle_solve(&r, cfg)?.estimator)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::law::SigmaLaw;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn student_returns(n: usize, t: usize, mu: f64, seed: u64) -> ReturnsMatrix {
        let p = EnsembleParams::new(n, t, SigmaLaw::student(mu).unwrap()).unwrap();
        crate::ensemble::sample_returns(&p, &CorrelationMatrix::identity(n), &mut sample_rng(seed, 0)).unwrap()
    }

    fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    // The fixed point differs from Pearson at first order in N/μ, so the
    // gap shrinks like 1/μ rather than vanishing at any finite μ.
    #[test]
    fn gaussian_limit_is_pearson() {
        for seed in 0..5 {
            let p = EnsembleParams::new(8, 40, SigmaLaw::DeltaGaussian).unwrap();
            let c = CorrelationMatrix::exponential(8, 0.5).unwrap();
            let r = crate::ensemble::sample_returns(&p, &c, &mut sample_rng(seed, 0)).unwrap();
            let pearson = trace_normalized(pearson_estimator(&r).into_matrix());
            let gap = |mu: f64| rel_frobenius(mle_solve(&r, &MLEConfig::new(mu).unwrap()).unwrap().estimator.matrix(), &pearson);
            let (g6, g8) = (gap(1e6), gap(1e8));
            assert!(g6 < 1e-5, "{g6}");
            assert!(g8 < 1e-7, "{g8}");
            assert!((g6 / g8 / 100.0 - 1.0).abs() < 0.05, "{g6} {g8}");
        }
    }

    #[test]
    fn fixed_point_satisfies_equation() {
        let r = student_returns(5, 30, 4.0, 3);
        let mut cfg = MLEConfig::new(4.0).unwrap();
        cfg.normalization = Normalization::None;
        let sol = mle_solve(&r, &cfg).unwrap();
        let m = sol.estimator.matrix();
        let inv = m.clone().try_inverse().unwrap();
        let mut rhs = DMatrix::zeros(5, 5);
        for col in r.values().column_iter() {
            let q = (col.transpose() * &inv * col)[(0, 0)];
            rhs += col * col.transpose() * ((5.0 + 4.0) / (30.0 * (4.0 + q)));
        }
        assert!(rel_frobenius(&rhs, m) < 1e-9);
    }

    #[test]
    fn multi_start_reaches_same_fixed_point() {
        let r = student_returns(2, 8, 4.0, 11);
        let mut cfg = MLEConfig::new(4.0).unwrap();
        cfg.normalization = Normalization::None;
        cfg.tol = 1e-13;
        let reference = mle_solve(&r, &cfg).unwrap().estimator.into_matrix();
        // independent damped iteration from random positive definite starts
        let mut rng = sample_rng(99, 0);
        for _ in 0..5 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut m = &a * a.transpose() + DMatrix::identity(2, 2) * 0.1;
            for _ in 0..20_000 {
                let inv = m.clone().try_inverse().unwrap();
                let mut next = DMatrix::zeros(2, 2);
                for col in r.values().column_iter() {
                    let q = (col.transpose() * &inv * col)[(0, 0)];
                    next += col * col.transpose() * (6.0 / (8.0 * (4.0 + q)));
                }
                m = (&next + &m) * 0.5;
            }
            assert!(rel_frobenius(&m, &reference) < 1e-9, "{m} vs {reference}");
        }
    }

    #[test]
    fn residuals_shrink() {
        let r = student_returns(30, 90, 4.0, 5);
        let sol = mle_solve(&r, &MLEConfig::new(4.0).unwrap()).unwrap();
        assert!(sol.monotonicity_violations.is_empty(), "{:?}", sol.residuals);
        assert!(sol.ridge_steps.is_empty());
        assert!((sol.estimator.trace() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let r = student_returns(10, 30, 4.0, 6);
        let mut cfg = MLEConfig::new(4.0).unwrap();
        cfg.max_iter = 2;
        match mle_solve(&r, &cfg) {
            Err(Error::FixedPoint { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0 && residual.is_finite());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_short_samples_and_bad_config() {
        let r = student_returns(10, 10, 4.0, 7);
        assert!(mle_solve(&r, &MLEConfig::new(4.0).unwrap()).is_err());
        assert!(MLEConfig::new(-1.0).is_err());
        let mut cfg = MLEConfig::new(4.0).unwrap();
        cfg.tol = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn large_n_form_is_scale_free() {
        let r = student_returns(20, 60, 4.0, 8);
        let mut cfg = MLEConfig::new(4.0).unwrap();
        cfg.large_n_form = true;
        let a = mle_solve(&r, &cfg).unwrap();
        let b = mle_solve(&student_returns(20, 60, 4.0, 8), &MLEConfig::new(4.0).unwrap()).unwrap();
        // both estimate the same shape; they differ at order μ/N
        assert!(rel_frobenius(a.estimator.matrix(), b.estimator.matrix()) < 0.2);
    }

    #[test]
    fn denominator_identity_with_unit_eta() {
        let mut rng = sample_rng(1, 0);
        let (n, t) = (6, 10);
        let mut v = DMatrix::from_fn(n, t, |_, _| rng.sample::<f64, _>(StandardNormal));
        for mut c in v.column_iter_mut() {
            let norm = c.norm() / (n as f64).sqrt();
            c /= norm;
        }
        let r = ReturnsMatrix::new(v).unwrap().with_sigma(vec![1.0; t]).unwrap();
        let d = mle_denominator_check(&r, &CorrelationMatrix::identity(n)).unwrap();
        assert!(d.iter().all(|x| (x - 1.0).abs() < 1e-14));
    }

    #[test]
    fn denominator_mean_near_one() {
        let r = student_returns(150, 375, 4.0, 9);
        let sol = mle_solve(&r, &MLEConfig::new(4.0).unwrap()).unwrap();
        let d = mle_denominator_check(&r, &sol.estimator).unwrap();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean d_t = {mean}");
    }

    #[test]
    fn denominator_needs_sigma() {
        let r = ReturnsMatrix::new(DMatrix::identity(2, 3)).unwrap();
        assert!(mle_denominator_check(&r, &CorrelationMatrix::identity(2)).is_err());
    }

    #[test]
    fn gaussian_returns_match_pearson_control() {
        let p = EnsembleParams::new(20, 50, SigmaLaw::DeltaGaussian).unwrap();
        let rep = mle_spectrum_vs_mp(&p, &MLEConfig::new(1e6).unwrap(), 20, 4, 20).unwrap();
        assert!((rep.sup_distance - rep.pearson_sup_distance).abs() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn scale_equivariance(seed in any::<u64>(), c in 1e-3f64..1e3) {
            let r = student_returns(6, 24, 4.0, seed);
            let scaled = ReturnsMatrix::new(r.values() * c).unwrap();
            let cfg = MLEConfig::new(4.0).unwrap();
            let a = mle_solve(&r, &cfg).unwrap();
            let b = mle_solve(&scaled, &cfg).unwrap();
            prop_assert!(rel_frobenius(b.estimator.matrix(), a.estimator.matrix()) < 1e-8);
        }

        #[test]
        fn output_symmetric_positive_definite(seed in any::<u64>()) {
            let r = student_returns(5, 15, 3.0, seed);
            let sol = mle_solve(&r, &MLEConfig::new(3.0).unwrap()).unwrap();
            let m = sol.estimator.matrix();
            prop_assert!(m == &m.transpose());
            prop_assert!(eigenvalues(&sol.estimator).unwrap().values()[0] > 0.0);
        }
    }
}
