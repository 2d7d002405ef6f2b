//! Kullback-Leibler entropies between centered elliptic laws, and the
//! expected entropies `Z/N = <S(E;C)>/N` and `Z'/N = <S(E₁;E₂)>/N` of
//! empirical correlation matrices.
//!
//! `S(C₁;C₂)` is the divergence of the law with correlation `C₂` from the
//! one with correlation `C₁`. All variants depend on the pair only through
//! the generalized eigenvalues `a` of `C₂⁻¹C₁`.

use nalgebra::{Cholesky, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::dos::{mp_edges, DosSolver, SpectralMoments};
use crate::ensemble::{
    correlation_factor, pearson_estimator, sample_rng, sample_with_factor, CorrelationMatrix, EnsembleParams,
};
use crate::error::{invalid, Error, Result};
use crate::law::SigmaLaw;
use crate::quadrature::{gamma_weight_integral, integrate_scalar, Tolerance};

/// Eigenvalues of `C₂⁻¹C₁`, from the symmetric matrix `L⁻¹C₁L⁻ᵀ` with `C₂ = LLᵀ`.
pub fn generalized_eigenvalues(c1: &CorrelationMatrix, c2: &CorrelationMatrix) -> Result<Vec<f64>> {
    if c1.dim() != c2.dim() {
        return Err(Error::Dimension(format!("{0}x{0} vs {1}x{1}", c1.dim(), c2.dim())));
    }
    let chol = Cholesky::new(c2.matrix().clone())
        .ok_or_else(|| Error::Singular("second correlation matrix is not positive definite".into()))?;
    let l = chol.l();
    let x = l
        .solve_lower_triangular(c1.matrix())
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let y = l
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let sym = (&y + y.transpose()) * 0.5;
    let mut a: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    a.sort_by(f64::total_cmp);
    Ok(a)
}

fn positive_spectrum(c1: &CorrelationMatrix, c2: &CorrelationMatrix) -> Result<Vec<f64>> {
    let a = generalized_eigenvalues(c1, c2)?;
    if a.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Singular("first correlation matrix is not positive definite".into()));
    }
    Ok(a)
}

/// Gaussian divergence `½ Σ (a - ln a - 1)`.
pub fn gaussian_kl(c1: &CorrelationMatrix, c2: &CorrelationMatrix) -> Result<f64> {
    Ok(gaussian_kl_spectral(&positive_spectrum(c1, c2)?))
}

pub fn gaussian_kl_spectral(a: &[f64]) -> f64 {
    // a - 1 - ln a without cancellation near a = 1
    0.5 * a.iter().map(|&x| (x - 1.0) - (x - 1.0).ln_1p()).sum::<f64>()
}

/// Student divergence at finite `N` and `μ`:
/// `-½ Σ ln a + (N+μ)/2 ∫ ds P(s) ln[(2s + X)/(2s + N)]`, `X = Σ a`, with
/// `P(s)` the Gamma density of shape `μ/2`.
pub fn student_kl_finite(c1: &CorrelationMatrix, c2: &CorrelationMatrix, mu: f64) -> Result<f64> {
    student_kl_finite_spectral(&positive_spectrum(c1, c2)?, mu)
}

pub fn student_kl_finite_spectral(a: &[f64], mu: f64) -> Result<f64> {
    if !(mu > 2.0) || !mu.is_finite() {
        return Err(invalid(format!("Student tail exponent must be finite and > 2 (got {mu})")));
    }
    let n = a.len() as f64;
    let log_det: f64 = a.iter().map(|v| v.ln()).sum();
    // ln((2s + X)/(2s + N)) = ln(1 + (X - N)/(2s + N))
    let dx = a.iter().map(|v| v - 1.0).sum::<f64>();
    let value = gamma_weight_integral(|s| (dx / (2.0 * s + n)).ln_1p(), mu)?.value;
    Ok(-0.5 * log_det + 0.5 * (n + mu) * value)
}

/// Student divergence in the large-`N` limit at fixed `μ`:
/// `-½ Σ ln a + (N/2) ln(Σa / N)`.
pub fn student_kl_large_n(c1: &CorrelationMatrix, c2: &CorrelationMatrix) -> Result<f64> {
    Ok(student_kl_large_n_spectral(&positive_spectrum(c1, c2)?))
}

pub fn student_kl_large_n_spectral(a: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    -0.5 * a.iter().map(|v| (v / mean).ln()).sum::<f64>()
}

fn require_q(q_ratio: f64) -> Result<()> {
    if !(q_ratio > 1.0) || !q_ratio.is_finite() {
        return Err(invalid(format!("Q = T/N must be finite and > 1 (got {q_ratio})")));
    }
    Ok(())
}

/// `<ln λ>` of the Marčenko-Pastur law, `-1 - ((1-q)/q) ln(1-q)`.
pub fn mp_log_mean(q_ratio: f64) -> Result<f64> {
    require_q(q_ratio)?;
    let q = 1.0 / q_ratio;
    Ok(-1.0 - (1.0 - q) / q * (-q).ln_1p())
}

/// `Z/N = ½ ∫ ρ_MP(λ) (λ - ln λ - 1) dλ` by quadrature over the bulk.
pub fn z_gaussian(q_ratio: f64) -> Result<f64> {
    require_q(q_ratio)?;
    let q = 1.0 / q_ratio;
    let (lo, hi) = mp_edges(q)?;
    // λ = c - r cos θ
    let c = 0.5 * (lo + hi);
    let r = 0.5 * (hi - lo);
    let v = integrate_scalar(
        |t| {
            let l = c - r * t.cos();
            let s = t.sin();
            let rho_jac = r * r * s * s / (2.0 * std::f64::consts::PI * q * l);
            0.5 * rho_jac * ((l - 1.0) - (l - 1.0).ln_1p())
        },
        &[0.0, 0.5 * std::f64::consts::PI, std::f64::consts::PI],
        &Tolerance::default(),
    )?;
    Ok(v)
}

/// `Z'/N = -½ + ½ <λ><1/λ> = 1/(2(Q-1))` for Gaussian returns.
pub fn zprime_gaussian(q_ratio: f64) -> Result<f64> {
    require_q(q_ratio)?;
    Ok(0.5 / (q_ratio - 1.0))
}

/// `Z/N = -½ <ln λ> + ½ ln <λ>` over the Wishart-Student density.
pub fn z_student(q_ratio: f64, mu: f64) -> Result<f64> {
    Ok(KLBenchmarks::student(mu, q_ratio)?.z_over_n)
}

/// `Z'/N = ½ ln <λ> + ½ ln <1/λ>` over the Wishart-Student density.
pub fn zprime_student(q_ratio: f64, mu: f64) -> Result<f64> {
    Ok(KLBenchmarks::student(mu, q_ratio)?.zprime_over_n)
}

/// One cell of the benchmark table.
#[derive(Debug, Clone, Serialize)]
pub struct KLBenchmarks {
    /// `None` for Gaussian returns.
    pub mu: Option<f64>,
    pub q_ratio: f64,
    pub z_over_n: f64,
    pub zprime_over_n: f64,
    pub moments: Option<SpectralMoments>,
}

impl KLBenchmarks {
    pub fn gaussian(q_ratio: f64) -> Result<Self> {
        Ok(Self {
            mu: None,
            q_ratio,
            z_over_n: z_gaussian(q_ratio)?,
            zprime_over_n: zprime_gaussian(q_ratio)?,
            moments: None,
        })
    }

    pub fn student(mu: f64, q_ratio: f64) -> Result<Self> {
        require_q(q_ratio)?;
        let solver = DosSolver::new(SigmaLaw::student(mu)?, q_ratio)?;
        let m = solver.moments()?;
        Ok(Self {
            mu: Some(mu),
            q_ratio,
            z_over_n: -0.5 * m.log_mean + 0.5 * m.mean.ln(),
            zprime_over_n: 0.5 * m.mean.ln() + 0.5 * m.inverse_mean.ln(),
            moments: Some(m),
        })
    }

    /// `mu = ∞` selects the Gaussian cell.
    pub fn for_mu(mu: f64, q_ratio: f64) -> Result<Self> {
        if mu == f64::INFINITY {
            Self::gaussian(q_ratio)
        } else {
            Self::student(mu, q_ratio)
        }
    }
}

/// Benchmark grid: one row per `μ`, one column per `Q`, cells in parallel.
pub fn kl_table(mus: &[f64], q_ratios: &[f64]) -> Result<Vec<Vec<KLBenchmarks>>> {
    let cells: Vec<(usize, usize)> = (0..mus.len()).flat_map(|i| (0..q_ratios.len()).map(move |j| (i, j))).collect();
    let computed: Vec<KLBenchmarks> = cells
        .par_iter()
        .map(|&(i, j)| KLBenchmarks::for_mu(mus[i], q_ratios[j]))
        .collect::<Result<_>>()?;
    let mut it = computed.into_iter();
    Ok(mus.iter().map(|_| (0..q_ratios.len()).map(|_| it.next().unwrap()).collect()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `S(E;C)`.
    EVsC,
    /// `S(E₁;E₂)`.
    E1VsE2,
}

/// Sample mean of `S/N` with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KlEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub std_dev: f64,
    pub samples: usize,
}

/// Monte Carlo estimate of `<S>/N`: the Gaussian divergence for the
/// Gaussian law, the large-`N` Student divergence otherwise.
pub fn kl_monte_carlo(
    params: &EnsembleParams,
    true_c: &CorrelationMatrix,
    mode: KlMode,
    samples: usize,
    seed: u64,
) -> Result<KlEstimate> {
    params.require_invertible()?;
    if samples < 2 {
        return Err(invalid("need at least two Monte Carlo samples"));
    }
    if true_c.dim() != params.n {
        return Err(Error::Dimension(format!("true correlation is {0}x{0}, N={1}", true_c.dim(), params.n)));
    }
    let l = correlation_factor(true_c)?;
    let gaussian = matches!(params.law, SigmaLaw::DeltaGaussian);
    let n = params.n as f64;
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = sample_rng(seed, k as u64);
            let e1 = pearson_estimator(&sample_with_factor(params, &l, &mut rng));
            let c2 = match mode {
                KlMode::EVsC => true_c.clone(),
                KlMode::E1VsE2 => pearson_estimator(&sample_with_factor(params, &l, &mut rng)),
            };
            let a = positive_spectrum(&e1, &c2)?;
            Ok(if gaussian { gaussian_kl_spectral(&a) } else { student_kl_large_n_spectral(&a) } / n)
        })
        .collect::<Result<_>>()?;
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(KlEstimate {
        mean,
        std_error: (var / m).sqrt(),
        std_dev: var.sqrt(),
        samples,
    })
}
