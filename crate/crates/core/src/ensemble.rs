//! Elliptic return ensembles `r_t = σ_t L ξ_t`, Pearson estimators and spectra.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::law::SigmaLaw;

/// Relative asymmetry tolerated by [`CorrelationMatrix::new`] and [`eigenvalues`].
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnsembleParams {
    pub n: usize,
    pub t: usize,
    pub law: SigmaLaw,
}

impl EnsembleParams {
    pub fn new(n: usize, t: usize, law: SigmaLaw) -> Result<Self> {
        if n == 0 || t == 0 {
            return Err(invalid(format!("need N >= 1 and T >= 1 (got N={n}, T={t})")));
        }
        law.validate()?;
        Ok(Self { n, t, law })
    }

    /// `Q = T/N`.
    pub fn q_ratio(&self) -> f64 {
        self.t as f64 / self.n as f64
    }

    /// `q = N/T`.
    pub fn q(&self) -> f64 {
        self.n as f64 / self.t as f64
    }

    pub(crate) fn require_invertible(&self) -> Result<()> {
        if self.t <= self.n {
            return Err(invalid(format!(
                "T/N must exceed 1 for an invertible estimator (N={}, T={})",
                self.n, self.t
            )));
        }
        Ok(())
    }
}

/// Returns matrix, one row per asset and one column per date.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsMatrix {
    values: DMatrix<f64>,
    sigma: Option<Vec<f64>>,
}

impl ReturnsMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Empty("returns matrix".into()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(invalid("returns must be finite"));
        }
        Ok(Self { values, sigma: None })
    }

    /// Attaches the per-date volatility that generated each column.
    pub fn with_sigma(mut self, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != self.t() {
            return Err(Error::Dimension(format!("{} volatilities for {} dates", sigma.len(), self.t())));
        }
        self.sigma = Some(sigma);
        Ok(self)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn t(&self) -> usize {
        self.values.ncols()
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }
}

/// Symmetric `N×N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(DMatrix<f64>);

impl CorrelationMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    /// `C_ij = ρ^|i-j|`.
    pub fn exponential(n: usize, rho: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(invalid(format!("exponential correlation needs |rho| < 1 (got {rho})")));
        }
        Ok(Self(DMatrix::from_fn(n, n, |i, j| rho.powi(i.abs_diff(j) as i32))))
    }

    /// One factor: `C_ij = ρ` off the diagonal.
    pub fn one_factor(n: usize, rho: f64) -> Result<Self> {
        if !(rho > -1.0 / (n as f64 - 1.0).max(1.0) && rho < 1.0) {
            return Err(invalid(format!("one-factor correlation {rho} is not positive definite for N={n}")));
        }
        Ok(Self(DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rho })))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(invalid("matrix entries must be finite"));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(worst / scale));
    }
    Ok(())
}

/// Ascending eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum(Vec<f64>);

impl Spectrum {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(invalid("eigenvalues must be finite"));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }
}

/// Random stream for sample `index` under `seed`. Streams are disjoint, so
/// Monte Carlo results do not depend on how samples are scheduled.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_sigma<R: Rng + ?Sized>(law: &SigmaLaw, rng: &mut R) -> f64 {
    law.sample_sigma(rng)
}

/// Lower Cholesky factor of a positive definite correlation matrix.
pub fn correlation_factor(c: &CorrelationMatrix) -> Result<DMatrix<f64>> {
    Cholesky::new(c.0.clone())
        .map(|ch| ch.l())
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization of the true correlation failed".into()))
}

/// Columns `r_t = σ_t L ξ_t` with `L Lᵀ = C` and `ξ_t` standard Gaussian.
pub fn sample_returns<R: Rng + ?Sized>(
    params: &EnsembleParams,
    true_c: &CorrelationMatrix,
    rng: &mut R,
) -> Result<ReturnsMatrix> {
    if true_c.dim() != params.n {
        return Err(Error::Dimension(format!("true correlation is {0}x{0}, N={1}", true_c.dim(), params.n)));
    }
    let l = correlation_factor(true_c)?;
    Ok(sample_with_factor(params, &l, rng))
}

pub(crate) fn sample_with_factor<R: Rng + ?Sized>(params: &EnsembleParams, l: &DMatrix<f64>, rng: &mut R) -> ReturnsMatrix {
    let (n, t) = (params.n, params.t);
    let mut values = DMatrix::zeros(n, t);
    let mut sigma = Vec::with_capacity(t);
    let mut xi = DVector::zeros(n);
    for col in 0..t {
        let s = params.law.sample_sigma(rng);
        for x in xi.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let r = l * &xi * s;
        values.set_column(col, &r);
        sigma.push(s);
    }
    ReturnsMatrix { values, sigma: Some(sigma) }
}

/// `E_ij = T⁻¹ Σ_t r_i^t r_j^t`. Columns are summed in a canonical order
/// so that permuting dates leaves the result bit-identical.
pub fn pearson_estimator(r: &ReturnsMatrix) -> CorrelationMatrix {
    let v = &r.values;
    let mut order: Vec<usize> = (0..v.ncols()).collect();
    order.sort_by(|&a, &b| {
        v.column(a)
            .iter()
            .zip(v.column(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = v.nrows();
    let mut e = DMatrix::zeros(n, n);
    for &t in &order {
        let c = v.column(t);
        e.ger(1.0, &c, &c, 1.0);
    }
    e /= v.ncols() as f64;
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            e[(j, i)] = e[(i, j)];
        }
    }
    CorrelationMatrix(e)
}

/// Ascending spectrum of a symmetric matrix.
pub fn eigenvalues(m: &CorrelationMatrix) -> Result<Spectrum> {
    check_symmetric(&m.0)?;
    let eig = SymmetricEigen::new(m.0.clone());
    Spectrum::new(eig.eigenvalues.iter().copied().collect())
}

/// Normalized histogram of pooled eigenvalues on `edges`; values outside
/// the binned range are discarded before normalizing.
pub fn spectrum_histogram(spectra: &[Spectrum], edges: &[f64]) -> Result<Vec<f64>> {
    if spectra.iter().all(|s| s.is_empty()) {
        return Err(Error::Empty("no eigenvalues to histogram".into()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("bin edges must be strictly increasing with at least two entries"));
    }
    let mut counts = vec![0usize; edges.len() - 1];
    let last = *edges.last().unwrap();
    for &x in spectra.iter().flat_map(|s| s.values()) {
        if x < edges[0] || x > last {
            continue;
        }
        let i = edges.partition_point(|&e| e <= x).saturating_sub(1).min(counts.len() - 1);
        counts[i] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Empty("no eigenvalues inside the binned range".into()));
    }
    Ok(counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, w)| c as f64 / (total as f64 * (w[1] - w[0])))
        .collect())
}

/// Spectra of `samples` independent Pearson estimators, sample `k` drawn
/// from stream `k` of `seed`.
pub fn sample_spectra(
    params: &EnsembleParams,
    true_c: &CorrelationMatrix,
    samples: usize,
    seed: u64,
) -> Result<Vec<Spectrum>> {
    let l = correlation_factor(true_c)?;
    if l.nrows() != params.n {
        return Err(Error::Dimension(format!("true correlation is {0}x{0}, N={1}", l.nrows(), params.n)));
    }
    (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = sample_rng(seed, k as u64);
            let r = sample_with_factor(params, &l, &mut rng);
            eigenvalues(&pearson_estimator(&r))
        })
        .collect()
}

/// Kolmogorov distance `sup |F_n - F|` between the empirical distribution
/// of `samples` and `cdf`.
pub fn sup_cdf_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut x: Vec<f64> = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        let f = cdf(xi);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}
