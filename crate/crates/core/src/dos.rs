//! Density of states of Wishart-Student (elliptic) correlation matrices.
//!
//! The Blue function of the Pearson estimator is
//!
//! ```text
//! B(G) = 1/G + ∫ dv P(v) / (v - G/Q)
//! ```
//!
//! where `v = 1/sigma^2` is the inverse variance of the common volatility
//! factor. Writing `G(λ - iε) = G_R + iπρ`, the eigenvalue density follows
//! from the complex root of `B(G) = λ` with `Im G > 0` (bulk), or from the
//! real root with `G_R < 0` (spectral gap below the left edge). The real
//! and imaginary parts of `B(G) = λ` are the two coupled equations on
//! `(G_R, ρ)`; Newton's method on the analytic function `B` is Newton's
//! method on that 2-vector residual with its exact Jacobian.

use std::cell::OnceCell;
use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::law::{expm1_minus_x, InverseVariance, SigmaLaw};
use crate::quadrature::{brent, gauss_legendre, integrate, integrate_scalar, Tolerance};

/// Marčenko-Pastur density for `q = 1/Q` in `(0, 1)`.
pub fn mp_density(lambda: f64, q: f64) -> Result<f64> {
    let (lo, hi) = mp_edges(q)?;
    if lambda <= lo || lambda >= hi {
        return Ok(0.0);
    }
    let disc = 4.0 * lambda * q - (lambda - 1.0 + q).powi(2);
    Ok(disc.max(0.0).sqrt() / (2.0 * PI * lambda * q))
}

/// Support `[(1-√q)², (1+√q)²]` of the Marčenko-Pastur law.
pub fn mp_edges(q: f64) -> Result<(f64, f64)> {
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid(format!("Marchenko-Pastur needs 0 < q < 1 (got {q})")));
    }
    let r = q.sqrt();
    Ok(((1.0 - r).powi(2), (1.0 + r).powi(2)))
}

/// Cumulative distribution of the Marčenko-Pastur law. Integrates the
/// density in the angle `θ` with `λ = 1 + q - 2√q cos θ`, which removes the
/// square-root edges.
pub fn mp_cdf(lambda: f64, q: f64) -> Result<f64> {
    let (lo, hi) = mp_edges(q)?;
    if lambda <= lo {
        return Ok(0.0);
    }
    if lambda >= hi {
        return Ok(1.0);
    }
    let c = 1.0 + q;
    let r = 2.0 * q.sqrt();
    let theta = ((c - lambda) / r).clamp(-1.0, 1.0).acos();
    let v = integrate_scalar(
        |t| {
            let s = t.sin();
            r * r * s * s / (2.0 * PI * q * (c - r * t.cos()))
        },
        &[0.0, theta],
        &Tolerance::default(),
    )?;
    Ok(v.clamp(0.0, 1.0))
}

/// Which solution of the resolvent equations a point lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    /// `ρ = 0`, real `G_R < 0` below the left edge.
    Gap,
    /// `ρ > 0`.
    Bulk,
    /// Beyond the crossover, given by the power-law tail.
    TailAsymptotic,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Gap => "gap",
            Branch::Bulk => "bulk",
            Branch::TailAsymptotic => "tail-asymptotic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumPoint {
    pub lambda: f64,
    pub g_re: f64,
    pub rho: f64,
    pub branch: Branch,
}

impl SpectrumPoint {
    pub fn resolvent(&self) -> Complex64 {
        Complex64::new(self.g_re, PI * self.rho)
    }
}

/// Convergence record of a point solve.
#[derive(Debug, Clone, Copy, Default)]
pub struct PointDiagnostics {
    pub iterations: usize,
    pub residual: f64,
    /// A complex root with `ρ > 1e-9` was also found where the gap branch
    /// was selected.
    pub ambiguous: bool,
    pub used_homotopy: bool,
}

/// Solver settings.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Relative residual `|B(G) - λ| / max(1, λ)`.
    pub residual_tol: f64,
    pub max_iter: usize,
    pub quadrature: Tolerance,
    /// Bulk solutions with smaller `ρ` are rejected in favour of the gap branch.
    pub min_bulk_rho: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            residual_tol: 1e-10,
            max_iter: 200,
            quadrature: Tolerance::default(),
            min_bulk_rho: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    g: f64,
    lambda: f64,
    curvature: f64,
}

/// Resolvent solver for a fixed volatility law and aspect ratio `Q = T/N`.
#[derive(Debug)]
pub struct DosSolver {
    law: SigmaLaw,
    q_ratio: f64,
    iv: InverseVariance,
    law_breakpoints: Vec<f64>,
    upper: f64,
    pub config: SolverConfig,
    edge: OnceCell<Edge>,
}

impl DosSolver {
    pub fn new(law: SigmaLaw, q_ratio: f64) -> Result<Self> {
        Self::with_config(law, q_ratio, SolverConfig::default())
    }

    pub fn with_config(law: SigmaLaw, q_ratio: f64, config: SolverConfig) -> Result<Self> {
        law.validate()?;
        if !(q_ratio > 1.0) || !q_ratio.is_finite() {
            return Err(invalid(format!("aspect ratio Q = T/N must be finite and > 1 (got {q_ratio})")));
        }
        let iv = law.inverse_variance();
        let mut law_breakpoints = iv.breakpoints();
        law_breakpoints.sort_by(f64::total_cmp);
        let upper = law_breakpoints.last().copied().unwrap_or(1.0);
        Ok(Self {
            law,
            q_ratio,
            iv,
            law_breakpoints,
            upper,
            config,
            edge: OnceCell::new(),
        })
    }

    pub fn law(&self) -> SigmaLaw {
        self.law
    }

    pub fn q_ratio(&self) -> f64 {
        self.q_ratio
    }

    /// `(∫ P(v)/(v-c) dv, ∫ P(v)/(v-c)² dv)` for `Im c >= 0`.
    pub fn stieltjes(&self, c: Complex64) -> Result<(Complex64, Complex64)> {
        if let InverseVariance::Delta = self.iv {
            let d = Complex64::new(1.0, 0.0) - c;
            return Ok((d.inv(), (d * d).inv()));
        }
        let (a, b) = (c.re, c.im);
        if a > 0.0 && b.abs() < 0.5 * a && 2.0 * a < self.upper {
            self.stieltjes_windowed(c)
        } else {
            self.stieltjes_direct(c, 0.0, self.upper, &[])
        }
    }

    fn breakpoints_in(&self, lo: f64, hi: f64, extra: &[f64]) -> Vec<f64> {
        let mut bp: Vec<f64> = self
            .law_breakpoints
            .iter()
            .chain(extra)
            .copied()
            .filter(|&x| x > lo && x < hi)
            .collect();
        bp.push(lo);
        bp.push(hi);
        bp.sort_by(f64::total_cmp);
        bp.dedup();
        bp
    }

    fn stieltjes_direct(&self, c: Complex64, lo: f64, hi: f64, extra: &[f64]) -> Result<(Complex64, Complex64)> {
        let m = c.norm();
        let mut pts: Vec<f64> = extra.to_vec();
        if m > 0.0 {
            pts.extend([0.25 * m, 0.5 * m, m, 2.0 * m, 4.0 * m]);
        }
        if c.re > 0.0 {
            pts.push(c.re);
        }
        let bp = self.breakpoints_in(lo, hi, &pts);
        let iv = self.iv;
        let r = integrate(
            |v| {
                let p = iv.pdf(v);
                let d = Complex64::new(v, 0.0) - c;
                let t0 = p / d;
                let t1 = t0 / d;
                [t0.re, t0.im, t1.re, t1.im]
            },
            &bp,
            &self.config.quadrature,
        )?;
        let [r0, i0, r1, i1] = r.value;
        Ok((Complex64::new(r0, i0), Complex64::new(r1, i1)))
    }

    /// Pole-subtracted evaluation for a pole close to the positive real
    /// axis: on the window `[a/2, 2a]` the analytic continuation of `P`
    /// and its derivative are removed and integrated in closed form.
    fn stieltjes_windowed(&self, c: Complex64) -> Result<(Complex64, Complex64)> {
        let a = c.re;
        let (lo, hi) = (0.5 * a, 2.0 * a);
        let [p0, p1, ..] = self.iv.derivatives(c);
        let iv = self.iv;
        let bp = self.breakpoints_in(lo, hi, &[a]);
        // The window integrals are small remainders of terms of size |P(c)|/a,
        // which also bounds the roundoff in the cancelling integrand.
        let mut tol = self.config.quadrature;
        tol.abs = tol.abs.max(tol.floor * (p0.norm() * (1.0 + 1.0 / a) + p1.norm()));
        let win = integrate(
            |v| {
                // P(v) - P(c) = P(c) (e^Δ - 1), expanded to stay exact near the pole
                let d = Complex64::new(v, 0.0) - c;
                let (delta, second) = iv.log_ratio(v, c);
                let rest = expm1_minus_x(delta);
                let t0 = p0 * (delta + rest) / d;
                let t1 = p0 * (second + rest) / (d * d);
                [t0.re, t0.im, t1.re, t1.im]
            },
            &bp,
            &tol,
        )?;
        let l_hi = Complex64::new(hi, 0.0) - c;
        let l_lo = Complex64::new(lo, 0.0) - c;
        let log_ratio = l_hi.ln() - l_lo.ln();
        let mut i0 = Complex64::new(win.value[0], win.value[1]) + p0 * log_ratio;
        let mut i1 = Complex64::new(win.value[2], win.value[3]) + p0 * (l_lo.inv() - l_hi.inv()) + p1 * log_ratio;
        let (l0, l1) = self.stieltjes_direct(c, 0.0, lo, &[])?;
        let (u0, u1) = self.stieltjes_direct(c, hi, self.upper, &[])?;
        i0 += l0 + u0;
        i1 += l1 + u1;
        Ok((i0, i1))
    }

    /// `(B(G), B'(G))`.
    pub fn blue(&self, g: Complex64) -> Result<(Complex64, Complex64)> {
        let q = self.q_ratio;
        let (i0, i1) = self.stieltjes(g / q)?;
        let inv = g.inv();
        Ok((inv + i0, -inv * inv + i1 / q))
    }

    fn blue_real(&self, g: f64) -> Result<f64> {
        Ok(self.blue(Complex64::new(g, 0.0))?.0.re)
    }

    fn blue_prime_real(&self, g: f64) -> Result<f64> {
        Ok(self.blue(Complex64::new(g, 0.0))?.1.re)
    }

    fn edge(&self) -> Result<Edge> {
        if let Some(e) = self.edge.get() {
            return Ok(*e);
        }
        let e = self.compute_edge()?;
        let _ = self.edge.set(e);
        Ok(e)
    }

    /// The maximum of the real-branch right-hand side over `G_R < 0`: the
    /// stationarity condition `1 = (G²/Q) ∫ P(v)/(v - G/Q)² dv`.
    fn compute_edge(&self) -> Result<Edge> {
        let q = self.q_ratio;
        let h = |g: f64| -> Result<f64> {
            let (_, i1) = self.stieltjes(Complex64::new(g / q, 0.0))?;
            Ok(g * g / q * i1.re - 1.0)
        };
        let mut g_lo = -1.0;
        while h(g_lo)? < 0.0 {
            g_lo *= 2.0;
            if g_lo < -1e12 {
                return Err(Error::Bracket("left edge: stationarity condition never reached".into()));
            }
        }
        let mut g_hi = -1.0;
        while h(g_hi)? > 0.0 {
            g_hi *= 0.5;
            if g_hi > -1e-14 {
                return Err(Error::Bracket("left edge: no sign change near G = 0".into()));
            }
        }
        let mut failure = None;
        let g = brent(
            |g| match h(g) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            },
            g_lo,
            g_hi,
            1e-15 * g_lo.abs(),
            300,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        let lambda = self.blue_real(g)?;
        let dh = 1e-4 * g.abs();
        let curvature = (self.blue_prime_real(g + dh)? - self.blue_prime_real(g - dh)?) / (2.0 * dh);
        Ok(Edge { g, lambda, curvature })
    }

    /// Smallest eigenvalue of the limiting spectrum.
    pub fn left_edge(&self) -> Result<f64> {
        Ok(self.edge()?.lambda)
    }

    /// Resolvent value `G_R < 0` at the maximum of the real-branch right-hand side.
    pub fn left_edge_resolvent(&self) -> Result<f64> {
        Ok(self.edge()?.g)
    }

    /// The largest eigenvalue of the limiting spectrum, when it is finite.
    /// Laws whose inverse-variance density reaches `v = 0` (Student,
    /// log-normal) produce no right edge.
    pub fn right_edge_or_none(&self) -> Option<f64> {
        match self.iv {
            InverseVariance::Delta => Some((1.0 + (1.0 / self.q_ratio).sqrt()).powi(2)),
            _ => None,
        }
    }

    /// Prefactor `A` of the power-law tail `ρ(λ) ≈ A λ^(-1-μ/2)` (Student law only).
    pub fn tail_prefactor(&self) -> Result<f64> {
        match self.law {
            SigmaLaw::StudentInverseGamma { mu } => {
                let mu_bar = 0.5 * mu - 1.0;
                let k = 0.5 * mu;
                Ok((k * mu_bar.ln() - ln_gamma(k) - (k - 1.0) * self.q_ratio.ln()).exp())
            }
            _ => Err(invalid(format!("no power-law tail for the {} law", self.law.label()))),
        }
    }

    /// Exponent of the power-law tail, `1 + μ/2`.
    pub fn tail_exponent(&self) -> Result<f64> {
        match self.law {
            SigmaLaw::StudentInverseGamma { mu } => Ok(1.0 + 0.5 * mu),
            _ => Err(invalid(format!("no power-law tail for the {} law", self.law.label()))),
        }
    }

    /// Large-λ asymptotic density `μ̄^(μ/2) / (Γ(μ/2) Q^(μ/2-1)) λ^(-1-μ/2)`.
    pub fn tail_density(&self, lambda: f64) -> Result<f64> {
        Ok(self.tail_prefactor()? * lambda.powf(-self.tail_exponent()?))
    }

    /// Density obtained by matching `T P(s) ds = N ρ(λ) dλ` with `λ = σ²/Q`:
    /// a single large-volatility day producing one large eigenvalue.
    pub fn rare_event_density(&self, lambda: f64) -> Result<f64> {
        match self.iv {
            InverseVariance::Delta => Err(invalid("no rare-event tail for the Gaussian law")),
            iv => {
                // v = 1/σ² = 1/(Qλ), |dv/dλ| = 1/(Qλ²), T/N = Q
                let v = 1.0 / (self.q_ratio * lambda);
                Ok(iv.pdf(v) / (lambda * lambda))
            }
        }
    }

    /// Real resolvent `G_R ∈ (G_edge, 0)` below the left edge.
    pub fn gap_resolvent(&self, lambda: f64) -> Result<f64> {
        let edge = self.edge()?;
        if lambda > edge.lambda {
            return Err(invalid(format!(
                "lambda={lambda} lies above the left edge {}; no real solution",
                edge.lambda
            )));
        }
        if lambda == edge.lambda {
            return Ok(edge.g);
        }
        let mut hi = 0.5 * edge.g;
        while self.blue_real(hi)? > lambda {
            hi *= 0.5;
            if hi > -1e-300 {
                return Err(Error::Bracket(format!("gap branch at lambda={lambda}")));
            }
        }
        let mut failure = None;
        let g = brent(
            |g| match self.blue_real(g) {
                Ok(v) => v - lambda,
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            },
            edge.g,
            hi,
            1e-16 * hi.abs(),
            300,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(g)
    }

    /// Damped Newton on `B(G) = z` in the upper half plane.
    fn newton(&self, z: Complex64, start: Complex64) -> Result<(Complex64, PointDiagnostics)> {
        let scale = z.norm().max(1.0);
        let target = self.config.residual_tol * scale;
        let mut g = start;
        let (mut b, mut db) = self.blue(g)?;
        let mut res = (b - z).norm();
        let done = |g: Complex64, it: usize, res: f64| {
            Ok((
                g,
                PointDiagnostics {
                    iterations: it,
                    residual: res / scale,
                    ..Default::default()
                },
            ))
        };
        for it in 0..self.config.max_iter {
            let step = (b - z) / db;
            // a full step this small is below the quadrature noise floor
            let size = |tol_re: f64, tol_im: f64| step.re.abs() <= tol_re * g.norm() && step.im.abs() <= tol_im * g.im;
            if res <= target && size(1e-13, 1e-9) {
                let next = g - step;
                return done(if next.im > 0.0 { next } else { g }, it, res);
            }
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let cand = g - t * step;
                if cand.im > 0.0 && cand.re.is_finite() {
                    if let Ok((b2, db2)) = self.blue(cand) {
                        let r2 = (b2 - z).norm();
                        if r2 < res || r2 <= 1e-3 * target {
                            accepted = Some((cand, b2, db2, r2));
                            break;
                        }
                    }
                }
                t *= 0.5;
            }
            let Some((cand, b2, db2, r2)) = accepted else {
                if res <= target && size(1e-10, 1e-6) {
                    return done(g, it, res);
                }
                break;
            };
            g = cand;
            b = b2;
            db = db2;
            res = r2;
        }
        Err(Error::NoConvergence {
            lambda: z.re,
            branch: "bulk",
            residual: res / scale,
            iterations: self.config.max_iter,
        })
    }

    /// Continuation in the imaginary part of `z = λ - iη` from `η = 1` to `η = 0`.
    fn homotopy(&self, lambda: f64) -> Result<(Complex64, PointDiagnostics)> {
        // G(z) = ∫ρ(x)/(z - x): for z = λ - iη, Im G > 0
        let mut eta = 1.0;
        let mut g = (Complex64::new(lambda - 1.0, -eta)).inv();
        let mut total = 0;
        loop {
            let z = Complex64::new(lambda, -eta);
            let (sol, d) = self.newton(z, g)?;
            g = sol;
            total += d.iterations;
            if eta == 0.0 {
                return Ok((
                    g,
                    PointDiagnostics {
                        iterations: total,
                        residual: d.residual,
                        used_homotopy: true,
                        ..Default::default()
                    },
                ));
            }
            eta = if eta < 1e-12 { 0.0 } else { eta * 0.25 };
        }
    }

    fn edge_guess(&self, lambda: f64) -> Result<Complex64> {
        let e = self.edge()?;
        let dl = (lambda - e.lambda).max(0.0);
        let im = (2.0 * dl / e.curvature.abs()).sqrt();
        Ok(Complex64::new(e.g, im.max(1e-300)))
    }

    /// Solves the resolvent equations at `λ`, using `init` (a previous
    /// resolvent value) as warm start when given.
    pub fn solve_point(&self, lambda: f64, init: Option<Complex64>) -> Result<SpectrumPoint> {
        self.solve_point_with_diagnostics(lambda, init).map(|(p, _)| p)
    }

    pub fn solve_point_with_diagnostics(
        &self,
        lambda: f64,
        init: Option<Complex64>,
    ) -> Result<(SpectrumPoint, PointDiagnostics)> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("lambda must be finite and > 0 (got {lambda})")));
        }
        let edge = self.edge()?;
        if let Some(right) = self.right_edge_or_none() {
            if lambda >= right {
                // real root above the bounded support: G_R > 0, ρ = 0
                let g = self.real_above_support(lambda, right)?;
                return Ok((
                    SpectrumPoint { lambda, g_re: g, rho: 0.0, branch: Branch::Gap },
                    PointDiagnostics::default(),
                ));
            }
        }
        if lambda <= edge.lambda {
            let g = self.gap_resolvent(lambda)?;
            let mut diag = PointDiagnostics::default();
            if lambda > edge.lambda * (1.0 - 1e-3) {
                if let Ok((alt, _)) = self.newton(Complex64::new(lambda, 0.0), self.edge_guess(2.0 * edge.lambda - lambda)?) {
                    diag.ambiguous = alt.im / PI > self.config.min_bulk_rho;
                }
            }
            return Ok((SpectrumPoint { lambda, g_re: g, rho: 0.0, branch: Branch::Gap }, diag));
        }
        let z = Complex64::new(lambda, 0.0);
        let near_edge = lambda - edge.lambda < 0.05 * edge.lambda.max(0.1);
        let mut attempts: Vec<Complex64> = Vec::with_capacity(2);
        if let Some(g) = init.filter(|g| g.im > 0.0 && g.re.is_finite()) {
            attempts.push(g);
        }
        if near_edge || attempts.is_empty() {
            attempts.push(self.edge_guess(lambda)?);
        }
        let mut last_err = None;
        for start in attempts {
            match self.newton(z, start) {
                Ok((g, d)) if g.im / PI > self.config.min_bulk_rho || lambda > 2.0 * edge.lambda + 1.0 => {
                    return Ok((bulk_point(lambda, g), d));
                }
                Ok(_) => {}
                Err(e) => last_err = Some(e),
            }
        }
        match self.homotopy(lambda) {
            Ok((g, d)) => Ok((bulk_point(lambda, g), d)),
            Err(e) => Err(last_err.unwrap_or(e)),
        }
    }

    fn real_above_support(&self, lambda: f64, right: f64) -> Result<f64> {
        // Delta law only: B(G) = 1/G + Q/(Q - G), increasing branch G ∈ (0, G_right)
        let q = self.q_ratio;
        let g_right = q / (1.0 + q.sqrt());
        if lambda == right {
            return Ok(g_right);
        }
        let f = |g: f64| 1.0 / g + q / (q - g) - lambda;
        brent(f, 1e-300_f64.max(g_right * 1e-16), g_right, 1e-16, 300)
    }

    /// Crossover `λ_cut` above which the power-law tail agrees with the
    /// solved density to within `rel_tol`, checked on three consecutive
    /// points of a geometric scan starting at `10/Q`.
    pub fn tail_crossover(&self, rel_tol: f64) -> Result<f64> {
        self.tail_prefactor()?;
        let mut lambda = (10.0 / self.q_ratio).max(2.0 * self.left_edge()?);
        let mut prev: Option<Complex64> = None;
        let mut streak = 0;
        let mut first_ok = lambda;
        while lambda < 1e12 {
            let p = self.solve_point(lambda, prev)?;
            prev = Some(p.resolvent());
            let dev = (p.rho / self.tail_density(lambda)? - 1.0).abs();
            if dev < rel_tol {
                if streak == 0 {
                    first_ok = lambda;
                }
                streak += 1;
                if streak == 3 {
                    return Ok(first_ok);
                }
            } else {
                streak = 0;
            }
            lambda *= 1.25;
        }
        Err(Error::Bracket(format!("no tail crossover found below 1e12 for tolerance {rel_tol}")))
    }

    /// A grid suited to plotting and integration: quadratic spacing from
    /// the left edge (resolving the square-root onset), then geometric.
    pub fn default_grid(&self, points: usize) -> Result<Vec<f64>> {
        let points = points.max(20);
        let left = self.left_edge()?;
        let mut grid = Vec::with_capacity(points);
        if let Some(right) = self.right_edge_or_none() {
            let n = points;
            let c = 0.5 * (left + right);
            let r = 0.5 * (right - left);
            for k in 1..n {
                let th = PI * k as f64 / n as f64;
                grid.push(c - r * th.cos());
            }
            return Ok(grid);
        }
        let n_bulk = points * 3 / 5;
        let n_tail = points - n_bulk;
        let span = 4.0_f64.max(2.0 * left);
        let umax = span.sqrt();
        for k in 1..=n_bulk {
            let u = umax * k as f64 / n_bulk as f64;
            grid.push(left + u * u);
        }
        let start = left + span;
        let stop = 1e3_f64.max(10.0 * start);
        let ratio = (stop / start).powf(1.0 / n_tail as f64);
        for k in 1..=n_tail {
            grid.push(start * ratio.powi(k as i32));
        }
        Ok(grid)
    }

    /// Moments of the limiting density by panel quadrature, completed
    /// analytically beyond `λ_cut` with the power-law tail.
    pub fn moments(&self) -> Result<SpectralMoments> {
        self.moments_with(&MomentConfig::default())
    }

    pub fn moments_with(&self, cfg: &MomentConfig) -> Result<SpectralMoments> {
        let edge = self.edge()?;
        let left = edge.lambda;
        let (gx, gw) = gauss_legendre(cfg.nodes_per_panel);
        let mut acc = MomentAccumulator::default();
        let mut prev: Option<Complex64> = None;
        let mut solves = 0usize;

        if let Some(right) = self.right_edge_or_none() {
            // λ = c - r cos θ removes both square-root edges
            let c = 0.5 * (left + right);
            let r = 0.5 * (right - left);
            let panels = cfg.bulk_panels;
            for p in 0..panels {
                let (t0, t1) = (PI * p as f64 / panels as f64, PI * (p + 1) as f64 / panels as f64);
                for (x, w) in gx.iter().zip(&gw) {
                    let th = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * x;
                    let lambda = c - r * th.cos();
                    let pt = self.solve_point(lambda, prev)?;
                    solves += 1;
                    prev = Some(pt.resolvent());
                    acc.add(lambda, pt.rho * r * th.sin() * 0.5 * (t1 - t0) * w);
                }
            }
            return Ok(acc.finish(self.law, self.q_ratio, left, right, TailMoments::default(), solves));
        }

        // square-root onset: λ = left + u²
        let span = 4.0_f64.max(2.0 * left);
        let umax = span.sqrt();
        let panels = cfg.bulk_panels;
        for p in 0..panels {
            let (u0, u1) = (umax * p as f64 / panels as f64, umax * (p + 1) as f64 / panels as f64);
            for (x, w) in gx.iter().zip(&gw) {
                let u = 0.5 * (u0 + u1) + 0.5 * (u1 - u0) * x;
                let lambda = left + u * u;
                let pt = self.solve_point(lambda, prev)?;
                solves += 1;
                prev = Some(pt.resolvent());
                acc.add(lambda, pt.rho * 2.0 * u * 0.5 * (u1 - u0) * w);
            }
        }

        // geometric panels in ln λ until the tail is captured
        let has_power_tail = self.tail_prefactor().is_ok();
        let mut lo = left + span;
        let ratio = 10f64.powf(1.0 / cfg.panels_per_decade as f64);
        let mut tail = TailMoments::default();
        loop {
            let hi = lo * ratio;
            let (l0, l1) = (lo.ln(), hi.ln());
            let mut last_rho = 0.0;
            for (x, w) in gx.iter().zip(&gw) {
                let t = 0.5 * (l0 + l1) + 0.5 * (l1 - l0) * x;
                let lambda = t.exp();
                let pt = self.solve_point(lambda, prev)?;
                solves += 1;
                prev = Some(pt.resolvent());
                acc.add(lambda, pt.rho * lambda * 0.5 * (l1 - l0) * w);
            }
            let end = self.solve_point(hi, prev)?;
            solves += 1;
            last_rho += end.rho;
            lo = hi;
            if has_power_tail {
                let a = self.tail_prefactor()?;
                let kappa = self.tail_exponent()? - 1.0;
                let mismatch = (last_rho / self.tail_density(hi)? - 1.0).abs();
                let mean_tail = a * hi.powf(1.0 - kappa) / (kappa - 1.0);
                let log_tail = a * hi.powf(-kappa) * (hi.ln() / kappa + 1.0 / (kappa * kappa));
                if (mismatch * mean_tail.max(log_tail) < cfg.tail_budget && hi >= 10.0 / self.q_ratio) || hi > cfg.max_lambda {
                    tail = TailMoments {
                        lambda_cut: hi,
                        mass: a * hi.powf(-kappa) / kappa,
                        mean: mean_tail,
                        log_mean: log_tail,
                        inverse_mean: a * hi.powf(-kappa - 1.0) / (kappa + 1.0),
                        relative_mismatch: mismatch,
                    };
                    break;
                }
            } else if last_rho * hi * hi < cfg.tail_budget || hi > cfg.max_lambda {
                tail.lambda_cut = hi;
                tail.relative_mismatch = last_rho * hi * hi;
                break;
            }
        }
        Ok(acc.finish(self.law, self.q_ratio, left, f64::INFINITY, tail, solves))
    }
}

#[derive(Debug, Clone, Copy)]
enum PanelMap {
    /// `λ = c - r cos θ`
    Theta { c: f64, r: f64 },
    /// `λ = left + u²`
    Sqrt { left: f64 },
    /// `λ = e^t`
    Log,
}

impl PanelMap {
    fn lambda(&self, t: f64) -> f64 {
        match *self {
            PanelMap::Theta { c, r } => c - r * t.cos(),
            PanelMap::Sqrt { left } => left + t * t,
            PanelMap::Log => t.exp(),
        }
    }

    fn jacobian(&self, t: f64) -> f64 {
        match *self {
            PanelMap::Theta { r, .. } => r * t.sin(),
            PanelMap::Sqrt { .. } => 2.0 * t,
            PanelMap::Log => t.exp(),
        }
    }

    fn coordinate(&self, lambda: f64) -> f64 {
        match *self {
            PanelMap::Theta { c, r } => ((c - lambda) / r).clamp(-1.0, 1.0).acos(),
            PanelMap::Sqrt { left } => (lambda - left).max(0.0).sqrt(),
            PanelMap::Log => lambda.ln(),
        }
    }
}

#[derive(Debug, Clone)]
struct Panel {
    map: PanelMap,
    t0: f64,
    t1: f64,
    lo: f64,
    /// Mass above `lo`, tail included.
    survival_lo: f64,
    mass: f64,
    /// Legendre coefficients of the integrand in the panel coordinate
    /// rescaled to `[-1, 1]`, from the node values.
    coeffs: Vec<f64>,
}

/// Distribution function of the limiting density, tabulated on the same
/// panels as [`DosSolver::moments`] and completed with the power-law tail.
/// Values inside a panel are obtained by integrating the partial panel.
pub struct DosDistribution {
    panels: Vec<Panel>,
    left: f64,
    /// `(λ_cut, A, κ)` with survival `A λ^-κ / κ` beyond `λ_cut`.
    tail: Option<(f64, f64, f64)>,
    total: f64,
}

impl DosSolver {
    pub fn distribution(&self) -> Result<DosDistribution> {
        self.distribution_with(&MomentConfig::default())
    }

    pub fn distribution_with(&self, cfg: &MomentConfig) -> Result<DosDistribution> {
        let left = self.edge()?.lambda;
        let nodes = gauss_legendre(cfg.nodes_per_panel);
        let mut panels: Vec<Panel> = Vec::new();
        let mut prev: Option<Complex64> = None;
        let integrate_panel = |map: PanelMap, t0: f64, t1: f64, prev: &mut Option<Complex64>| -> Result<Panel> {
            let m = nodes.0.len();
            let mut coeffs = vec![0.0; m];
            for (x, w) in nodes.0.iter().zip(&nodes.1) {
                let t = 0.5 * (t0 + t1) + 0.5 * (t1 - t0) * x;
                let pt = self.solve_point(map.lambda(t), *prev)?;
                *prev = Some(pt.resolvent());
                let f = pt.rho * map.jacobian(t) * 0.5 * (t1 - t0) * w;
                for (c, pn) in coeffs.iter_mut().zip(legendre(*x, m)) {
                    *c += f * pn;
                }
            }
            for (n, c) in coeffs.iter_mut().enumerate() {
                *c *= n as f64 + 0.5;
            }
            Ok(Panel {
                map,
                t0,
                t1,
                lo: map.lambda(t0),
                survival_lo: 0.0,
                mass: 2.0 * coeffs[0],
                coeffs,
            })
        };
        let mut tail = None;
        if let Some(right) = self.right_edge_or_none() {
            let map = PanelMap::Theta {
                c: 0.5 * (left + right),
                r: 0.5 * (right - left),
            };
            let n = cfg.bulk_panels;
            for p in 0..n {
                panels.push(integrate_panel(map, PI * p as f64 / n as f64, PI * (p + 1) as f64 / n as f64, &mut prev)?);
            }
        } else {
            let span = 4.0_f64.max(2.0 * left);
            let umax = span.sqrt();
            let n = cfg.bulk_panels;
            let map = PanelMap::Sqrt { left };
            for p in 0..n {
                panels.push(integrate_panel(map, umax * p as f64 / n as f64, umax * (p + 1) as f64 / n as f64, &mut prev)?);
            }
            let power = self.tail_prefactor().ok().zip(self.tail_exponent().ok());
            let step = 10f64.ln() / cfg.panels_per_decade as f64;
            let mut lo = (left + span).ln();
            loop {
                let hi = lo + step;
                panels.push(integrate_panel(PanelMap::Log, lo, hi, &mut prev)?);
                lo = hi;
                let x = hi.exp();
                let end = self.solve_point(x, prev)?;
                match power {
                    Some((a, e)) => {
                        let kappa = e - 1.0;
                        let tail_mass = a * x.powf(-kappa) / kappa;
                        let mismatch = (end.rho / self.tail_density(x)? - 1.0).abs();
                        if (mismatch * tail_mass < 1e-3 * cfg.tail_budget && x >= 10.0 / self.q_ratio) || x > cfg.max_lambda {
                            tail = Some((x, a, kappa));
                            break;
                        }
                    }
                    None => {
                        if end.rho * x * x < cfg.tail_budget || x > cfg.max_lambda {
                            break;
                        }
                    }
                }
            }
        }
        let mut survival = tail.map(|(x, a, k)| a * x.powf(-k) / k).unwrap_or(0.0);
        for p in panels.iter_mut().rev() {
            survival += p.mass;
            p.survival_lo = survival;
        }
        Ok(DosDistribution {
            panels,
            left,
            tail,
            total: survival,
        })
    }
}

impl DosDistribution {
    /// Total mass, one up to quadrature error.
    pub fn mass(&self) -> f64 {
        self.total
    }

    pub fn left_edge(&self) -> f64 {
        self.left
    }

    pub fn lambda_cut(&self) -> Option<f64> {
        self.tail.map(|t| t.0)
    }

    /// Mass of `p` below `lambda`, integrating the Legendre interpolant of
    /// the node values.
    fn partial(&self, p: &Panel, lambda: f64) -> f64 {
        let t = p.map.coordinate(lambda).clamp(p.t0, p.t1);
        let x = (2.0 * t - p.t0 - p.t1) / (p.t1 - p.t0);
        let m = p.coeffs.len();
        let pl = legendre(x, m + 1);
        let mut mass = p.coeffs[0] * (x + 1.0);
        for n in 1..m {
            mass += p.coeffs[n] * (pl[n + 1] - pl[n - 1]) / (2 * n + 1) as f64;
        }
        mass
    }

    /// `∫_λ^∞ ρ`, normalized by the total mass.
    pub fn survival(&self, lambda: f64) -> Result<f64> {
        if lambda <= self.left {
            return Ok(1.0);
        }
        if let Some((cut, a, k)) = self.tail {
            if lambda >= cut {
                return Ok(a * lambda.powf(-k) / k / self.total);
            }
        }
        let i = self.panels.partition_point(|p| p.lo <= lambda);
        if i == 0 {
            return Ok(1.0);
        }
        let p = &self.panels[i - 1];
        if self.tail.is_none() && i == self.panels.len() && lambda >= p.map.lambda(p.t1) {
            return Ok(0.0);
        }
        Ok(((p.survival_lo - self.partial(p, lambda)) / self.total).clamp(0.0, 1.0))
    }

    pub fn cdf(&self, lambda: f64) -> Result<f64> {
        Ok(1.0 - self.survival(lambda)?)
    }

    /// The `λ` with `survival(λ) = s`, for `s` in `(0, 1)`.
    pub fn inverse_survival(&self, s: f64) -> Result<f64> {
        if !(s > 0.0 && s < 1.0) {
            return Err(invalid(format!("survival level must lie in (0, 1) (got {s})")));
        }
        if let Some((cut, a, k)) = self.tail {
            let at_cut = a * cut.powf(-k) / k / self.total;
            if s <= at_cut {
                return Ok((a / (k * s * self.total)).powf(1.0 / k));
            }
        }
        let i = self.panels.iter().rposition(|p| p.survival_lo / self.total >= s).unwrap_or(0);
        let p = &self.panels[i];
        let hi = p.map.lambda(p.t1);
        let mut failure = None;
        let root = brent(
            |l| match self.survival(l) {
                Ok(v) => v - s,
                Err(e) => {
                    failure.get_or_insert(e);
                    0.0
                }
            },
            p.lo,
            hi,
            1e-13 * hi,
            200,
        )?;
        match failure {
            Some(e) => Err(e),
            None => Ok(root),
        }
    }
}

/// `P_0(x), ..., P_{m-1}(x)`.
fn legendre(x: f64, m: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(m);
    p.push(1.0);
    if m > 1 {
        p.push(x);
    }
    for n in 1..m.saturating_sub(1) {
        let nf = n as f64;
        p.push(((2.0 * nf + 1.0) * x * p[n] - nf * p[n - 1]) / (nf + 1.0));
    }
    p.truncate(m);
    p
}

fn bulk_point(lambda: f64, g: Complex64) -> SpectrumPoint {
    SpectrumPoint {
        lambda,
        g_re: g.re,
        rho: g.im / PI,
        branch: Branch::Bulk,
    }
}

/// Panel layout for [`DosSolver::moments_with`].
#[derive(Debug, Clone, Copy)]
pub struct MomentConfig {
    pub nodes_per_panel: usize,
    pub bulk_panels: usize,
    pub panels_per_decade: usize,
    /// Accepted size of `mismatch × tail moment` when choosing `λ_cut`.
    pub tail_budget: f64,
    pub max_lambda: f64,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            nodes_per_panel: 16,
            bulk_panels: 12,
            panels_per_decade: 4,
            tail_budget: 1e-8,
            max_lambda: 1e10,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct TailMoments {
    pub lambda_cut: f64,
    pub mass: f64,
    pub mean: f64,
    pub log_mean: f64,
    pub inverse_mean: f64,
    /// `|ρ/ρ_tail - 1|` at `λ_cut`.
    pub relative_mismatch: f64,
}

/// `∫ρ`, `∫λρ`, `∫ρ log λ`, `∫ρ/λ` of the limiting density.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpectralMoments {
    pub law: SigmaLaw,
    pub q_ratio: f64,
    pub left_edge: f64,
    pub right_edge: f64,
    pub mass: f64,
    pub mean: f64,
    pub log_mean: f64,
    pub inverse_mean: f64,
    pub tail: TailMoments,
    pub point_solves: usize,
}

#[derive(Default)]
struct MomentAccumulator {
    mass: f64,
    mean: f64,
    log_mean: f64,
    inverse_mean: f64,
}

impl MomentAccumulator {
    fn add(&mut self, lambda: f64, weight: f64) {
        self.mass += weight;
        self.mean += weight * lambda;
        self.log_mean += weight * lambda.ln();
        self.inverse_mean += weight / lambda;
    }

    fn finish(self, law: SigmaLaw, q_ratio: f64, left: f64, right: f64, tail: TailMoments, solves: usize) -> SpectralMoments {
        SpectralMoments {
            law,
            q_ratio,
            left_edge: left,
            right_edge: right,
            mass: self.mass + tail.mass,
            mean: self.mean + tail.mean,
            log_mean: self.log_mean + tail.log_mean,
            inverse_mean: self.inverse_mean + tail.inverse_mean,
            tail,
            point_solves: solves,
        }
    }
}

/// Options for [`dos_curve`].
#[derive(Debug, Clone, Copy)]
pub struct CurveConfig {
    /// Relative agreement between solved and asymptotic density that
    /// defines the tail crossover.
    pub tail_tolerance: f64,
    /// Solve every point exactly and never switch to the tail branch.
    pub exact_tail: bool,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            tail_tolerance: 0.02,
            exact_tail: false,
        }
    }
}

/// A sampled density of states.
#[derive(Debug, Clone, Serialize)]
pub struct SpectrumGrid {
    pub points: Vec<SpectrumPoint>,
    pub law: SigmaLaw,
    pub q_ratio: f64,
    pub left_edge: f64,
    pub right_edge: Option<f64>,
    pub lambda_cut: Option<f64>,
    pub residual_tol: f64,
    pub tail_prefactor: Option<f64>,
    pub tail_exponent: Option<f64>,
}

/// Sweeps `grid` (strictly increasing, positive) by continuation: each
/// bulk point starts Newton from the previous solution.
pub fn dos_curve(solver: &DosSolver, grid: &[f64], cfg: &CurveConfig) -> Result<SpectrumGrid> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(invalid("lambda grid must be positive, finite and strictly increasing"));
    }
    let left = solver.left_edge()?;
    let lambda_cut = match (solver.tail_prefactor(), cfg.exact_tail) {
        (Ok(_), false) => Some(solver.tail_crossover(cfg.tail_tolerance)?),
        _ => None,
    };
    let mut points = Vec::with_capacity(grid.len());
    let mut prev: Option<Complex64> = None;
    for &lambda in grid {
        if let Some(cut) = lambda_cut.filter(|&c| lambda >= c) {
            let _ = cut;
            points.push(SpectrumPoint {
                lambda,
                g_re: 1.0 / lambda,
                rho: solver.tail_density(lambda)?,
                branch: Branch::TailAsymptotic,
            });
            continue;
        }
        let p = solver.solve_point(lambda, prev)?;
        if p.branch == Branch::Bulk {
            prev = Some(p.resolvent());
        }
        points.push(p);
    }
    Ok(SpectrumGrid {
        points,
        law: solver.law(),
        q_ratio: solver.q_ratio(),
        left_edge: left,
        right_edge: solver.right_edge_or_none(),
        lambda_cut,
        residual_tol: solver.config.residual_tol,
        tail_prefactor: solver.tail_prefactor().ok(),
        tail_exponent: solver.tail_exponent().ok(),
    })
}

impl SpectrumGrid {
    /// Tail integral of `f(λ) ρ_tail(λ)` beyond the last grid point, for
    /// `f` one of `1`, `λ`, `ln λ`, `1/λ`.
    fn tail_integral(&self, which: Moment) -> f64 {
        let (Some(a), Some(e)) = (self.tail_prefactor, self.tail_exponent) else {
            return 0.0;
        };
        let Some(last) = self.points.last() else { return 0.0 };
        let x = last.lambda;
        let k = e - 1.0;
        match which {
            Moment::Mass => a * x.powf(-k) / k,
            Moment::Mean => a * x.powf(1.0 - k) / (k - 1.0),
            Moment::Log => a * x.powf(-k) * (x.ln() / k + 1.0 / (k * k)),
            Moment::Inverse => a * x.powf(-k - 1.0) / (k + 1.0),
        }
    }

    /// Cumulative integral of `f(λ)ρ(λ)` at each grid point. The first
    /// bulk interval assumes a square-root onset at the left edge; later
    /// intervals use the trapezoid rule in `w = ln(λ - λ_min)`.
    fn cumulative(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        let left = self.left_edge;
        let mut cum = Vec::with_capacity(self.points.len());
        let mut total = 0.0;
        let mut prev: Option<(f64, f64)> = None;
        for p in &self.points {
            if p.lambda > left && p.branch != Branch::Gap || (p.branch == Branch::Gap && prev.is_some()) {
                let w = (p.lambda - left).ln();
                let g = f(p.lambda) * p.rho * (p.lambda - left);
                match prev {
                    None => total += 2.0 / 3.0 * f(p.lambda) * p.rho * (p.lambda - left),
                    Some((w0, g0)) => total += 0.5 * (w - w0) * (g + g0),
                }
                prev = Some((w, g));
            }
            cum.push(total);
        }
        cum
    }

    fn integrate(&self, which: Moment) -> f64 {
        let f = move |l: f64| match which {
            Moment::Mass => 1.0,
            Moment::Mean => l,
            Moment::Log => l.ln(),
            Moment::Inverse => 1.0 / l,
        };
        self.cumulative(f).last().copied().unwrap_or(0.0) + self.tail_integral(which)
    }

    /// `∫ρ dλ` including the analytic tail beyond the last point.
    pub fn mass(&self) -> f64 {
        self.integrate(Moment::Mass)
    }

    /// `∫λρ dλ` including the analytic tail.
    pub fn mean(&self) -> f64 {
        self.integrate(Moment::Mean)
    }

    pub fn log_mean(&self) -> f64 {
        self.integrate(Moment::Log)
    }

    pub fn inverse_mean(&self) -> f64 {
        self.integrate(Moment::Inverse)
    }

    /// Cumulative distribution function built from the grid, normalized
    /// to reach one including the tail mass.
    pub fn cdf(&self) -> GridCdf {
        let cum = self.cumulative(|_| 1.0);
        let total = cum.last().copied().unwrap_or(0.0) + self.tail_integral(Moment::Mass);
        GridCdf {
            left: self.left_edge,
            lambdas: self.points.iter().map(|p| p.lambda).collect(),
            values: cum.iter().map(|c| c / total).collect(),
            tail: self.tail_prefactor.zip(self.tail_exponent).map(|(a, e)| (a / total, e)),
        }
    }

    /// CSV with columns `lambda,G_R,rho,branch`; `header` lines are
    /// written first, each prefixed with `# `.
    pub fn write_csv<W: Write>(&self, mut out: W, header: &[String]) -> Result<()> {
        for h in header {
            writeln!(out, "# {h}")?;
        }
        writeln!(out, "lambda,G_R,rho,branch")?;
        for p in &self.points {
            writeln!(out, "{:e},{:e},{:e},{}", p.lambda, p.g_re, p.rho, p.branch.as_str())?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Moment {
    Mass,
    Mean,
    Log,
    Inverse,
}

/// Piecewise-linear CDF on the grid, with the power-law tail beyond it.
#[derive(Debug, Clone)]
pub struct GridCdf {
    left: f64,
    lambdas: Vec<f64>,
    values: Vec<f64>,
    tail: Option<(f64, f64)>,
}

impl GridCdf {
    pub fn eval(&self, lambda: f64) -> f64 {
        if lambda <= self.left || self.lambdas.is_empty() {
            return 0.0;
        }
        let last = *self.lambdas.last().unwrap();
        if lambda >= last {
            return match self.tail {
                Some((a, e)) => {
                    let k = e - 1.0;
                    (1.0 - a * lambda.powf(-k) / k).clamp(0.0, 1.0)
                }
                None => *self.values.last().unwrap(),
            };
        }
        let i = self.lambdas.partition_point(|&l| l <= lambda);
        let (l0, v0) = if i == 0 { (self.left, 0.0) } else { (self.lambdas[i - 1], self.values[i - 1]) };
        let (l1, v1) = (self.lambdas[i], self.values[i]);
        if i == 0 || v0 == 0.0 {
            // square-root onset
            let frac = ((lambda - l0) / (l1 - l0)).max(0.0);
            return v0 + (v1 - v0) * frac.powf(1.5);
        }
        v0 + (v1 - v0) * (lambda - l0) / (l1 - l0)
    }
}
