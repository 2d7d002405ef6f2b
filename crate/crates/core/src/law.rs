//! Marginal laws of the common volatility factor `sigma_t`.
//!
//! Every law is normalized so that `<sigma^2> = 1`. Internally the
//! resolvent equations are written in terms of the inverse variance
//! `v = 1/sigma^2`; for the Student law `v = s / mu_bar` with
//! `s ~ Gamma(mu/2, 1)`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "law")]
pub enum SigmaLaw {
    /// `sigma^2 = mu_bar / s` with `s ~ Gamma(mu/2, 1)`: multivariate Student returns.
    StudentInverseGamma { mu: f64 },
    /// `sigma = 1`: Gaussian returns.
    DeltaGaussian,
    /// `ln sigma^2 ~ N(-log_variance/2, log_variance)`.
    LogNormal { log_variance: f64 },
}

impl SigmaLaw {
    pub fn student(mu: f64) -> Result<Self> {
        let law = SigmaLaw::StudentInverseGamma { mu };
        law.validate()?;
        Ok(law)
    }

    pub fn log_normal(log_variance: f64) -> Result<Self> {
        let law = SigmaLaw::LogNormal { log_variance };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SigmaLaw::StudentInverseGamma { mu } => {
                if !(mu > 2.0) || !mu.is_finite() {
                    return Err(invalid(format!(
                        "Student tail exponent must be finite and > 2 (got {mu})"
                    )));
                }
            }
            SigmaLaw::DeltaGaussian => {}
            SigmaLaw::LogNormal { log_variance } => {
                if !(log_variance >= 0.0) || !log_variance.is_finite() {
                    return Err(invalid(format!(
                        "log-normal log-variance must be finite and >= 0 (got {log_variance})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `mu_bar = mu/2 - 1` for the Student law.
    pub fn mu_bar(&self) -> Option<f64> {
        match *self {
            SigmaLaw::StudentInverseGamma { mu } => Some(0.5 * mu - 1.0),
            _ => None,
        }
    }

    pub fn mu(&self) -> Option<f64> {
        match *self {
            SigmaLaw::StudentInverseGamma { mu } => Some(mu),
            _ => None,
        }
    }

    /// Draws one volatility value.
    pub fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SigmaLaw::StudentInverseGamma { mu } => {
                let gamma = Gamma::new(0.5 * mu, 1.0).expect("validated shape");
                let s: f64 = gamma.sample(rng);
                ((0.5 * mu - 1.0) / s).sqrt()
            }
            SigmaLaw::DeltaGaussian => 1.0,
            SigmaLaw::LogNormal { log_variance } => {
                let z: f64 = StandardNormal.sample(rng);
                (0.5 * (log_variance.sqrt() * z - 0.5 * log_variance)).exp()
            }
        }
    }

    pub(crate) fn inverse_variance(&self) -> InverseVariance {
        match *self {
            SigmaLaw::StudentInverseGamma { mu } => {
                let shape = 0.5 * mu;
                let rate = shape - 1.0;
                InverseVariance::Gamma {
                    shape,
                    rate,
                    log_norm: shape * rate.ln() - ln_gamma(shape),
                }
            }
            SigmaLaw::DeltaGaussian => InverseVariance::Delta,
            SigmaLaw::LogNormal { log_variance } if log_variance == 0.0 => InverseVariance::Delta,
            SigmaLaw::LogNormal { log_variance } => {
                let s = log_variance.sqrt();
                InverseVariance::LogNormal {
                    m: 0.5 * log_variance,
                    s,
                    log_norm: -(s * (2.0 * std::f64::consts::PI).sqrt()).ln(),
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            SigmaLaw::StudentInverseGamma { mu } => format!("student(mu={mu})"),
            SigmaLaw::DeltaGaussian => "gaussian".to_string(),
            SigmaLaw::LogNormal { log_variance } => format!("lognormal(log_variance={log_variance})"),
        }
    }
}

/// Density of the inverse variance `v = 1/sigma^2`, with `<1/v> = 1`.
#[derive(Debug, Clone, Copy)]
pub(crate) enum InverseVariance {
    Delta,
    /// `rate^shape v^(shape-1) e^(-rate v) / Gamma(shape)`
    Gamma { shape: f64, rate: f64, log_norm: f64 },
    /// `ln v ~ N(m, s^2)`
    LogNormal { m: f64, s: f64, log_norm: f64 },
}

impl InverseVariance {
    pub fn pdf(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        match *self {
            InverseVariance::Delta => 0.0,
            InverseVariance::Gamma { shape, rate, log_norm } => {
                (log_norm + (shape - 1.0) * v.ln() - rate * v).exp()
            }
            InverseVariance::LogNormal { m, s, log_norm } => {
                let l = v.ln();
                (log_norm - l - (l - m).powi(2) / (2.0 * s * s)).exp()
            }
        }
    }

    /// Analytic continuation of the density to `Re c > 0`.
    pub fn pdf_c(&self, c: Complex64) -> Complex64 {
        match *self {
            InverseVariance::Delta => Complex64::new(0.0, 0.0),
            InverseVariance::Gamma { shape, rate, log_norm } => {
                (log_norm + (shape - 1.0) * c.ln() - rate * c).exp()
            }
            InverseVariance::LogNormal { m, s, log_norm } => {
                let l = c.ln();
                (log_norm - l - (l - m).powi(2) / (2.0 * s * s)).exp()
            }
        }
    }

    /// First three derivatives of `ln P` at complex `c`.
    pub fn log_derivatives(&self, c: Complex64) -> [Complex64; 3] {
        match *self {
            InverseVariance::Delta => [Complex64::new(0.0, 0.0); 3],
            InverseVariance::Gamma { shape, rate, .. } => {
                let a = shape - 1.0;
                let inv = c.inv();
                [a * inv - rate, -a * inv * inv, 2.0 * a * inv * inv * inv]
            }
            InverseVariance::LogNormal { m, s, .. } => {
                let inv = c.inv();
                let l = c.ln() - m;
                let s2 = s * s;
                [
                    -inv - l * inv / s2,
                    inv * inv - (1.0 - l) * inv * inv / s2,
                    -2.0 * inv * inv * inv - (2.0 * l - 3.0) * inv * inv * inv / s2,
                ]
            }
        }
    }

    /// `[P, P', P'', P''']` at complex `c`.
    pub fn derivatives(&self, c: Complex64) -> [Complex64; 4] {
        let p = self.pdf_c(c);
        let [l1, l2, l3] = self.log_derivatives(c);
        [
            p,
            p * l1,
            p * (l1 * l1 + l2),
            p * (l1 * l1 * l1 + 3.0 * l1 * l2 + l3),
        ]
    }

    /// For real `v` and complex `c`, returns `(Δ, Δ - ℓ₁(v - c))` where
    /// `Δ = ln P(v) - ln P(c)` and `ℓ₁ = (ln P)'(c)`. Both are computed
    /// without cancellation when `v` is close to `c`.
    pub fn log_ratio(&self, v: f64, c: Complex64) -> (Complex64, Complex64) {
        let d = Complex64::new(v, 0.0) - c;
        let x = d / c;
        let lmx = log1p_minus_x(x);
        match *self {
            InverseVariance::Delta => (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0)),
            InverseVariance::Gamma { shape, rate, .. } => {
                let a = shape - 1.0;
                let l1 = a / c - rate;
                let second = a * lmx;
                (l1 * d + second, second)
            }
            InverseVariance::LogNormal { m, s, .. } => {
                let s2 = s * s;
                let lc = c.ln() - m;
                let l = x + lmx;
                let l1 = -(1.0 + lc / s2) / c;
                let second = -lmx - l * l / (2.0 * s2) - lc * lmx / s2;
                (l1 * d + second, second)
            }
        }
    }

    /// Points where the density changes character, plus the truncation
    /// point beyond which the remaining mass is below ~1e-25.
    pub fn breakpoints(&self) -> Vec<f64> {
        match *self {
            InverseVariance::Delta => vec![],
            InverseVariance::Gamma { shape, rate, .. } => {
                let mean = shape / rate;
                let sd = shape.sqrt() / rate;
                let mode = (shape - 1.0) / rate;
                let mut bp = vec![mode, mean];
                for k in [1.0, 3.0, 6.0, 12.0, 25.0] {
                    bp.push(mean + k * sd);
                    if mean - k * sd > 0.0 {
                        bp.push(mean - k * sd);
                    }
                }
                bp.push(mean + 60.0 * sd + 60.0 / rate);
                bp
            }
            InverseVariance::LogNormal { m, s, .. } => {
                let mut bp = vec![];
                for k in [-12.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0, 12.0] {
                    bp.push((m + k * s).exp());
                }
                bp
            }
        }
    }
}

/// `ln(1 + x) - x`.
pub(crate) fn log1p_minus_x(x: Complex64) -> Complex64 {
    if x.norm() < 0.25 {
        // -x²/2 + x³/3 - ...
        let mut term = -x * x;
        let mut sum = Complex64::new(0.0, 0.0);
        for k in 2..80 {
            let add = term / k as f64;
            sum += add;
            if add.norm() <= 1e-17 * sum.norm() {
                break;
            }
            term *= -x;
        }
        sum
    } else {
        (Complex64::new(1.0, 0.0) + x).ln() - x
    }
}

/// `e^y - 1 - y`.
pub(crate) fn expm1_minus_x(y: Complex64) -> Complex64 {
    if y.norm() < 0.25 {
        let mut term = y * y / 2.0;
        let mut sum = Complex64::new(0.0, 0.0);
        for k in 3..80 {
            sum += term;
            if term.norm() <= 1e-17 * sum.norm() {
                break;
            }
            term *= y / k as f64;
        }
        sum
    } else {
        y.exp() - 1.0 - y
    }
}
