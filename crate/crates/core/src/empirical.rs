//! Return-series ingestion and the windowed spectral protocol: sliding
//! windows, Pearson spectra, top-eigenvalue removal, significance cutoffs
//! and volatility-proxy rescaling.

use std::cell::RefCell;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::dos::{mp_cdf, DosSolver};
use crate::ensemble::{
    correlation_factor, eigenvalues, pearson_estimator, sample_rng, sample_with_factor, sup_cdf_distance,
    CorrelationMatrix, EnsembleParams, ReturnsMatrix, Spectrum,
};
use crate::error::{invalid, Error, Result};
use crate::law::SigmaLaw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Drop every date on which any ticker is missing.
    #[default]
    DropDate,
    /// Replace missing cells by zero.
    ZeroFill,
}

/// Daily returns, one row per ticker and one column per date.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsDataset {
    pub tickers: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub values: DMatrix<f64>,
    /// `true` where the cell was observed; zero-filled cells are `false`.
    pub observed: DMatrix<bool>,
    pub policy: MissingPolicy,
    /// Dates removed on ingestion, with the line they came from.
    pub dropped: Vec<(usize, NaiveDate)>,
}

impl ReturnsDataset {
    pub fn new(tickers: Vec<String>, dates: Vec<NaiveDate>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != tickers.len() || values.ncols() != dates.len() {
            return Err(Error::Dimension(format!(
                "{}x{} values for {} tickers and {} dates",
                values.nrows(),
                values.ncols(),
                tickers.len(),
                dates.len()
            )));
        }
        if dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("dates must be strictly increasing"));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(invalid("returns must be finite"));
        }
        let observed = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Ok(Self {
            tickers,
            dates,
            values,
            observed,
            policy: MissingPolicy::DropDate,
            dropped: vec![],
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn t(&self) -> usize {
        self.values.ncols()
    }

    fn with_columns(&self, keep: &[usize]) -> Self {
        Self {
            tickers: self.tickers.clone(),
            dates: keep.iter().map(|&j| self.dates[j]).collect(),
            values: self.values.select_columns(keep),
            observed: self.observed.select_columns(keep),
            policy: self.policy,
            dropped: self.dropped.clone(),
        }
    }
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Reads the CSV layout: a header `date,TICKER1,...`, then one row per
/// ISO date with decimal returns. Empty, `NA` and `NaN` cells are missing.
/// Lines starting with `#` are ignored.
pub fn load_returns(path: impl AsRef<Path>, policy: MissingPolicy) -> Result<ReturnsDataset> {
    read_returns(std::fs::File::open(path)?, policy)
}

pub fn read_returns<R: Read>(input: R, policy: MissingPolicy) -> Result<ReturnsDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r?,
        None => return Err(Error::Empty("returns file has no header".into())),
    };
    let width = header.len();
    if width < 2 {
        return Err(parse_error(line_of(&header), "header needs a date column and at least one ticker"));
    }
    let tickers: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut dates: Vec<NaiveDate> = vec![];
    let mut lines: Vec<usize> = vec![];
    let mut columns: Vec<Vec<Option<f64>>> = vec![];
    for rec in records {
        let rec = rec?;
        let line = line_of(&rec);
        if rec.len() != width {
            return Err(parse_error(line, format!("expected {width} fields, found {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| parse_error(line, format!("bad date {:?}: {e}", &rec[0])))?;
        if let Some(&prev) = dates.last() {
            if date <= prev {
                return Err(parse_error(line, format!("date {date} does not follow {prev}")));
            }
        }
        let mut col = Vec::with_capacity(width - 1);
        for (k, cell) in rec.iter().skip(1).enumerate() {
            let v = match cell {
                "" | "NA" | "NaN" | "nan" => None,
                s => {
                    let x: f64 = s
                        .parse()
                        .map_err(|_| parse_error(line, format!("ticker {}: cannot parse {s:?}", tickers[k])))?;
                    if !x.is_finite() {
                        return Err(parse_error(line, format!("ticker {}: non-finite return", tickers[k])));
                    }
                    Some(x)
                }
            };
            col.push(v);
        }
        dates.push(date);
        lines.push(line);
        columns.push(col);
    }
    if dates.is_empty() {
        return Err(Error::Empty("returns file has no data rows".into()));
    }
    let n = tickers.len();
    let mut kept = vec![];
    let mut dropped = vec![];
    for (j, col) in columns.iter().enumerate() {
        if policy == MissingPolicy::DropDate && col.iter().any(Option::is_none) {
            dropped.push((lines[j], dates[j]));
        } else {
            kept.push(j);
        }
    }
    if kept.is_empty() {
        return Err(Error::Empty("every date has a missing value".into()));
    }
    let values = DMatrix::from_fn(n, kept.len(), |i, j| columns[kept[j]][i].unwrap_or(0.0));
    let observed = DMatrix::from_fn(n, kept.len(), |i, j| columns[kept[j]][i].is_some());
    Ok(ReturnsDataset {
        tickers,
        dates: kept.iter().map(|&j| dates[j]).collect(),
        values,
        observed,
        policy,
        dropped,
    })
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

/// Writes the layout read by [`read_returns`]. Values are written in
/// shortest round-trip form, so reading back is bit-exact. Unobserved
/// cells are written empty.
pub fn write_returns<W: Write>(ds: &ReturnsDataset, mut out: W, header: &[String]) -> Result<()> {
    for h in header {
        writeln!(out, "# {h}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    let mut head = vec!["date".to_string()];
    head.extend(ds.tickers.iter().cloned());
    w.write_record(&head)?;
    for j in 0..ds.t() {
        let mut row = vec![ds.dates[j].format("%Y-%m-%d").to_string()];
        for i in 0..ds.n() {
            row.push(if ds.observed[(i, j)] {
                format!("{}", ds.values[(i, j)])
            } else {
                String::new()
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CutoffModel {
    /// Exceedances of `λ` among `N` eigenvalues are Poisson with mean `N(1 - F(λ))`.
    #[default]
    Poisson,
    /// Eigenvalues are independent draws: `F(λ)^N = p`.
    Independent,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalConfig {
    pub window: usize,
    pub step: usize,
    /// Number of top eigenvalues treated as signal.
    pub k_m: usize,
    pub cutoff_probabilities: Vec<f64>,
    pub cutoff_model: CutoffModel,
}

impl EmpiricalConfig {
    pub fn new(window: usize, step: usize, k_m: usize) -> Result<Self> {
        if window == 0 || step == 0 {
            return Err(invalid(format!("window and step must be >= 1 (got {window}, {step})")));
        }
        Ok(Self {
            window,
            step,
            k_m,
            cutoff_probabilities: vec![0.5, 0.9],
            cutoff_model: CutoffModel::Poisson,
        })
    }
}

/// Windows `[t₀, t₀+T)` with `t₀ = 0, step, 2·step, ...`.
pub fn sliding_windows(ds: &ReturnsDataset, cfg: &EmpiricalConfig) -> Result<Vec<ReturnsMatrix>> {
    let (t, w) = (ds.t(), cfg.window);
    if w == 0 || cfg.step == 0 {
        return Err(invalid("window and step must be >= 1"));
    }
    if w > t {
        return Err(invalid(format!("window of {w} dates exceeds the {t} available")));
    }
    let count = (t - w) / cfg.step + 1;
    (0..count)
        .map(|k| ReturnsMatrix::new(ds.values.columns(k * cfg.step, w).into_owned()))
        .collect()
}

/// Demeans each row and scales it to unit variance, so that the Pearson
/// estimator is a correlation matrix with unit diagonal.
pub fn standardize(r: &ReturnsMatrix) -> Result<ReturnsMatrix> {
    let mut v = r.values().clone();
    let t = v.ncols() as f64;
    for (i, mut row) in v.row_iter_mut().enumerate() {
        let mean = row.sum() / t;
        row.add_scalar_mut(-mean);
        let sd = (row.norm_squared() / t).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Singular(format!("row {i} is constant over the window")));
        }
        row /= sd;
    }
    ReturnsMatrix::new(v)
}

/// Removes the `k_m` largest eigenvalues and divides the rest by
/// `1 - Σ_top λ / N`, `N` being the original spectrum size.
pub fn subtract_top_and_renormalize(spectrum: &Spectrum, k_m: usize) -> Result<(Spectrum, f64)> {
    let n = spectrum.len();
    if k_m >= n {
        return Err(invalid(format!("K_m = {k_m} must be below N = {n}")));
    }
    let v = spectrum.values();
    let top: f64 = v[n - k_m..].iter().sum();
    let factor = 1.0 - top / n as f64;
    if !(factor > 0.0) {
        return Err(invalid(format!(
            "top {k_m} eigenvalues carry {top} of the trace, leaving a renormalization factor {factor} <= 0"
        )));
    }
    Ok((Spectrum::new(v[..n - k_m].iter().map(|x| x / factor).collect())?, factor))
}

/// One significance threshold.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Cutoff {
    pub probability: f64,
    pub lambda: f64,
    pub model: CutoffModel,
}

/// Thresholds `λ_p` below which all `N` eigenvalues fall with probability
/// `p`, from the limiting density with power-law tail completion.
pub fn significance_cutoffs(solver: &DosSolver, n: usize, probabilities: &[f64], model: CutoffModel) -> Result<Vec<Cutoff>> {
    if n == 0 {
        return Err(invalid("N must be >= 1"));
    }
    let dist = solver.distribution()?;
    probabilities
        .iter()
        .map(|&p| {
            if !(p > 0.0 && p < 1.0) {
                return Err(invalid(format!("probability must lie in (0, 1) (got {p})")));
            }
            let survival = match model {
                CutoffModel::Poisson => -p.ln() / n as f64,
                CutoffModel::Independent => -(p.ln() / n as f64).exp_m1(),
            };
            Ok(Cutoff {
                probability: p,
                lambda: dist.inverse_survival(survival)?,
                model,
            })
        })
        .collect()
}

/// `η_i^t = x_i^t / sqrt(N⁻¹ Σ_j (x_j^t)²)` with `x_i^t = r_i^t/σ_i^t` and
/// the leave-one-out volatility `σ_i^t = sqrt(Σ_{t'≠t} (r_i^{t'})² / T)`.
/// Dates whose cross-section vanishes are dropped and returned.
pub fn volatility_proxy_rescale(ds: &ReturnsDataset) -> Result<(ReturnsDataset, Vec<NaiveDate>)> {
    let (n, t) = (ds.n(), ds.t());
    if t < 2 {
        return Err(invalid("volatility proxy needs at least two dates"));
    }
    let tf = t as f64;
    let mut x = ds.values.clone();
    for i in 0..n {
        let total: f64 = ds.values.row(i).iter().map(|r| r * r).sum();
        for j in 0..t {
            let r = ds.values[(i, j)];
            let loo = ((total - r * r).max(0.0) / tf).sqrt();
            if !(loo > 0.0) {
                return Err(Error::Singular(format!(
                    "ticker {} has no variation outside date {}",
                    ds.tickers[i], ds.dates[j]
                )));
            }
            x[(i, j)] = r / loo;
        }
    }
    let mut keep = vec![];
    let mut dropped = vec![];
    for j in 0..t {
        let norm = (x.column(j).norm_squared() / n as f64).sqrt();
        if norm > 0.0 {
            x.column_mut(j).scale_mut(1.0 / norm);
            keep.push(j);
        } else {
            dropped.push(ds.dates[j]);
        }
    }
    let mut out = ds.with_columns(&keep);
    out.values = x.select_columns(&keep);
    Ok((out, dropped))
}

/// Synthetic market: Student returns `σ_t L ξ_t` with a one-factor
/// correlation (market mode), daily scale 1%, on consecutive weekdays.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SyntheticMarket {
    pub n: usize,
    pub t: usize,
    pub mu: f64,
    /// Off-diagonal correlation of the one-factor model.
    pub market_correlation: f64,
    pub seed: u64,
}

impl Default for SyntheticMarket {
    fn default() -> Self {
        Self {
            n: 450,
            t: 1125 + 19 * 15,
            mu: 3.85,
            market_correlation: 0.25,
            seed: 2003,
        }
    }
}

pub fn synthetic_market(cfg: &SyntheticMarket) -> Result<ReturnsDataset> {
    let params = EnsembleParams::new(cfg.n, cfg.t, SigmaLaw::student(cfg.mu)?)?;
    let c = CorrelationMatrix::one_factor(cfg.n, cfg.market_correlation)?;
    let l = correlation_factor(&c)?;
    let r = sample_with_factor(&params, &l, &mut sample_rng(cfg.seed, 0));
    let tickers = (0..cfg.n).map(|i| format!("S{i:03}")).collect();
    let mut dates = Vec::with_capacity(cfg.t);
    let mut d = NaiveDate::from_ymd_opt(2003, 1, 2).expect("valid date");
    while dates.len() < cfg.t {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            dates.push(d);
        }
        d += Duration::days(1);
    }
    ReturnsDataset::new(tickers, dates, r.into_values() * 0.01)
}

/// Distance statistics for one `K_m` on pooled window spectra.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KmStatistic {
    pub k_m: usize,
    pub student_distance: f64,
    pub mp_distance: f64,
    pub bulk_mean: f64,
}

/// Output of [`run_protocol`].
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalReport {
    pub n: usize,
    pub window: usize,
    pub windows: usize,
    pub q_ratio: f64,
    pub k_m: usize,
    pub rescaled: bool,
    pub dropped_dates: Vec<String>,
    /// Renormalization factor of each window.
    pub factors: Vec<f64>,
    /// Retained, renormalized eigenvalues of each window.
    pub window_spectra: Vec<Spectrum>,
    /// Pooled retained eigenvalues, ascending.
    pub pooled: Vec<f64>,
    pub bulk_mean: f64,
    pub student_distance: f64,
    pub mp_distance: f64,
    pub cutoffs: Vec<Cutoff>,
    pub km_sweep: Vec<KmStatistic>,
}

/// Windows the data, optionally rescales by the volatility proxy, takes the
/// spectrum of each standardized window, removes the top `K_m` eigenvalues
/// and compares the pooled bulk with the Student density at `Q = T/N` and
/// with Marčenko-Pastur.
pub fn run_protocol(ds: &ReturnsDataset, cfg: &EmpiricalConfig, mu: f64, rescale: bool, sweep: &[usize]) -> Result<EmpiricalReport> {
    let (data, dropped) = if rescale {
        volatility_proxy_rescale(ds)?
    } else {
        (ds.clone(), vec![])
    };
    let n = data.n();
    if cfg.window <= n {
        return Err(invalid(format!("window {} must exceed N = {n}", cfg.window)));
    }
    let windows = sliding_windows(&data, cfg)?;
    let spectra: Vec<Spectrum> = windows
        .par_iter()
        .map(|w| eigenvalues(&pearson_estimator(&standardize(w)?)))
        .collect::<Result<_>>()?;
    let q_ratio = cfg.window as f64 / n as f64;
    let solver = DosSolver::new(SigmaLaw::student(mu)?, q_ratio)?;
    let dist = solver.distribution()?;
    let q = 1.0 / q_ratio;
    let stats = |k: usize| -> Result<(KmStatistic, Vec<Spectrum>, Vec<f64>, Vec<f64>)> {
        let mut pooled = vec![];
        let mut reduced = vec![];
        let mut factors = vec![];
        for s in &spectra {
            let (r, f) = subtract_top_and_renormalize(s, k)?;
            pooled.extend_from_slice(r.values());
            reduced.push(r);
            factors.push(f);
        }
        pooled.sort_by(f64::total_cmp);
        let err = RefCell::new(None);
        let student = sup_cdf_distance(&pooled, |x| {
            dist.cdf(x).unwrap_or_else(|e| {
                err.borrow_mut().get_or_insert(e);
                0.0
            })
        });
        if let Some(e) = err.into_inner() {
            return Err(e);
        }
        let mp = sup_cdf_distance(&pooled, |x| mp_cdf(x, q).unwrap_or(0.0));
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        Ok((
            KmStatistic {
                k_m: k,
                student_distance: student,
                mp_distance: mp,
                bulk_mean: mean,
            },
            reduced,
            pooled,
            factors,
        ))
    };
    let (main, window_spectra, pooled, factors) = stats(cfg.k_m)?;
    let km_sweep = sweep.iter().map(|&k| stats(k).map(|s| s.0)).collect::<Result<_>>()?;
    let cutoffs = significance_cutoffs(&solver, n, &cfg.cutoff_probabilities, cfg.cutoff_model)?;
    Ok(EmpiricalReport {
        n,
        window: cfg.window,
        windows: spectra.len(),
        q_ratio,
        k_m: cfg.k_m,
        rescaled: rescale,
        dropped_dates: dropped.iter().map(|d| d.to_string()).collect(),
        factors,
        window_spectra,
        pooled,
        bulk_mean: main.bulk_mean,
        student_distance: main.student_distance,
        mp_distance: main.mp_distance,
        cutoffs,
        km_sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const SMALL: &str = "date,AAA,BBB\n2004-01-02,0.01,-0.02\n2004-01-05,0.003,0.004\n2004-01-06,-0.01,0.0\n";

    #[test]
    fn reads_well_formed_file() {
        let ds = read_returns(SMALL.as_bytes(), MissingPolicy::DropDate).unwrap();
        assert_eq!(ds.tickers, vec!["AAA", "BBB"]);
        assert_eq!((ds.n(), ds.t()), (2, 3));
        assert_eq!(ds.values[(1, 0)], -0.02);
        assert!(ds.dropped.is_empty());
    }

    #[test]
    fn missing_cell_policies() {
        let text = "date,AAA,BBB\n2004-01-02,0.01,-0.02\n2004-01-05,,0.004\n2004-01-06,-0.01,0.0\n";
        let ds = read_returns(text.as_bytes(), MissingPolicy::DropDate).unwrap();
        assert_eq!((ds.n(), ds.t()), (2, 2));
        assert_eq!(ds.dropped, vec![(3, NaiveDate::from_ymd_opt(2004, 1, 5).unwrap())]);
        let ds = read_returns(text.as_bytes(), MissingPolicy::ZeroFill).unwrap();
        assert_eq!((ds.n(), ds.t()), (2, 3));
        assert_eq!(ds.values[(0, 1)], 0.0);
        assert!(!ds.observed[(0, 1)]);
    }

    #[test]
    fn malformed_input_reports_line() {
        let ragged = "date,AAA,BBB\n2004-01-02,0.01,-0.02\n2004-01-05,0.1\n";
        assert!(matches!(read_returns(ragged.as_bytes(), MissingPolicy::DropDate), Err(Error::Parse { line: 3, .. })));
        let order = "date,AAA\n2004-01-05,0.01\n2004-01-02,0.02\n";
        assert!(matches!(read_returns(order.as_bytes(), MissingPolicy::DropDate), Err(Error::Parse { line: 3, .. })));
        let bad = "date,AAA\n2004-01-05,abc\n";
        assert!(matches!(read_returns(bad.as_bytes(), MissingPolicy::DropDate), Err(Error::Parse { line: 2, .. })));
        let date = "date,AAA\n05/01/2004,0.1\n";
        assert!(matches!(read_returns(date.as_bytes(), MissingPolicy::DropDate), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn synthetic_file_round_trips() {
        let ds = synthetic_market(&SyntheticMarket {
            n: 7,
            t: 40,
            ..Default::default()
        })
        .unwrap();
        let mut buf = vec![];
        write_returns(&ds, &mut buf, &["seed=2003".into()]).unwrap();
        let back = read_returns(buf.as_slice(), MissingPolicy::DropDate).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn window_counts() {
        let ds = synthetic_market(&SyntheticMarket {
            n: 2,
            t: 1125 + 19 * 15,
            ..Default::default()
        })
        .unwrap();
        let cfg = EmpiricalConfig::new(1125, 15, 0).unwrap();
        assert_eq!(sliding_windows(&ds, &cfg).unwrap().len(), 20);
        let disjoint = sliding_windows(&ds, &EmpiricalConfig::new(100, 100, 0).unwrap()).unwrap();
        assert_eq!(disjoint.len(), 14);
        assert_eq!(disjoint[1].values()[(0, 0)], ds.values[(0, 100)]);
        let whole = sliding_windows(&ds, &EmpiricalConfig::new(ds.t(), 7, 0).unwrap()).unwrap();
        assert_eq!(whole.len(), 1);
        assert!(sliding_windows(&ds, &EmpiricalConfig::new(ds.t() + 1, 1, 0).unwrap()).is_err());
    }

    #[test]
    fn top_subtraction_examples() {
        let s = Spectrum::new(vec![0.2, 0.8, 2.0]).unwrap();
        let (r, f) = subtract_top_and_renormalize(&s, 0).unwrap();
        assert_eq!(f, 1.0);
        assert_eq!(r, s);
        let degenerate = Spectrum::new(vec![0.5, 0.5, 3.0]).unwrap();
        assert!(subtract_top_and_renormalize(&degenerate, 1).is_err());
        assert!(subtract_top_and_renormalize(&s, 3).is_err());
    }

    #[test]
    fn market_mode_removal_restores_unit_bulk_mean() {
        let ds = synthetic_market(&SyntheticMarket {
            n: 100,
            t: 400,
            mu: 8.0,
            market_correlation: 0.3,
            seed: 5,
        })
        .unwrap();
        let w = ReturnsMatrix::new(ds.values.clone()).unwrap();
        let spectrum = eigenvalues(&pearson_estimator(&standardize(&w).unwrap())).unwrap();
        let (bulk, _) = subtract_top_and_renormalize(&spectrum, 1).unwrap();
        let mean = bulk.values().iter().sum::<f64>() / bulk.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn cutoffs_are_ordered_and_grow_with_probability() {
        let solver = DosSolver::new(SigmaLaw::student(4.0).unwrap(), 2.5).unwrap();
        let c = significance_cutoffs(&solver, 450, &[0.5, 0.9, 0.99, 0.999], CutoffModel::Poisson).unwrap();
        for w in c.windows(2) {
            assert!(w[1].lambda > w[0].lambda);
        }
        let ind = significance_cutoffs(&solver, 450, &[0.5, 0.9], CutoffModel::Independent).unwrap();
        assert!((ind[0].lambda / c[0].lambda - 1.0).abs() < 1e-3);
        assert!(significance_cutoffs(&solver, 450, &[1.0], CutoffModel::Poisson).is_err());
    }

    #[test]
    fn rescaling_normalizes_every_date() {
        let ds = synthetic_market(&SyntheticMarket {
            n: 30,
            t: 200,
            ..Default::default()
        })
        .unwrap();
        let (r, dropped) = volatility_proxy_rescale(&ds).unwrap();
        assert!(dropped.is_empty());
        for col in r.values.column_iter() {
            assert_abs_diff_eq!(col.norm_squared() / 30.0, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rescaling_drops_silent_dates() {
        let mut ds = synthetic_market(&SyntheticMarket {
            n: 4,
            t: 20,
            ..Default::default()
        })
        .unwrap();
        ds.values.column_mut(3).fill(0.0);
        let (r, dropped) = volatility_proxy_rescale(&ds).unwrap();
        assert_eq!(dropped, vec![ds.dates[3]]);
        assert_eq!(r.t(), 19);
    }

    #[test]
    fn constant_volatility_rescaling_is_near_identity() {
        let t = 2000;
        let params = EnsembleParams::new(20, t, SigmaLaw::DeltaGaussian).unwrap();
        let r = crate::ensemble::sample_returns(&params, &CorrelationMatrix::identity(20), &mut sample_rng(3, 0)).unwrap();
        let dates = (0..t).map(|k| NaiveDate::from_ymd_opt(2000, 1, 1).unwrap() + Duration::days(k as i64)).collect();
        let ds = ReturnsDataset::new((0..20).map(|i| i.to_string()).collect(), dates, r.into_values()).unwrap();
        let (out, _) = volatility_proxy_rescale(&ds).unwrap();
        // per-stock proxy within O(1/√T); the cross-sectional norm adds O(1/√N) per date
        let ratio: Vec<f64> = (0..20)
            .map(|i| {
                let a: f64 = out.values.row(i).iter().zip(ds.values.row(i).iter()).map(|(x, y)| x * y).sum();
                a / ds.values.row(i).norm_squared()
            })
            .collect();
        for x in ratio {
            assert!((x - 1.0).abs() < 3.0 / (t as f64).sqrt(), "{x}");
        }
    }

    #[test]
    fn rescaling_moves_student_spectrum_toward_mp() {
        let ds = synthetic_market(&SyntheticMarket {
            n: 100,
            t: 250,
            mu: 3.0,
            market_correlation: 0.0,
            seed: 9,
        })
        .unwrap();
        let cfg = EmpiricalConfig::new(250, 250, 0).unwrap();
        let raw = run_protocol(&ds, &cfg, 3.0, false, &[]).unwrap();
        let scaled = run_protocol(&ds, &cfg, 3.0, true, &[]).unwrap();
        assert!(scaled.mp_distance < raw.mp_distance, "{} vs {}", scaled.mp_distance, raw.mp_distance);
    }

    #[test]
    fn protocol_is_deterministic() {
        let ds = synthetic_market(&SyntheticMarket {
            n: 40,
            t: 160,
            ..Default::default()
        })
        .unwrap();
        let cfg = EmpiricalConfig::new(100, 30, 1).unwrap();
        let a = run_protocol(&ds, &cfg, 4.0, true, &[1, 2]).unwrap();
        let b = run_protocol(&ds, &cfg, 4.0, true, &[1, 2]).unwrap();
        assert_eq!(a.pooled, b.pooled);
        assert_eq!(a.student_distance.to_bits(), b.student_distance.to_bits());
        assert_eq!(a.windows, 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rescaled_columns_have_unit_second_moment(seed in any::<u64>(), n in 2usize..12) {
            let ds = synthetic_market(&SyntheticMarket { n, t: 30, mu: 3.5, market_correlation: 0.2, seed }).unwrap();
            let (r, _) = volatility_proxy_rescale(&ds).unwrap();
            for col in r.values.column_iter() {
                prop_assert!((col.norm_squared() / n as f64 - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn renormalized_trace_is_preserved(values in proptest::collection::vec(0.01f64..3.0, 3..20), k in 0usize..2) {
            let s = Spectrum::new(values).unwrap();
            let n = s.len() as f64;
            if let Ok((r, f)) = subtract_top_and_renormalize(&s, k) {
                let total: f64 = s.values().iter().sum();
                let top: f64 = s.values()[s.len() - k..].iter().sum();
                prop_assert!((r.values().iter().sum::<f64>() * f - (total - top)).abs() < 1e-9 * total);
                prop_assert!(f > 0.0 && f <= 1.0 - top / n + 1e-15);
            }
        }
    }
}
