use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;
use student_rmt::dos::{dos_curve, mp_cdf, mp_density, CurveConfig, DosSolver};
use student_rmt::empirical::{
    load_returns, run_protocol, synthetic_market, write_returns, CutoffModel, EmpiricalConfig, MissingPolicy,
    SyntheticMarket,
};
use student_rmt::ensemble::{sample_spectra, sup_cdf_distance, CorrelationMatrix, EnsembleParams, Spectrum};
use student_rmt::kl::kl_table as compute_table;
use student_rmt::mle::{sample_mle_spectra, MLEConfig};
use student_rmt::SigmaLaw;

use crate::output::{density_histogram, quantile, resolve_out, series_csv, sibling, write_file, write_sidecar, RunManifest};
use crate::{
    CliError, CutoffKind, DosArgs, EmpiricalArgs, EstimatorKind, KlTableArgs, MissingKind, SampleArgs, SynthArgs,
};

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "none".to_string(), |v| format!("{v}"))
}

pub fn dos(a: DosArgs) -> Result<Vec<PathBuf>, CliError> {
    let start = Instant::now();
    let law = a.law.law()?;
    let manifest = RunManifest::new("dos", &a, None)?;
    let solver = DosSolver::new(law, a.q)?;
    let grid = match &a.lambda_range {
        Some(r) => {
            let [lo, hi] = r[..] else {
                return Err(CliError::Usage("--lambda-range takes two values lo,hi".into()));
            };
            if !(lo > 0.0 && hi > lo) || a.points < 2 {
                return Err(CliError::Usage("--lambda-range needs 0 < lo < hi and --points >= 2".into()));
            }
            (0..a.points)
                .map(|i| lo + (hi - lo) * i as f64 / (a.points - 1) as f64)
                .collect()
        }
        None => solver.default_grid(a.points)?,
    };
    let cfg = CurveConfig {
        exact_tail: a.exact_tail,
        ..CurveConfig::default()
    };
    let curve = dos_curve(&solver, &grid, &cfg)?;
    let mut header = manifest.header();
    header.push(format!("left_edge: {}", curve.left_edge));
    header.push(format!("right_edge: {}", fmt_opt(curve.right_edge)));
    header.push(format!("lambda_cut: {}", fmt_opt(curve.lambda_cut)));
    header.push(format!("tail_prefactor: {}", fmt_opt(curve.tail_prefactor)));
    header.push(format!("tail_exponent: {}", fmt_opt(curve.tail_exponent)));
    let mut buf = vec![];
    curve.write_csv(&mut buf, &header)?;
    let path = resolve_out(a.out.clone(), "dos.csv");
    write_file(&path, &buf)?;
    let side = write_sidecar(
        &path,
        &manifest,
        start.elapsed(),
        json!({
            "left_edge": curve.left_edge,
            "right_edge": curve.right_edge,
            "lambda_cut": curve.lambda_cut,
            "mass_on_grid": curve.mass(),
            "mean_on_grid": curve.mean(),
        }),
    )?;
    Ok(vec![path, side])
}

pub fn sample(a: SampleArgs) -> Result<Vec<PathBuf>, CliError> {
    let start = Instant::now();
    let law = a.law.law()?;
    if a.n == 0 || !(a.q > 0.0) || a.samples == 0 || a.bins == 0 {
        return Err(CliError::Usage("--N, --Q, --samples and --bins must be positive".into()));
    }
    let t = (a.q * a.n as f64).round() as usize;
    let params = EnsembleParams::new(a.n, t, law)?;
    let manifest = RunManifest::new("sample", &a, Some(a.seed))?;
    let identity = CorrelationMatrix::identity(a.n);
    let spectra: Vec<Spectrum> = match a.estimator {
        EstimatorKind::Pearson => sample_spectra(&params, &identity, a.samples, a.seed)?,
        EstimatorKind::Mle => {
            let SigmaLaw::StudentInverseGamma { mu } = law else {
                return Err(CliError::Usage("--estimator mle needs --law student".into()));
            };
            sample_mle_spectra(&params, &identity, &MLEConfig::new(mu)?, a.samples, a.seed)?
        }
    };
    let mut pooled: Vec<f64> = spectra.into_iter().flat_map(Spectrum::into_values).collect();
    pooled.sort_by(f64::total_cmp);
    let q_ratio = t as f64 / a.n as f64;
    let hi = a.max_lambda.unwrap_or_else(|| quantile(&pooled, 0.995));
    if !(hi > 0.0) {
        return Err(CliError::Usage("--max-lambda must be positive".into()));
    }

    // The Pearson estimator follows the density of its own volatility law;
    // the MLE removes the volatility and follows Marčenko-Pastur.
    let (analytic_name, analytic, distance) = match a.estimator {
        EstimatorKind::Pearson => {
            let solver = DosSolver::new(law, q_ratio)?;
            let dist = solver.distribution()?;
            let d = sup_cdf_distance(&pooled, |x| dist.cdf(x).unwrap_or(f64::NAN));
            ("density", Some(solver), d)
        }
        EstimatorKind::Mle => {
            let q = 1.0 / q_ratio;
            ("mp", None, sup_cdf_distance(&pooled, |x| mp_cdf(x, q).unwrap_or(f64::NAN)))
        }
    };
    if !distance.is_finite() {
        return Err(CliError::Failure("analytic distribution could not be evaluated".into()));
    }
    let max_eigenvalue = *pooled.last().unwrap();
    let count = pooled.len();
    let (centers, density) = density_histogram(pooled, a.bins, hi)?;
    let reference: Vec<f64> = match &analytic {
        Some(solver) => dos_curve(solver, &centers, &CurveConfig::default())?
            .points
            .iter()
            .map(|p| p.rho)
            .collect(),
        None => centers
            .iter()
            .map(|&x| mp_density(x, 1.0 / q_ratio))
            .collect::<Result<_, _>>()?,
    };
    let mut header = manifest.header();
    header.push(format!("T: {t}"));
    header.push(format!("eigenvalues: {count}"));
    header.push(format!("sup_cdf_distance_to_{analytic_name}: {distance}"));
    header.push(format!("max_eigenvalue: {max_eigenvalue}"));
    let text = series_csv(
        &header,
        &[("histogram", &centers, &density), (analytic_name, &centers, &reference)],
    );
    let path = resolve_out(a.out.clone(), "sample.csv");
    write_file(&path, text.as_bytes())?;
    let side = write_sidecar(
        &path,
        &manifest,
        start.elapsed(),
        json!({
            "T": t,
            "eigenvalues": count,
            "reference": analytic_name,
            "sup_cdf_distance": distance,
            "max_eigenvalue": max_eigenvalue,
        }),
    )?;
    Ok(vec![path, side])
}

pub fn kl_table(a: KlTableArgs) -> Result<Vec<PathBuf>, CliError> {
    let start = Instant::now();
    let manifest = RunManifest::new("kl-table", &a, None)?;
    let table = compute_table(&a.mu_list, &a.q_list)?;
    let mut text = crate::output::header_block(&manifest.header());
    text.push_str("mu,quantity");
    for q in &a.q_list {
        text.push_str(&format!(",Q={q}"));
    }
    text.push('\n');
    let mut cells = vec![];
    for (mu, row) in a.mu_list.iter().zip(&table) {
        for (label, pick) in [("Z/N", 0), ("Z'/N", 1)] {
            text.push_str(&format!("{mu},{label}"));
            for cell in row {
                let v = if pick == 0 { cell.z_over_n } else { cell.zprime_over_n };
                text.push_str(&format!(",{v:.9}"));
            }
            text.push('\n');
        }
        for cell in row {
            cells.push(json!({
                "mu": mu.to_string(),
                "Q": cell.q_ratio,
                "z_over_n": cell.z_over_n,
                "zprime_over_n": cell.zprime_over_n,
            }));
        }
    }
    let path = resolve_out(a.out.clone(), "kl_table.csv");
    write_file(&path, text.as_bytes())?;

    // one block per μ, rows Z/N and Z'/N, columns Q
    let mut aligned = crate::output::header_block(&manifest.header());
    for (mu, row) in a.mu_list.iter().zip(&table) {
        aligned.push_str(&format!("\n{:<8}", format!("mu={mu}")));
        for q in &a.q_list {
            aligned.push_str(&format!(" {:>10}", format!("Q={q}")));
        }
        aligned.push('\n');
        for (label, pick) in [("Z/N", 0), ("Z'/N", 1)] {
            aligned.push_str(&format!("{label:<8}"));
            for cell in row {
                let v = if pick == 0 { cell.z_over_n } else { cell.zprime_over_n };
                aligned.push_str(&format!(" {v:>10.6}"));
            }
            aligned.push('\n');
        }
    }
    let text_path = sibling(&path, ".txt");
    write_file(&text_path, aligned.as_bytes())?;
    let side = write_sidecar(&path, &manifest, start.elapsed(), json!({ "cells": cells }))?;
    Ok(vec![path, text_path, side])
}

pub fn empirical(a: EmpiricalArgs) -> Result<Vec<PathBuf>, CliError> {
    let start = Instant::now();
    let manifest = RunManifest::new("empirical", &a, None)?;
    let policy = match a.missing {
        MissingKind::DropDate => MissingPolicy::DropDate,
        MissingKind::ZeroFill => MissingPolicy::ZeroFill,
    };
    let ds = load_returns(&a.input, policy).map_err(|e| match CliError::from(e) {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", a.input.display())),
        CliError::Failure(m) => CliError::Failure(format!("{}: {m}", a.input.display())),
    })?;
    let mut cfg = EmpiricalConfig::new(a.window, a.step, a.km)?;
    cfg.cutoff_probabilities = a.cutoff_probs.clone();
    cfg.cutoff_model = match a.cutoff_model {
        CutoffKind::Poisson => CutoffModel::Poisson,
        CutoffKind::Independent => CutoffModel::Independent,
    };
    let sweep: Vec<usize> = if a.km_sweep {
        (2..=10).filter(|&k| k < ds.n()).collect()
    } else {
        vec![]
    };
    let report = run_protocol(&ds, &cfg, a.mu, a.rescale_volatility, &sweep)?;

    let hi = quantile(&report.pooled, 0.995);
    let (centers, density) = density_histogram(report.pooled.clone(), a.bins.max(1), hi)?;
    let solver = DosSolver::new(SigmaLaw::student(a.mu)?, report.q_ratio)?;
    let student: Vec<f64> = dos_curve(&solver, &centers, &CurveConfig::default())?
        .points
        .iter()
        .map(|p| p.rho)
        .collect();
    let mp: Vec<f64> = centers
        .iter()
        .map(|&x| mp_density(x, 1.0 / report.q_ratio))
        .collect::<Result<_, _>>()?;

    let mut header = manifest.header();
    header.push(format!("N: {}", report.n));
    header.push(format!("windows: {}", report.windows));
    header.push(format!("Q: {}", report.q_ratio));
    header.push(format!("dropped_dates: {}", ds.dropped.len() + report.dropped_dates.len()));
    header.push(format!("bulk_mean: {}", report.bulk_mean));
    header.push(format!("sup_cdf_distance_to_student: {}", report.student_distance));
    header.push(format!("sup_cdf_distance_to_mp: {}", report.mp_distance));
    for c in &report.cutoffs {
        header.push(format!("cutoff: p={} lambda={} model={:?}", c.probability, c.lambda, c.model));
    }
    for s in &report.km_sweep {
        header.push(format!(
            "km_sweep: K_m={} student={} mp={} bulk_mean={}",
            s.k_m, s.student_distance, s.mp_distance, s.bulk_mean
        ));
    }
    let text = series_csv(
        &header,
        &[("histogram", &centers, &density), ("student", &centers, &student), ("mp", &centers, &mp)],
    );
    let path = resolve_out(a.out.clone(), "empirical.csv");
    write_file(&path, text.as_bytes())?;

    let mut windows = crate::output::header_block(&manifest.header());
    windows.push_str("window,start_date,factor,lambda\n");
    for (k, (spectrum, f)) in report.window_spectra.iter().zip(&report.factors).enumerate() {
        let date = ds.dates.get(k * a.step).map(|d| d.to_string()).unwrap_or_default();
        for x in spectrum.values() {
            windows.push_str(&format!("{k},{date},{f},{x:e}\n"));
        }
    }
    let windows_path = sibling(&path, ".windows.csv");
    write_file(&windows_path, windows.as_bytes())?;

    let dropped: Vec<_> = ds
        .dropped
        .iter()
        .map(|(line, d)| json!({ "line": line, "date": d.to_string(), "reason": "missing value" }))
        .chain(
            report
                .dropped_dates
                .iter()
                .map(|d| json!({ "date": d, "reason": "zero cross-section after rescaling" })),
        )
        .collect();
    let side = write_sidecar(
        &path,
        &manifest,
        start.elapsed(),
        json!({
            "N": report.n,
            "dates": ds.t(),
            "windows": report.windows,
            "Q": report.q_ratio,
            "K_m": report.k_m,
            "rescaled": report.rescaled,
            "bulk_mean": report.bulk_mean,
            "factors": report.factors,
            "sup_cdf_distance_to_student": report.student_distance,
            "sup_cdf_distance_to_mp": report.mp_distance,
            "cutoffs": report.cutoffs,
            "km_sweep": report.km_sweep,
            "dropped": dropped,
        }),
    )?;
    Ok(vec![path, windows_path, side])
}

pub fn synth(a: SynthArgs) -> Result<Vec<PathBuf>, CliError> {
    let start = Instant::now();
    let manifest = RunManifest::new("synth", &a, Some(a.seed))?;
    let ds = synthetic_market(&SyntheticMarket {
        n: a.n,
        t: a.t,
        mu: a.mu,
        market_correlation: a.market_correlation,
        seed: a.seed,
    })?;
    let mut buf = vec![];
    write_returns(&ds, &mut buf, &manifest.header())?;
    let path = resolve_out(a.out.clone(), "synthetic_returns.csv");
    write_file(&path, &buf)?;
    let side = write_sidecar(&path, &manifest, start.elapsed(), json!({ "N": ds.n(), "T": ds.t() }))?;
    Ok(vec![path, side])
}
