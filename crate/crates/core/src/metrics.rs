//! Calibration and accuracy metrics, work-precision sweeps and their CSV form.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::baseline::{dp5_solve_with, Reference};
use crate::control::ControllerConfig;
use crate::error::{Error, Result};
use crate::gaussian::marginal_covariance;
use crate::problems::IvProblem;
use crate::solver::{solve_adaptive, OdePosterior, Outcome, SolverSpec};

/// Added to every marginal covariance before inversion.
pub const COVARIANCE_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2Report {
    pub statistic: f64,
    pub d: usize,
    pub n_points: usize,
    /// 99% interval of the mean of `n_points` independent χ²_d variables.
    pub band_low: f64,
    pub band_high: f64,
}

impl Chi2Report {
    pub fn within_band(&self) -> bool {
        self.statistic >= self.band_low && self.statistic <= self.band_high
    }
}

/// `(1/N) χ²_{N d}` quantiles at 0.5% and 99.5%.
pub fn chi2_band(d: usize, n: usize) -> (f64, f64) {
    let dist = ChiSquared::new((n * d) as f64).expect("positive degrees of freedom");
    (dist.inverse_cdf(0.005) / n as f64, dist.inverse_cdf(0.995) / n as f64)
}

/// Average Mahalanobis norm of residuals under their covariances. Points whose
/// (floored) covariance is not positive definite are skipped.
pub fn chi_square_from(residuals: &[DVector<f64>], covariances: &[DMatrix<f64>]) -> Result<Chi2Report> {
    if residuals.len() != covariances.len() {
        return Err(Error::Dimension(format!(
            "{} residuals but {} covariances",
            residuals.len(),
            covariances.len()
        )));
    }
    let d = residuals.first().map_or(0, |r| r.len());
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, cov) in residuals.iter().zip(covariances) {
        let floored = cov + DMatrix::identity(d, d) * COVARIANCE_FLOOR;
        let Some(chol) = floored.cholesky() else {
            continue;
        };
        let w = chol
            .l()
            .solve_lower_triangular(r)
            .expect("cholesky factor is invertible");
        total += w.norm_squared();
        n += 1;
    }
    if n == 0 || d == 0 {
        return Err(Error::AllSingular);
    }
    let (band_low, band_high) = chi2_band(d, n);
    Ok(Chi2Report {
        statistic: total / n as f64,
        d,
        n_points: n,
        band_low,
        band_high,
    })
}

/// χ² of the solution marginals (smoothed if available) against `reference`
/// values on the posterior grid. The initial node is excluded.
pub fn chi_square(posterior: &OdePosterior, reference: &[DVector<f64>]) -> Result<Chi2Report> {
    if reference.len() != posterior.len() {
        return Err(Error::Dimension(format!(
            "reference has {} points, posterior grid has {}",
            reference.len(),
            posterior.len()
        )));
    }
    let d = posterior.dim();
    let states = posterior.states();
    let mut residuals = Vec::with_capacity(states.len());
    let mut covs = Vec::with_capacity(states.len());
    for (s, y) in states.iter().zip(reference).skip(1) {
        residuals.push(s.mean.rows(0, d) - y);
        covs.push(marginal_covariance(s, d));
    }
    chi_square_from(&residuals, &covs)
}

/// A least-squares log-log slope and how many pairs were unusable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub excluded: usize,
}

/// Fits `log y = slope · log x + c`, skipping pairs with non-positive or
/// non-finite entries.
pub fn loglog_fit(pairs: &[(f64, f64)]) -> Result<OrderFit> {
    let usable: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite() && *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let excluded = pairs.len() - usable.len();
    if usable.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 usable pairs, got {} ({excluded} excluded)",
            usable.len()
        )));
    }
    let n = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Degenerate("abscissae are not distinct".into()));
    }
    let slope = sxy / sxx;
    Ok(OrderFit {
        slope,
        intercept: my - slope * mx,
        excluded,
    })
}

/// Slope of `log(error)` against `log(h)`.
pub fn empirical_order(pairs: &[(f64, f64)]) -> Result<f64> {
    loglog_fit(pairs).map(|f| f.slope)
}

/// A solver to benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Filter(SolverSpec),
    Dp5,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Filter(s) => s.algorithm(),
            Algorithm::Dp5 => "dp5",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::Filter(s) => s.fmt(f),
            Algorithm::Dp5 => f.write_str("dp5"),
        }
    }
}

/// One cell of a work-precision sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkPrecisionRecord {
    pub problem: String,
    pub algorithm: String,
    pub order: usize,
    /// Empty for the Runge–Kutta baseline.
    pub diffusion: String,
    pub tau_abs: f64,
    pub tau_rel: f64,
    /// Euclidean error at `T`; absent when the solve failed.
    pub final_error: Option<f64>,
    pub f_evals: usize,
    pub jac_evals: usize,
    pub steps: usize,
    pub rejected: usize,
    pub chi2: Option<f64>,
    pub outcome: Outcome,
    /// Only recorded on request, so that output is reproducible by default.
    pub wall_time: Option<f64>,
}

impl WorkPrecisionRecord {
    pub fn evaluations(&self) -> usize {
        self.f_evals + self.jac_evals
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Worker threads; `0` uses the rayon default.
    pub jobs: usize,
    pub timing: bool,
    /// Budget of attempted steps per solve.
    pub max_steps: Option<usize>,
}

/// Paired ladder `τ_abs = 10^{-k}`, `τ_rel = 10³ τ_abs` for `k` from `a` to `b`.
pub fn tolerance_ladder(from_exp: i32, to_exp: i32) -> Vec<(f64, f64)> {
    let (lo, hi) = (from_exp.min(to_exp), from_exp.max(to_exp));
    (lo..=hi)
        .map(|k| {
            let abs: f64 = format!("1e{}", -k).parse().unwrap();
            let rel: f64 = format!("1e{}", 3 - k).parse().unwrap();
            (abs, rel)
        })
        .collect()
}

fn outcome_of(e: &Error) -> Outcome {
    match e {
        Error::NonFinite(_) | Error::SingularInnovation => Outcome::NonFiniteState,
        Error::MaxSteps(_) => Outcome::MaxStepsExceeded,
        _ => Outcome::MinStepFailure,
    }
}

fn run_cell(
    problem: &IvProblem,
    reference: &Reference,
    end_value: &DVector<f64>,
    alg: Algorithm,
    (tau_abs, tau_rel): (f64, f64),
    opts: &SweepOptions,
) -> Result<(WorkPrecisionRecord, Option<Chi2Report>)> {
    let cfg = ControllerConfig {
        max_steps: opts.max_steps,
        ..ControllerConfig::with_tolerances(tau_abs, tau_rel)
    };
    let started = Instant::now();
    let mut rec = WorkPrecisionRecord {
        problem: problem.name().to_string(),
        algorithm: alg.name().to_string(),
        order: 5,
        diffusion: String::new(),
        tau_abs,
        tau_rel,
        final_error: None,
        f_evals: 0,
        jac_evals: 0,
        steps: 0,
        rejected: 0,
        chi2: None,
        outcome: Outcome::Success,
        wall_time: None,
    };
    let mut report = None;
    match alg {
        Algorithm::Dp5 => match dp5_solve_with(problem, &cfg) {
            Ok(traj) => {
                rec.final_error = Some((traj.final_value() - end_value).norm());
                rec.f_evals = traj.stats.f_evals;
                rec.steps = traj.stats.steps_accepted;
                rec.rejected = traj.stats.steps_rejected;
            }
            Err(e) => rec.outcome = outcome_of(&e),
        },
        Algorithm::Filter(spec) => {
            rec.order = spec.q;
            rec.diffusion = spec.diffusion.to_string();
            let (post, diag) = solve_adaptive(problem, spec, &cfg)?;
            rec.outcome = diag.outcome;
            rec.f_evals = post.stats.f_evals;
            rec.jac_evals = post.stats.jac_evals;
            rec.steps = post.stats.steps_accepted;
            rec.rejected = post.stats.steps_rejected;
            if diag.is_success() {
                rec.final_error = Some((post.final_mean() - end_value).norm());
                let values: Result<Vec<_>> = post.times.iter().map(|&t| reference.at(t)).collect();
                report = chi_square(&post, &values?).ok();
                rec.chi2 = report.map(|c| c.statistic);
            }
        }
    }
    if opts.timing {
        rec.wall_time = Some(started.elapsed().as_secs_f64());
    }
    Ok((rec, report))
}

fn validate_sweep(algorithms: &[Algorithm], ladder: &[(f64, f64)]) -> Result<()> {
    for alg in algorithms {
        if let Algorithm::Filter(spec) = alg {
            spec.validate()?;
        }
    }
    for &(a, r) in ladder {
        ControllerConfig::with_tolerances(a, r).validate()?;
    }
    Ok(())
}

fn sweep(
    problem: &IvProblem,
    reference: &Reference,
    algorithms: &[Algorithm],
    ladder: &[(f64, f64)],
    opts: &SweepOptions,
) -> Result<Vec<(WorkPrecisionRecord, Option<Chi2Report>)>> {
    let end_value = reference.at(problem.t1())?;
    let cells: Vec<(Algorithm, (f64, f64))> = algorithms
        .iter()
        .flat_map(|&a| ladder.iter().map(move |&tol| (a, tol)))
        .collect();
    let run = || -> Result<Vec<_>> {
        cells
            .par_iter()
            .map(|&(alg, tol)| run_cell(problem, reference, &end_value, alg, tol, opts))
            .collect()
    };
    if opts.jobs == 0 {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run)
    }
}

/// Runs every (algorithm, tolerance) cell, in parallel, and returns records in
/// algorithm-major, ladder-minor order. Solve failures are recorded in the
/// outcome column; configuration errors abort before any solve.
pub fn work_precision(
    problem: &IvProblem,
    algorithms: &[Algorithm],
    ladder: &[(f64, f64)],
    opts: &SweepOptions,
) -> Result<Vec<WorkPrecisionRecord>> {
    validate_sweep(algorithms, ladder)?;
    let reference = Reference::for_problem(problem)?;
    work_precision_against(problem, &reference, algorithms, ladder, opts)
}

/// As [`work_precision`] with a precomputed reference.
pub fn work_precision_against(
    problem: &IvProblem,
    reference: &Reference,
    algorithms: &[Algorithm],
    ladder: &[(f64, f64)],
    opts: &SweepOptions,
) -> Result<Vec<WorkPrecisionRecord>> {
    validate_sweep(algorithms, ladder)?;
    let cells = sweep(problem, reference, algorithms, ladder, opts)?;
    Ok(cells.into_iter().map(|(r, _)| r).collect())
}

/// χ² calibration of one solve, with the 99% band for its number of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub problem: String,
    pub algorithm: String,
    pub order: usize,
    pub diffusion: String,
    pub tau_abs: f64,
    pub tau_rel: f64,
    pub final_error: Option<f64>,
    pub chi2: Option<f64>,
    /// Grid points entering the statistic.
    pub n_points: usize,
    pub band_low: Option<f64>,
    pub band_high: Option<f64>,
    pub outcome: Outcome,
}

impl CalibrationRecord {
    pub fn within_band(&self) -> Option<bool> {
        match (self.chi2, self.band_low, self.band_high) {
            (Some(c), Some(lo), Some(hi)) => Some(c >= lo && c <= hi),
            _ => None,
        }
    }
}

/// χ² statistics of every (solver, tolerance) cell against the problem reference.
pub fn calibration_report(
    problem: &IvProblem,
    specs: &[SolverSpec],
    ladder: &[(f64, f64)],
    opts: &SweepOptions,
) -> Result<Vec<CalibrationRecord>> {
    let algorithms: Vec<_> = specs.iter().map(|&s| Algorithm::Filter(s)).collect();
    validate_sweep(&algorithms, ladder)?;
    let reference = Reference::for_problem(problem)?;
    let cells = sweep(problem, &reference, &algorithms, ladder, opts)?;
    Ok(cells
        .into_iter()
        .map(|(r, c)| CalibrationRecord {
            problem: r.problem,
            algorithm: r.algorithm,
            order: r.order,
            diffusion: r.diffusion,
            tau_abs: r.tau_abs,
            tau_rel: r.tau_rel,
            final_error: r.final_error,
            chi2: r.chi2,
            n_points: c.map_or(0, |c| c.n_points),
            band_low: c.map(|c| c.band_low),
            band_high: c.map(|c| c.band_high),
            outcome: r.outcome,
        })
        .collect())
}

pub const CSV_HEADER: [&str; 14] = [
    "problem",
    "algorithm",
    "order",
    "diffusion",
    "abstol",
    "reltol",
    "error",
    "fevals",
    "jacevals",
    "steps",
    "rejected",
    "chi2",
    "outcome",
    "wall_s",
];

/// 17 significant digits, which round-trips every finite `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn format_opt(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_records<W: Write>(out: W, records: &[WorkPrecisionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.problem.clone(),
            r.algorithm.clone(),
            r.order.to_string(),
            r.diffusion.clone(),
            format_float(r.tau_abs),
            format_float(r.tau_rel),
            format_opt(r.final_error),
            r.f_evals.to_string(),
            r.jac_evals.to_string(),
            r.steps.to_string(),
            r.rejected.to_string(),
            format_opt(r.chi2),
            r.outcome.to_string(),
            format_opt(r.wall_time),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::Io(format!("cannot parse column {} value '{raw}'", CSV_HEADER[i])))
}

fn parse_opt(rec: &csv::StringRecord, i: usize) -> Result<Option<f64>> {
    if rec.get(i).unwrap_or("").is_empty() {
        Ok(None)
    } else {
        parse_field(rec, i).map(Some)
    }
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<WorkPrecisionRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Io(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(csv_err)?;
        out.push(WorkPrecisionRecord {
            problem: row[0].to_string(),
            algorithm: row[1].to_string(),
            order: parse_field(&row, 2)?,
            diffusion: row[3].to_string(),
            tau_abs: parse_field(&row, 4)?,
            tau_rel: parse_field(&row, 5)?,
            final_error: parse_opt(&row, 6)?,
            f_evals: parse_field(&row, 7)?,
            jac_evals: parse_field(&row, 8)?,
            steps: parse_field(&row, 9)?,
            rejected: parse_field(&row, 10)?,
            chi2: parse_opt(&row, 11)?,
            outcome: parse_field(&row, 12)?,
            wall_time: parse_opt(&row, 13)?,
        });
    }
    Ok(out)
}

pub const CALIBRATION_CSV_HEADER: [&str; 13] = [
    "problem",
    "algorithm",
    "order",
    "diffusion",
    "abstol",
    "reltol",
    "error",
    "chi2",
    "points",
    "band_low",
    "band_high",
    "within_band",
    "outcome",
];

pub fn write_calibration_records<W: Write>(out: W, records: &[CalibrationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CALIBRATION_CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.problem.clone(),
            r.algorithm.clone(),
            r.order.to_string(),
            r.diffusion.clone(),
            format_float(r.tau_abs),
            format_float(r.tau_rel),
            format_opt(r.final_error),
            format_opt(r.chi2),
            r.n_points.to_string(),
            format_opt(r.band_low),
            format_opt(r.band_high),
            r.within_band().map(|b| b.to_string()).unwrap_or_default(),
            r.outcome.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_calibration_records<R: Read>(input: R) -> Result<Vec<CalibrationRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CALIBRATION_CSV_HEADER.iter().copied()) {
        return Err(Error::Io(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(csv_err)?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let parse = |i: usize| -> Result<Option<f64>> {
            if field(i).is_empty() {
                return Ok(None);
            }
            field(i).parse().map(Some).map_err(|_| {
                Error::Io(format!(
                    "cannot parse column {} value '{}'",
                    CALIBRATION_CSV_HEADER[i],
                    field(i)
                ))
            })
        };
        let required = |i: usize| -> Result<f64> {
            parse(i)?.ok_or_else(|| Error::Io(format!("missing {}", CALIBRATION_CSV_HEADER[i])))
        };
        let bad = |i: usize| {
            Error::Io(format!(
                "cannot parse column {} value '{}'",
                CALIBRATION_CSV_HEADER[i],
                field(i)
            ))
        };
        let rec = CalibrationRecord {
            problem: field(0).to_string(),
            algorithm: field(1).to_string(),
            order: field(2).parse().map_err(|_| bad(2))?,
            diffusion: field(3).to_string(),
            tau_abs: required(4)?,
            tau_rel: required(5)?,
            final_error: parse(6)?,
            chi2: parse(7)?,
            n_points: field(8).parse().map_err(|_| bad(8))?,
            band_low: parse(9)?,
            band_high: parse(10)?,
            outcome: field(12).parse()?,
        };
        let stored = if field(11).is_empty() {
            None
        } else {
            Some(field(11).parse::<bool>().map_err(|_| bad(11))?)
        };
        if stored != rec.within_band() {
            return Err(Error::Io(format!("inconsistent within_band value '{}'", field(11))));
        }
        out.push(rec);
    }
    Ok(out)
}
