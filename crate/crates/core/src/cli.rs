//! Command-line front end: single solves, work-precision sweeps, calibration reports.
//!
//! Exit codes: 0 on success, 2 on usage errors (reported before any solve starts),
//! 3 on solver or output failures, with a single JSON line on standard error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::calibration::DiffusionModel;
use crate::control::ControllerConfig;
use crate::error::Error;
use crate::metrics::{
    calibration_report, format_float, work_precision, write_calibration_records, write_records, Algorithm, SweepOptions,
};
use crate::problems::{get_problem_variant, IvProblem, PROBLEM_NAMES};
use crate::solver::{solve_adaptive, solve_fixed, OdePosterior, SolveDiagnostics, SolverSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "odefilter", version, about = "Probabilistic ODE filters and smoothers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one problem; writes the posterior mean and standard deviation on the solver grid.
    Solve(SolveArgs),
    /// Work-precision sweep over algorithms and a tolerance ladder.
    Benchmark(BenchmarkArgs),
    /// Chi-square calibration statistics over diffusion models and a tolerance ladder.
    CalibrationReport(CalibrationArgs),
    /// Registry problems with their parameters.
    ListProblems(ListArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterArg {
    Ekf0,
    Ekf1,
    Eks0,
    Eks1,
}

impl FilterArg {
    fn name(self) -> &'static str {
        match self {
            FilterArg::Ekf0 => "ekf0",
            FilterArg::Ekf1 => "ekf1",
            FilterArg::Eks0 => "eks0",
            FilterArg::Eks1 => "eks1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchArg {
    Ekf0,
    Ekf1,
    Eks0,
    Eks1,
    Dp5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiffusionArg {
    Fixed,
    FixedMv,
    Tv,
    TvMv,
}

impl From<DiffusionArg> for DiffusionModel {
    fn from(d: DiffusionArg) -> Self {
        match d {
            DiffusionArg::Fixed => DiffusionModel::FixedScalar,
            DiffusionArg::FixedMv => DiffusionModel::FixedDiagonal,
            DiffusionArg::Tv => DiffusionModel::TvScalar,
            DiffusionArg::TvMv => DiffusionModel::TvDiagonal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ListFormat {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct ProblemArgs {
    /// Registry name (see `list-problems`).
    #[arg(long)]
    pub problem: String,
    /// `literal` (default) or `classic`; lotka-volterra only.
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_enum, default_value = "eks1")]
    pub algorithm: FilterArg,
    /// Prior order q in 1..=5.
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    #[arg(long, value_enum, default_value = "tv")]
    pub diffusion: DiffusionArg,
    #[arg(long, default_value_t = 1e-6)]
    pub abstol: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub reltol: f64,
    /// Fixed step size; disables step-size adaptation.
    #[arg(long)]
    pub step: Option<f64>,
    /// Budget of attempted steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Decade ladder `A:B` of absolute tolerances, paired with τ_rel = 10³·τ_abs.
    #[arg(long, default_value = "1e-4:1e-13", value_parser = parse_ladder)]
    pub tolerances: Ladder,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Budget of attempted steps per solve.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "eks0,eks1,dp5")]
    pub algorithms: Vec<BenchArg>,
    #[arg(long, default_value_t = 5)]
    pub order: usize,
    #[arg(long, value_enum, default_value = "tv")]
    pub diffusion: DiffusionArg,
    #[command(flatten)]
    pub sweep: SweepArgs,
    /// Record wall-clock seconds per cell (makes the output non-reproducible).
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CalibrationArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "eks1")]
    pub algorithms: Vec<FilterArg>,
    #[arg(long, default_value_t = 3)]
    pub order: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fixed,tv")]
    pub diffusions: Vec<DiffusionArg>,
    #[command(flatten)]
    pub sweep: SweepArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ListArgs {
    #[arg(long, value_enum, default_value = "text")]
    pub format: ListFormat,
}

/// Paired `(τ_abs, τ_rel)` tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct Ladder(pub Vec<(f64, f64)>);

fn decade(s: &str) -> Result<i32, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(format!("tolerance '{s}' must be positive"));
    }
    let k = -v.log10().round() as i32;
    let exact: f64 = format!("1e{}", -k).parse().unwrap();
    if exact != v || !(1..=15).contains(&k) {
        return Err(format!("tolerance '{s}' must be a power of ten between 1e-1 and 1e-15"));
    }
    Ok(k)
}

/// `A:B` (inclusive decade range, either direction) or a single `A`.
pub fn parse_ladder(s: &str) -> Result<Ladder, String> {
    let (a, b) = match s.split_once(':') {
        Some((a, b)) => (decade(a)?, decade(b)?),
        None => {
            let k = decade(s)?;
            (k, k)
        }
    };
    let mut ladder = crate::metrics::tolerance_ladder(a, b);
    if a > b {
        ladder.reverse();
    }
    Ok(Ladder(ladder))
}

enum Failure {
    Usage(String),
    Runtime(serde_json::Value),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        io_failure(&e.to_string())
    }
}

fn io_failure(msg: &str) -> Failure {
    Failure::Runtime(json!({"status": "io-error", "message": msg}))
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(stdout, "{text}");
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        EXIT_USAGE
                    } else {
                        EXIT_OK
                    }
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let (name, result) = match &cli.command {
        Command::Solve(a) => ("solve", solve_cmd(a, stdout)),
        Command::Benchmark(a) => ("benchmark", benchmark_cmd(a, stdout)),
        Command::CalibrationReport(a) => ("calibration-report", calibration_cmd(a, stdout)),
        Command::ListProblems(a) => ("list-problems", list_cmd(a, stdout)),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let mut root = Cli::command();
            root.build();
            let mut sub = root
                .find_subcommand_mut(name)
                .expect("subcommand is registered")
                .clone();
            let e = sub.error(ErrorKind::ValueValidation, msg);
            let _ = write!(stderr, "{}", e.render());
            EXIT_USAGE
        }
        Err(Failure::Runtime(v)) => {
            let _ = writeln!(stderr, "{v}");
            EXIT_FAILURE
        }
    }
}

fn load_problem(a: &ProblemArgs) -> Result<IvProblem, Failure> {
    get_problem_variant(&a.problem, a.variant.as_deref()).map_err(usage)
}

fn check_output(out: &OutputArgs) -> Result<(), Failure> {
    if let Some(path) = &out.output {
        let parent = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(Failure::Usage(format!(
                "output directory '{}' does not exist",
                parent.display()
            )));
        }
        if path.is_dir() {
            return Err(Failure::Usage(format!("output '{}' is a directory", path.display())));
        }
    }
    Ok(())
}

/// Buffers the whole output, then writes it in one go, so a failed run leaves no partial file.
fn emit(out: &OutputArgs, stdout: &mut dyn Write, body: &[u8]) -> Result<(), Failure> {
    match &out.output {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            w.write_all(body)?;
            w.flush()?;
        }
        None => {
            stdout.write_all(body)?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn check_tolerances(abs: f64, rel: f64) -> Result<(), Failure> {
    ControllerConfig::with_tolerances(abs, rel).validate().map_err(usage)
}

fn check_max_steps(m: Option<usize>) -> Result<(), Failure> {
    match m {
        Some(0) => Err(Failure::Usage("--max-steps must be positive".into())),
        _ => Ok(()),
    }
}

fn solver_failure(problem: &str, spec: &SolverSpec, post: &OdePosterior, diag: &SolveDiagnostics) -> Failure {
    Failure::Runtime(json!({
        "status": "solver-failure",
        "problem": problem,
        "solver": spec.to_string(),
        "outcome": diag.outcome.as_str(),
        "message": diag.message,
        "t_reached": post.times.last().copied(),
        "steps_accepted": post.stats.steps_accepted,
        "steps_rejected": post.stats.steps_rejected,
        "f_evals": post.stats.f_evals,
    }))
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    problem: &'a str,
    params: &'a [(String, f64)],
    solver: String,
    tau_abs: Option<f64>,
    tau_rel: Option<f64>,
    step: Option<f64>,
    outcome: &'static str,
    f_evals: usize,
    jac_evals: usize,
    steps_accepted: usize,
    steps_rejected: usize,
    t: Vec<f64>,
    mean: Vec<Vec<f64>>,
    std: Vec<Vec<f64>>,
}

fn solve_cmd(a: &SolveArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let problem = load_problem(&a.problem)?;
    let spec = SolverSpec::new(a.algorithm.name(), a.order, a.diffusion.into()).map_err(usage)?;
    if let Some(h) = a.step {
        if !(h.is_finite() && h > 0.0) {
            return Err(Failure::Usage(format!("--step must be positive and finite, got {h}")));
        }
    } else {
        check_tolerances(a.abstol, a.reltol)?;
    }
    check_max_steps(a.max_steps)?;
    check_output(&a.out)?;

    let (post, diag) = match a.step {
        Some(h) => solve_fixed(&problem, spec, h),
        None => {
            let cfg = ControllerConfig {
                max_steps: a.max_steps,
                ..ControllerConfig::with_tolerances(a.abstol, a.reltol)
            };
            solve_adaptive(&problem, spec, &cfg)
        }
    }
    .map_err(usage)?;
    if !diag.is_success() {
        return Err(solver_failure(problem.name(), &spec, &post, &diag));
    }

    let d = post.dim();
    let marginals: Vec<_> = (0..post.len()).map(|n| post.marginal(n)).collect();
    let body = match a.out.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let header: Vec<String> = std::iter::once("t".to_string())
                .chain((1..=d).map(|i| format!("mean_{i}")))
                .chain((1..=d).map(|i| format!("std_{i}")))
                .collect();
            let csv_io = |e: csv::Error| io_failure(&e.to_string());
            w.write_record(&header).map_err(csv_io)?;
            for (t, (m, s)) in post.times.iter().zip(&marginals) {
                let row: Vec<String> = std::iter::once(format_float(*t))
                    .chain(m.iter().map(|&v| format_float(v)))
                    .chain(s.iter().map(|&v| format_float(v)))
                    .collect();
                w.write_record(&row).map_err(csv_io)?;
            }
            w.into_inner().map_err(|e| io_failure(&e.to_string()))?
        }
        Format::Json => {
            let out = SolveOutput {
                problem: problem.name(),
                params: problem.params(),
                solver: spec.to_string(),
                tau_abs: a.step.is_none().then_some(a.abstol),
                tau_rel: a.step.is_none().then_some(a.reltol),
                step: a.step,
                outcome: diag.outcome.as_str(),
                f_evals: post.stats.f_evals,
                jac_evals: post.stats.jac_evals,
                steps_accepted: post.stats.steps_accepted,
                steps_rejected: post.stats.steps_rejected,
                t: post.times.clone(),
                mean: marginals.iter().map(|(m, _)| m.iter().copied().collect()).collect(),
                std: marginals.iter().map(|(_, s)| s.iter().copied().collect()).collect(),
            };
            let mut v = serde_json::to_vec(&out).map_err(|e| io_failure(&e.to_string()))?;
            v.push(b'\n');
            v
        }
    };
    emit(&a.out, stdout, &body)
}

fn sweep_options(s: &SweepArgs, timing: bool) -> Result<SweepOptions, Failure> {
    check_max_steps(s.max_steps)?;
    for &(abs, rel) in &s.tolerances.0 {
        check_tolerances(abs, rel)?;
    }
    Ok(SweepOptions {
        jobs: s.jobs,
        timing,
        max_steps: s.max_steps,
    })
}

fn sweep_failure(problem: &str, e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::InvalidOrder(_) => usage(e),
        other => Failure::Runtime(json!({
            "status": "sweep-failure",
            "problem": problem,
            "message": other.to_string(),
        })),
    }
}

fn benchmark_cmd(a: &BenchmarkArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let problem = load_problem(&a.problem)?;
    let mut algorithms = Vec::new();
    for &alg in &a.algorithms {
        algorithms.push(match alg {
            BenchArg::Dp5 => Algorithm::Dp5,
            BenchArg::Ekf0 => Algorithm::Filter(SolverSpec::new("ekf0", a.order, a.diffusion.into()).map_err(usage)?),
            BenchArg::Ekf1 => Algorithm::Filter(SolverSpec::new("ekf1", a.order, a.diffusion.into()).map_err(usage)?),
            BenchArg::Eks0 => Algorithm::Filter(SolverSpec::new("eks0", a.order, a.diffusion.into()).map_err(usage)?),
            BenchArg::Eks1 => Algorithm::Filter(SolverSpec::new("eks1", a.order, a.diffusion.into()).map_err(usage)?),
        });
    }
    let opts = sweep_options(&a.sweep, a.timing)?;
    check_output(&a.out)?;
    let records = work_precision(&problem, &algorithms, &a.sweep.tolerances.0, &opts)
        .map_err(|e| sweep_failure(problem.name(), e))?;
    let body = match a.out.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_records(&mut buf, &records).map_err(|e| io_failure(&e.to_string()))?;
            buf
        }
        Format::Json => json_body(&records)?,
    };
    emit(&a.out, stdout, &body)
}

fn json_body<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| io_failure(&e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

fn calibration_cmd(a: &CalibrationArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let problem = load_problem(&a.problem)?;
    let mut specs = Vec::new();
    for &alg in &a.algorithms {
        for &diff in &a.diffusions {
            specs.push(SolverSpec::new(alg.name(), a.order, diff.into()).map_err(usage)?);
        }
    }
    let opts = sweep_options(&a.sweep, false)?;
    check_output(&a.out)?;
    let records = calibration_report(&problem, &specs, &a.sweep.tolerances.0, &opts)
        .map_err(|e| sweep_failure(problem.name(), e))?;
    let body = match a.out.format {
        Format::Csv => {
            let mut buf = Vec::new();
            write_calibration_records(&mut buf, &records).map_err(|e| io_failure(&e.to_string()))?;
            buf
        }
        Format::Json => json_body(&records)?,
    };
    emit(&a.out, stdout, &body)
}

#[derive(Serialize)]
struct ProblemInfo {
    name: String,
    dim: usize,
    t0: f64,
    t1: f64,
    y0: Vec<f64>,
    params: Vec<(String, f64)>,
    analytic: bool,
    variants: Vec<&'static str>,
}

fn list_cmd(a: &ListArgs, stdout: &mut dyn Write) -> Result<(), Failure> {
    let mut infos = Vec::new();
    for name in PROBLEM_NAMES {
        let p = get_problem_variant(name, None).map_err(usage)?;
        infos.push(ProblemInfo {
            name: name.to_string(),
            dim: p.dim(),
            t0: p.t0(),
            t1: p.t1(),
            y0: p.y0().iter().copied().collect(),
            params: p.params().to_vec(),
            analytic: p.analytic_value(p.t0()).is_ok(),
            variants: if name == "lotka-volterra" {
                vec!["literal", "classic"]
            } else {
                Vec::new()
            },
        });
    }
    let body = match a.format {
        ListFormat::Json => json_body(&infos)?,
        ListFormat::Text => {
            let mut s = String::new();
            for i in &infos {
                let params: Vec<String> = i.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                s.push_str(&format!(
                    "{:<16} d={}  t=[{}, {}]  y0={:?}  {}",
                    i.name,
                    i.dim,
                    i.t0,
                    i.t1,
                    i.y0,
                    params.join(" ")
                ));
                if !i.variants.is_empty() {
                    s.push_str(&format!("  variants: {} (default), {}", i.variants[0], i.variants[1]));
                }
                s.push('\n');
            }
            s.into_bytes()
        }
    };
    stdout.write_all(&body)?;
    Ok(())
}
