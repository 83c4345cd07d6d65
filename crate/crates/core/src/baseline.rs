//! Dormand–Prince 5(4) with FSAL and continuous output, plus reference solutions.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::DiffusionModel;
use crate::control::{error_ratio, initial_step_from, next_step, ControllerConfig};
use crate::error::{Error, Result};
use crate::problems::IvProblem;
use crate::solver::{solve_adaptive, SolverSpec};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

/// Difference between the 5th- and 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Dense output weights of the 4th-order continuous extension.
const DENSE: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Tolerance of the explicit reference runs.
pub const REFERENCE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RkStats {
    pub f_evals: usize,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
}

/// Accepted DP5 steps with continuous output.
#[derive(Debug, Clone)]
pub struct RkTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub stats: RkStats,
    /// Interpolation coefficients of each interval.
    dense: Vec<[DVector<f64>; 5]>,
}

impl RkTrajectory {
    pub fn final_value(&self) -> &DVector<f64> {
        self.values.last().unwrap()
    }

    /// Continuous-extension value at `t`.
    pub fn interpolate(&self, t: f64) -> Result<DVector<f64>> {
        let (t0, t1) = (self.times[0], *self.times.last().unwrap());
        if !(t >= t0 && t <= t1) {
            return Err(Error::OutOfRange { t, t0, t1 });
        }
        let n = self.times.partition_point(|&s| s <= t) - 1;
        if self.times[n] == t {
            return Ok(self.values[n].clone());
        }
        let h = self.times[n + 1] - self.times[n];
        let th = (t - self.times[n]) / h;
        let th1 = 1.0 - th;
        let [r1, r2, r3, r4, r5] = &self.dense[n];
        Ok(r1 + th * (r2 + th1 * (r3 + th * (r4 + th1 * r5))))
    }
}

struct Stages {
    k: Vec<DVector<f64>>,
    y_new: DVector<f64>,
}

fn stages(problem: &IvProblem, t: f64, y: &DVector<f64>, k1: &DVector<f64>, h: f64) -> Stages {
    let mut k = Vec::with_capacity(7);
    k.push(k1.clone());
    let mut y_new = y.clone();
    for s in 1..7 {
        let mut ys = y.clone();
        for (j, a) in A[s].iter().enumerate() {
            if *a != 0.0 {
                ys.axpy(h * a, &k[j], 1.0);
            }
        }
        if s == 6 {
            y_new = ys.clone();
        }
        k.push(problem.f(&ys, t + C[s] * h));
    }
    Stages { k, y_new }
}

fn dense_coefficients(y: &DVector<f64>, st: &Stages, h: f64) -> [DVector<f64>; 5] {
    let ydiff = &st.y_new - y;
    let bspl = h * &st.k[0] - &ydiff;
    let r4 = &ydiff - h * &st.k[6] - &bspl;
    let mut r5 = DVector::zeros(y.len());
    for (j, w) in DENSE.iter().enumerate() {
        if *w != 0.0 {
            r5.axpy(h * w, &st.k[j], 1.0);
        }
    }
    [y.clone(), ydiff, bspl, r4, r5]
}

fn embedded_error(st: &Stages, h: f64) -> DVector<f64> {
    let mut err = DVector::zeros(st.y_new.len());
    for (j, e) in E.iter().enumerate() {
        if *e != 0.0 {
            err.axpy(h * e, &st.k[j], 1.0);
        }
    }
    err.abs()
}

/// Adaptive DP5 with the same weighted RMS norm and proportional controller
/// (exponent 1/5) as the probabilistic solvers.
///
/// FSAL: the last stage of an accepted step is the first of the next, so every
/// attempted step costs six evaluations, plus one initially.
pub fn dp5_solve(problem: &IvProblem, tau_abs: f64, tau_rel: f64) -> Result<RkTrajectory> {
    dp5_solve_with(problem, &ControllerConfig::with_tolerances(tau_abs, tau_rel))
}

pub fn dp5_solve_with(problem: &IvProblem, cfg: &ControllerConfig) -> Result<RkTrajectory> {
    cfg.validate()?;
    let (t0, t1) = problem.tspan();
    let h_min = cfg.min_step(t0, t1);
    let mut t = t0;
    let mut y = problem.y0().clone();
    let mut k1 = problem.f(&y, t);
    let mut h = initial_step_from(problem, &k1, cfg)?;
    let mut traj = RkTrajectory {
        times: vec![t0],
        values: vec![y.clone()],
        stats: RkStats {
            f_evals: 1,
            ..Default::default()
        },
        dense: Vec::new(),
    };
    let mut consecutive = 0usize;
    while t < t1 {
        if let Some(m) = cfg.max_steps {
            if traj.stats.steps_accepted + traj.stats.steps_rejected >= m {
                return Err(Error::MaxSteps(m));
            }
        }
        let (t_new, h_try) = if t1 - (t + h) <= h_min {
            (t1, t1 - t)
        } else {
            (t + h, h)
        };
        let st = stages(problem, t, &y, &k1, h_try);
        traj.stats.f_evals += 6;
        let e = error_ratio(&embedded_error(&st, h_try), &y, &st.y_new, cfg);
        let dec = next_step(h_try, e, 4, cfg);
        if dec.accept && st.y_new.iter().all(|v| v.is_finite()) {
            traj.dense.push(dense_coefficients(&y, &st, h_try));
            t = t_new;
            y = st.y_new;
            k1 = st.k[6].clone();
            traj.times.push(t);
            traj.values.push(y.clone());
            traj.stats.steps_accepted += 1;
            consecutive = 0;
        } else {
            traj.stats.steps_rejected += 1;
            consecutive += 1;
            if h_try * cfg.eta_min < h_min || consecutive > cfg.max_consecutive_rejects {
                if !e.is_finite() {
                    return Err(Error::NonFinite("Runge-Kutta stage"));
                }
                return Err(Error::MinStepSize { t, h_min });
            }
        }
        h = dec.h_next;
    }
    Ok(traj)
}

/// DP5 on the uniform grid `t₀ + k h`, last step truncated to `T`.
pub fn dp5_fixed(problem: &IvProblem, h: f64) -> Result<RkTrajectory> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidStep(h));
    }
    let (t0, t1) = problem.tspan();
    let n_steps = (((t1 - t0) / h) - 1e-9).ceil().max(1.0) as usize;
    let mut y = problem.y0().clone();
    let mut k1 = problem.f(&y, t0);
    let mut traj = RkTrajectory {
        times: vec![t0],
        values: vec![y.clone()],
        stats: RkStats {
            f_evals: 1,
            ..Default::default()
        },
        dense: Vec::new(),
    };
    let mut t = t0;
    for k in 1..=n_steps {
        let t_new = if k == n_steps { t1 } else { t0 + k as f64 * h };
        let st = stages(problem, t, &y, &k1, t_new - t);
        traj.stats.f_evals += 6;
        if st.y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Runge-Kutta stage"));
        }
        traj.dense.push(dense_coefficients(&y, &st, t_new - t));
        t = t_new;
        y = st.y_new;
        k1 = st.k[6].clone();
        traj.times.push(t);
        traj.values.push(y.clone());
        traj.stats.steps_accepted += 1;
    }
    Ok(traj)
}

/// Absolute tolerance of the stiff self-consistent reference (relative is 1e3 times larger).
pub const STIFF_REFERENCE_TOL: f64 = 1e-9;

/// EKS1 with IWP(3) at `tol` (relative tolerance `1e3 · tol`), accepted only if a
/// run at half that tolerance agrees within `1e-4` at the end point.
pub fn self_consistent_posterior(problem: &IvProblem, tol: f64) -> Result<crate::solver::OdePosterior> {
    let spec = SolverSpec::new("eks1", 3, DiffusionModel::TvScalar)?;
    let run = |t_abs: f64| -> Result<crate::solver::OdePosterior> {
        let cfg = ControllerConfig {
            max_consecutive_rejects: 100,
            ..ControllerConfig::with_tolerances(t_abs, t_abs * 1e3)
        };
        let (post, diag) = solve_adaptive(problem, spec, &cfg)?;
        if !diag.is_success() {
            return Err(Error::ReferenceUnavailable(problem.name().to_string(), diag.message));
        }
        Ok(post)
    };
    let a = run(tol)?;
    let b = run(tol / 2.0)?;
    let gap = (a.final_mean() - b.final_mean()).norm();
    if gap > 1e-4 {
        return Err(Error::ReferenceUnavailable(
            problem.name().to_string(),
            format!("tolerance-halving disagreement {gap:.3e}"),
        ));
    }
    Ok(b)
}

/// A reference trajectory that can be evaluated anywhere in the time span.
#[derive(Debug, Clone)]
pub enum Reference {
    Analytic(IvProblem),
    Explicit(RkTrajectory),
    /// Tight-tolerance probabilistic solve, for stiff problems.
    Probabilistic(Box<crate::solver::OdePosterior>),
}

impl Reference {
    /// Analytic when available, DP5 at `REFERENCE_TOL` otherwise.
    pub fn explicit(problem: &IvProblem) -> Result<Self> {
        if problem.has_analytic() {
            return Ok(Reference::Analytic(problem.clone()));
        }
        if problem.name() == "vanderpol-stiff" {
            return Err(Error::ReferenceUnavailable(
                problem.name().to_string(),
                "explicit Runge-Kutta is impractical at this stiffness".into(),
            ));
        }
        dp5_solve_with(
            problem,
            &ControllerConfig {
                max_consecutive_rejects: 100,
                ..ControllerConfig::with_tolerances(REFERENCE_TOL, REFERENCE_TOL)
            },
        )
        .map(Reference::Explicit)
        .map_err(|e| Error::ReferenceUnavailable(problem.name().to_string(), e.to_string()))
    }

    /// Explicit reference where possible, the self-consistent stiff one otherwise.
    pub fn for_problem(problem: &IvProblem) -> Result<Self> {
        match Self::explicit(problem) {
            Err(Error::ReferenceUnavailable(..)) if problem.name() == "vanderpol-stiff" => {
                self_consistent_posterior(problem, STIFF_REFERENCE_TOL).map(|p| Reference::Probabilistic(Box::new(p)))
            }
            other => other,
        }
    }

    pub fn at(&self, t: f64) -> Result<DVector<f64>> {
        match self {
            Reference::Analytic(p) => p.analytic_value(t),
            Reference::Explicit(traj) => traj.interpolate(t),
            Reference::Probabilistic(post) => post.dense(t).map(|s| s.mean.rows(0, post.dim()).into_owned()),
        }
    }
}

/// Exact solution if known, otherwise DP5 at `REFERENCE_TOL` with dense output.
///
/// Explicit integration of the stiff Van der Pol problem is refused.
pub fn reference_solution(problem: &IvProblem, ts: &[f64]) -> Result<Vec<DVector<f64>>> {
    let (t0, t1) = problem.tspan();
    if let Some(&t) = ts.iter().find(|&&t| !(t >= t0 && t <= t1)) {
        return Err(Error::OutOfRange { t, t0, t1 });
    }
    let reference = Reference::explicit(problem)?;
    ts.iter().map(|&t| reference.at(t)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheFile {
    problem: String,
    params: Vec<(String, f64)>,
    tspan: (f64, f64),
    tolerance: f64,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

/// Disk cache of reference solutions, one JSON file per (problem, tolerance, grid).
///
/// Files are written to a temporary name and renamed into place, so readers
/// never see partial contents.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    dir: PathBuf,
}

impl ReferenceCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, problem: &IvProblem, ts: &[f64]) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(problem.name().as_bytes());
        for (k, v) in problem.params() {
            hasher.update(k.as_bytes());
            hasher.update(v.to_le_bytes());
        }
        hasher.update(problem.t0().to_le_bytes());
        hasher.update(problem.t1().to_le_bytes());
        for y in problem.y0().iter() {
            hasher.update(y.to_le_bytes());
        }
        for t in ts {
            hasher.update(t.to_le_bytes());
        }
        let digest = hasher.finalize();
        let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        self.dir
            .join(format!("{}-tol{:e}-{hex}.json", problem.name(), REFERENCE_TOL))
    }

    pub fn get(&self, problem: &IvProblem, ts: &[f64]) -> Result<Vec<DVector<f64>>> {
        let path = self.path_for(problem, ts);
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(file) = serde_json::from_str::<CacheFile>(&text) {
                if file.problem == problem.name()
                    && file.params == problem.params()
                    && file.times == ts
                    && file.values.len() == ts.len()
                {
                    return Ok(file.values.into_iter().map(DVector::from_vec).collect());
                }
            }
        }
        let values = reference_solution(problem, ts)?;
        let file = CacheFile {
            problem: problem.name().to_string(),
            params: problem.params().to_vec(),
            tspan: problem.tspan(),
            tolerance: REFERENCE_TOL,
            times: ts.to_vec(),
            values: values.iter().map(|v| v.as_slice().to_vec()).collect(),
        };
        fs::create_dir_all(&self.dir)?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut out = fs::File::create(&tmp)?;
            out.write_all(
                serde_json::to_string(&file)
                    .map_err(|e| Error::Io(e.to_string()))?
                    .as_bytes(),
            )?;
            out.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(values)
    }
}
