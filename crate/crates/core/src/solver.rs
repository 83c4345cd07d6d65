//! Adaptive and fixed-step probabilistic solves.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationState, DiffusionModel};
use crate::control::{self, error_ratio, local_error_preconditioned, next_step, ControllerConfig};
use crate::error::{Error, Result};
use crate::filter::{filter_step_with, EvalCounts, LinearizationOrder, StepDiffusion, StepRecord};
use crate::gaussian::{marginal_solution, GaussianState};
use crate::prior::{taylor_initial_state, IwpPrior, MAX_ORDER};
use crate::problems::IvProblem;
use crate::smoother::{interpolate, locate, smooth_pass, SmoothedGrid};

/// One of EKF0, EKF1, EKS0, EKS1 with a prior order and a diffusion model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SolverSpec {
    pub linearization: LinearizationOrder,
    pub smooth: bool,
    pub q: usize,
    pub diffusion: DiffusionModel,
}

impl SolverSpec {
    pub fn new(algorithm: &str, q: usize, diffusion: DiffusionModel) -> Result<Self> {
        let (linearization, smooth) = match algorithm {
            "ekf0" => (LinearizationOrder::Zeroth, false),
            "ekf1" => (LinearizationOrder::First, false),
            "eks0" => (LinearizationOrder::Zeroth, true),
            "eks1" => (LinearizationOrder::First, true),
            other => {
                return Err(Error::Config(format!(
                    "unknown algorithm '{other}' (ekf0, ekf1, eks0, eks1)"
                )))
            }
        };
        let spec = Self {
            linearization,
            smooth,
            q,
            diffusion,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_ORDER).contains(&self.q) {
            return Err(Error::InvalidOrder(self.q));
        }
        self.diffusion.validate(self.linearization)
    }

    pub fn algorithm(&self) -> &'static str {
        match (self.linearization, self.smooth) {
            (LinearizationOrder::Zeroth, false) => "ekf0",
            (LinearizationOrder::First, false) => "ekf1",
            (LinearizationOrder::Zeroth, true) => "eks0",
            (LinearizationOrder::First, true) => "eks1",
        }
    }
}

impl fmt::Display for SolverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/iwp{}/{}", self.algorithm(), self.q, self.diffusion)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub f_evals: usize,
    pub jac_evals: usize,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    /// Seconds.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    MinStepFailure,
    NonFiniteState,
    /// The attempted-step budget `max_steps` ran out.
    MaxStepsExceeded,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::MinStepFailure => "min-step-failure",
            Outcome::NonFiniteState => "non-finite-state",
            Outcome::MaxStepsExceeded => "max-steps-exceeded",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Outcome::Success,
            Outcome::MinStepFailure,
            Outcome::NonFiniteState,
            Outcome::MaxStepsExceeded,
        ]
        .into_iter()
        .find(|o| o.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown outcome '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub outcome: Outcome,
    pub message: String,
}

impl SolveDiagnostics {
    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    fn success() -> Self {
        Self {
            outcome: Outcome::Success,
            message: String::new(),
        }
    }
}

/// The computed posterior over the solution.
#[derive(Debug, Clone)]
pub struct OdePosterior {
    pub problem: String,
    pub spec: SolverSpec,
    pub prior: IwpPrior,
    /// Accepted grid, starting at `t₀`.
    pub times: Vec<f64>,
    /// Filtering marginals on the grid (after calibration rescaling).
    pub filtered: Vec<GaussianState>,
    /// Per-step records of the forward pass (after calibration rescaling).
    pub records: Vec<StepRecord>,
    pub smoothed: Option<SmoothedGrid>,
    /// Global diffusion estimate for fixed models.
    pub global_diffusion: Option<DVector<f64>>,
    pub stats: SolveStats,
}

impl OdePosterior {
    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Smoothed states if a backward pass ran, filtered otherwise.
    pub fn states(&self) -> &[GaussianState] {
        match &self.smoothed {
            Some(g) => &g.states,
            None => &self.filtered,
        }
    }

    /// Per-step diffusion used on each interval.
    pub fn diffusions(&self) -> Vec<DVector<f64>> {
        self.records.iter().map(|r| r.diffusion.clone()).collect()
    }

    /// Solution mean and standard deviation at node `n`.
    pub fn marginal(&self, n: usize) -> (DVector<f64>, DVector<f64>) {
        marginal_solution(&self.states()[n], self.dim())
    }

    pub fn final_mean(&self) -> DVector<f64> {
        self.marginal(self.len() - 1).0
    }

    /// Posterior marginal at an arbitrary `t`: smoothing interpolation when
    /// smoothed, otherwise the filter prediction from the left node.
    pub fn dense(&self, t: f64) -> Result<GaussianState> {
        if let Some(grid) = &self.smoothed {
            return interpolate(grid, t);
        }
        let n = locate(&self.times, t)?;
        if self.times[n] == t {
            return Ok(self.filtered[n].clone());
        }
        let pair = self.prior.transitions(t - self.times[n])?;
        crate::filter::predict(
            &self.filtered[n],
            &pair,
            self.records[n].diffusion.as_slice(),
            self.dim(),
        )
    }
}

fn is_recoverable(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::SingularInnovation)
}

struct Run<'a> {
    problem: &'a IvProblem,
    spec: SolverSpec,
    prior: IwpPrior,
    init: GaussianState,
    counts: EvalCounts,
    records: Vec<StepRecord>,
    cal: CalibrationState,
    unit: Vec<f64>,
    started: Instant,
}

impl<'a> Run<'a> {
    fn new(problem: &'a IvProblem, spec: SolverSpec) -> Result<Self> {
        spec.validate()?;
        let d = problem.dim();
        let (t0, t1) = problem.tspan();
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::Config(format!("invalid time span [{t0}, {t1}]")));
        }
        Ok(Self {
            problem,
            spec,
            prior: IwpPrior::new(spec.q, d)?,
            init: taylor_initial_state(problem, spec.q)?,
            counts: EvalCounts::default(),
            records: Vec::new(),
            cal: CalibrationState::new(d),
            unit: vec![1.0; d],
            started: Instant::now(),
        })
    }

    fn current_state(&self) -> &GaussianState {
        self.records.last().map_or(&self.init, |r| &r.filtered)
    }

    fn step(&mut self, t: f64, h: f64) -> Result<StepRecord> {
        let diffusion = match self.spec.diffusion {
            DiffusionModel::TvScalar => StepDiffusion::TvScalar,
            DiffusionModel::TvDiagonal => StepDiffusion::TvDiagonal,
            _ => StepDiffusion::Given(&self.unit),
        };
        let prev = self.records.last().map_or(&self.init, |r| &r.filtered);
        filter_step_with(
            prev,
            self.problem,
            &self.prior,
            t,
            h,
            diffusion,
            self.spec.linearization,
            &mut self.counts,
        )
    }

    fn finish(mut self, rejected: usize, mut diag: SolveDiagnostics) -> (OdePosterior, SolveDiagnostics) {
        let mut global = None;
        if self.spec.diffusion.is_fixed() {
            if let Ok(g) = calibration::finalize_fixed(&self.cal, self.spec.diffusion) {
                self.records = calibration::rescale_posterior(&self.records, &g);
                self.init = calibration::rescale_state(&self.init, &g);
                global = Some(g);
            }
        }
        let mut smoothed = None;
        if self.spec.smooth && diag.is_success() {
            match smooth_pass(&self.prior, self.problem.t0(), &self.init, &self.records) {
                Ok(g) => smoothed = Some(g),
                Err(e) => {
                    diag = SolveDiagnostics {
                        outcome: Outcome::NonFiniteState,
                        message: format!("smoothing failed: {e}"),
                    }
                }
            }
        }
        let mut times = vec![self.problem.t0()];
        let mut filtered = vec![self.init.clone()];
        for r in &self.records {
            times.push(r.t);
            filtered.push(r.filtered.clone());
        }
        let stats = SolveStats {
            f_evals: self.counts.f_evals,
            jac_evals: self.counts.jac_evals,
            steps_accepted: self.records.len(),
            steps_rejected: rejected,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        let post = OdePosterior {
            problem: self.problem.name().to_string(),
            spec: self.spec,
            prior: self.prior,
            times,
            filtered,
            records: self.records,
            smoothed,
            global_diffusion: global,
            stats,
        };
        (post, diag)
    }
}

/// Adaptive solve: propose, filter, calibrate, control; smooth afterwards when requested.
///
/// Configuration errors are returned as `Err`; numerical failures produce a
/// partial posterior with a non-success diagnostic.
pub fn solve_adaptive(
    problem: &IvProblem,
    spec: SolverSpec,
    cfg: &ControllerConfig,
) -> Result<(OdePosterior, SolveDiagnostics)> {
    cfg.validate()?;
    let mut run = Run::new(problem, spec)?;
    let (t0, t1) = problem.tspan();
    let d = problem.dim();
    let q = spec.q;
    let h_min = cfg.min_step(t0, t1);

    run.counts.f_evals += 1;
    let mut h = control::initial_step(problem, q, cfg)?;
    let mut t = t0;
    let mut rejected = 0usize;
    let mut consecutive = 0usize;
    let mut attempts = 0usize;
    let mut diag = SolveDiagnostics::success();

    while t < t1 {
        if cfg.max_steps.is_some_and(|m| attempts >= m) {
            diag = SolveDiagnostics {
                outcome: Outcome::MaxStepsExceeded,
                message: format!("exceeded {attempts} attempted steps at t = {t}"),
            };
            break;
        }
        attempts += 1;
        let (t_new, h_try) = if t1 - (t + h) <= h_min {
            (t1, t1 - t)
        } else {
            (t + h, h)
        };

        let attempt = run.step(t_new, h_try);
        let (e, accepted_rec, tentative_cal, failure) = match attempt {
            Ok(rec) => {
                let (gamma, cal) = if spec.diffusion.is_fixed() {
                    let cal = calibration::accumulate(&run.cal, &rec);
                    match cal {
                        Ok(c) => (c.current(spec.diffusion).unwrap(), Some(c)),
                        Err(_) => (DVector::from_element(d, f64::INFINITY), None),
                    }
                } else {
                    (rec.diffusion.clone(), None)
                };
                let pre = run.prior.preconditioner(h_try)?;
                let t_full = pre.expand(d);
                let mut h_bar = rec.h_mat.clone();
                for (c, mut col) in h_bar.column_iter_mut().enumerate() {
                    col *= t_full[c];
                }
                let d_vec = local_error_preconditioned(&h_bar, run.prior.q_bar_factor(), gamma.as_slice());
                let y_prev = run.current_state().mean.rows(0, d).into_owned();
                let y_new = rec.filtered.mean.rows(0, d).into_owned();
                let e = error_ratio(&cfg.controlled_error(d_vec, h_try), &y_prev, &y_new, cfg);
                (e, Some(rec), cal, None)
            }
            Err(err) if is_recoverable(&err) => (f64::INFINITY, None, None, Some(err)),
            Err(err) => return Err(err),
        };

        let dec = next_step(h_try, e, q, cfg);
        match accepted_rec {
            Some(rec) if dec.accept => {
                t = t_new;
                if let Some(c) = tentative_cal {
                    run.cal = c;
                }
                run.records.push(rec);
                consecutive = 0;
                h = dec.h_next;
            }
            _ => {
                rejected += 1;
                consecutive += 1;
                h = dec.h_next;
                let non_finite = failure.is_some();
                if h < h_min || consecutive > cfg.max_consecutive_rejects {
                    let reason = match &failure {
                        Some(err) => err.to_string(),
                        None => format!("error ratio {e:.3e}"),
                    };
                    diag = SolveDiagnostics {
                        outcome: if non_finite {
                            Outcome::NonFiniteState
                        } else {
                            Outcome::MinStepFailure
                        },
                        message: format!(
                            "{}; step {h:.3e} (minimum {h_min:.3e}) after {consecutive} consecutive rejections at t = {t}",
                            reason
                        ),
                    };
                    break;
                }
            }
        }
    }
    Ok(run.finish(rejected, diag))
}

/// Fixed-step solve: every step is accepted; the last step is truncated to land on `T`.
pub fn solve_fixed(problem: &IvProblem, spec: SolverSpec, h: f64) -> Result<(OdePosterior, SolveDiagnostics)> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidStep(h));
    }
    let mut run = Run::new(problem, spec)?;
    let (t0, t1) = problem.tspan();
    let n_steps = (((t1 - t0) / h) - 1e-9).ceil().max(1.0) as usize;
    let mut diag = SolveDiagnostics::success();
    let mut t_prev = t0;
    for k in 1..=n_steps {
        let t = if k == n_steps { t1 } else { t0 + k as f64 * h };
        match run.step(t, t - t_prev) {
            Ok(rec) => {
                if spec.diffusion.is_fixed() {
                    match calibration::accumulate(&run.cal, &rec) {
                        Ok(c) => run.cal = c,
                        Err(e) => {
                            diag = SolveDiagnostics {
                                outcome: Outcome::NonFiniteState,
                                message: e.to_string(),
                            };
                            break;
                        }
                    }
                }
                run.records.push(rec);
            }
            Err(e) if is_recoverable(&e) => {
                diag = SolveDiagnostics {
                    outcome: Outcome::NonFiniteState,
                    message: format!("{e} at t = {t}"),
                };
                break;
            }
            Err(e) => return Err(e),
        }
        t_prev = t;
    }
    Ok(run.finish(0, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::filter_step;
    use crate::problems::{get_problem, get_problem_variant, IvProblem};
    use nalgebra::DMatrix;

    #[test]
    fn spec_parsing() {
        let s = SolverSpec::new("eks1", 3, DiffusionModel::TvScalar).unwrap();
        assert_eq!(s.algorithm(), "eks1");
        assert!(s.smooth);
        assert!(SolverSpec::new("ekf1", 3, DiffusionModel::TvDiagonal).is_err());
        assert!(SolverSpec::new("eks1", 6, DiffusionModel::TvScalar).is_err());
        assert!(SolverSpec::new("rk4", 3, DiffusionModel::TvScalar).is_err());
        assert_eq!(s.to_string(), "eks1/iwp3/tv");
    }

    #[test]
    fn grid_ends_exactly_at_t_end() {
        let p = get_problem("logistic").unwrap();
        for alg in ["ekf0", "eks1"] {
            let spec = SolverSpec::new(alg, 3, DiffusionModel::TvScalar).unwrap();
            let (post, diag) = solve_adaptive(&p, spec, &ControllerConfig::with_tolerances(1e-6, 1e-6)).unwrap();
            assert!(diag.is_success(), "{diag:?}");
            assert_eq!(*post.times.last().unwrap(), 2.5);
            assert_eq!(post.times[0], 0.0);
            assert!(post.times.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn evaluation_counts_are_consistent() {
        let p = get_problem("fitzhugh-nagumo").unwrap();
        let cfg = ControllerConfig::with_tolerances(1e-7, 1e-4);
        for alg in ["ekf0", "eks0", "ekf1", "eks1"] {
            for diff in [DiffusionModel::FixedScalar, DiffusionModel::TvScalar] {
                let spec = SolverSpec::new(alg, 3, diff).unwrap();
                let (post, diag) = solve_adaptive(&p, spec, &cfg).unwrap();
                assert!(diag.is_success());
                let s = post.stats;
                assert_eq!(s.f_evals, s.steps_accepted + s.steps_rejected + 1);
                if spec.linearization == LinearizationOrder::First {
                    assert_eq!(s.jac_evals, s.steps_accepted + s.steps_rejected);
                } else {
                    assert_eq!(s.jac_evals, 0);
                }
            }
        }
    }

    #[test]
    fn solves_are_deterministic() {
        let p = get_problem_variant("lotka-volterra", Some("classic")).unwrap();
        let spec = SolverSpec::new("eks1", 4, DiffusionModel::FixedScalar).unwrap();
        let cfg = ControllerConfig::with_tolerances(1e-8, 1e-5);
        let (a, _) = solve_adaptive(&p, spec, &cfg).unwrap();
        let (b, _) = solve_adaptive(&p, spec, &cfg).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.states(), b.states());
    }

    #[test]
    fn zero_dynamics_stay_constant() {
        let p = IvProblem::new("still", DVector::from_vec(vec![1.5, -2.0]), (0.0, 1.0), |_, _| {
            DVector::zeros(2)
        })
        .with_jacobian(|_, _| DMatrix::zeros(2, 2))
        .with_taylor(|q| {
            let mut v = vec![DVector::from_vec(vec![1.5, -2.0])];
            v.extend((0..q).map(|_| DVector::zeros(2)));
            v
        });
        for alg in ["eks0", "eks1"] {
            let spec = SolverSpec::new(alg, 2, DiffusionModel::TvScalar).unwrap();
            let (post, diag) = solve_fixed(&p, spec, 0.1).unwrap();
            assert!(diag.is_success(), "{diag:?}");
            for n in 0..post.len() {
                assert_eq!(post.marginal(n).0.as_slice(), &[1.5, -2.0]);
            }
        }
    }

    #[test]
    fn one_step_fixed_solve_is_one_filter_step() {
        let p = get_problem("logistic").unwrap().with_tspan(0.0, 0.25);
        let spec = SolverSpec::new("eks1", 2, DiffusionModel::TvScalar).unwrap();
        let (post, _) = solve_fixed(&p, spec, 0.25).unwrap();
        assert_eq!(post.len(), 2);
        let init = taylor_initial_state(&p, 2).unwrap();
        let gamma = post.records[0].diffusion.clone();
        let rec = filter_step(&init, &p, 0.25, 0.25, gamma.as_slice(), LinearizationOrder::First).unwrap();
        assert!((post.final_mean() - rec.filtered.mean.rows(0, 1)).amax() < 1e-14);
        assert_eq!(post.states().last().unwrap(), &post.filtered[1]);
    }

    #[test]
    fn literal_lotka_volterra_fails_without_panicking() {
        let p = get_problem("lotka-volterra").unwrap();
        let spec = SolverSpec::new("ekf0", 3, DiffusionModel::TvScalar).unwrap();
        let (_, diag) = solve_adaptive(&p, spec, &ControllerConfig::with_tolerances(1e-6, 1e-3)).unwrap();
        assert!(!diag.is_success());
    }

    #[test]
    fn max_steps_budget() {
        let p = get_problem("logistic").unwrap();
        let spec = SolverSpec::new("ekf0", 2, DiffusionModel::TvScalar).unwrap();
        let cfg = ControllerConfig {
            max_steps: Some(3),
            ..ControllerConfig::with_tolerances(1e-10, 1e-10)
        };
        let (post, diag) = solve_adaptive(&p, spec, &cfg).unwrap();
        assert_eq!(diag.outcome, Outcome::MaxStepsExceeded);
        assert!(post.stats.steps_accepted + post.stats.steps_rejected <= 3);
    }
}
