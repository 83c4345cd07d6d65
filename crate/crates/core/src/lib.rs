//! Gaussian ODE filters and smoothers with integrated Wiener process priors,
//! square-root Kalman updates, quasi-maximum-likelihood diffusion calibration
//! and local-error step-size control.
//!
//! ```
//! use odefilter::{get_problem, solve_adaptive, ControllerConfig, DiffusionModel, SolverSpec};
//!
//! let problem = get_problem("logistic").unwrap();
//! let spec = SolverSpec::new("eks1", 3, DiffusionModel::TvScalar).unwrap();
//! let (posterior, diag) = solve_adaptive(&problem, spec, &ControllerConfig::with_tolerances(1e-8, 1e-5)).unwrap();
//! assert!(diag.is_success());
//! let exact = problem.analytic_value(problem.t1()).unwrap();
//! assert!((posterior.final_mean() - exact).amax() < 1e-5);
//! ```

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod calibration;
pub mod cli;
pub mod control;
pub mod error;
pub mod filter;
pub mod gaussian;
pub mod metrics;
pub mod prior;
pub mod problems;
pub mod smoother;
pub mod solver;

pub use calibration::DiffusionModel;
pub use control::ControllerConfig;
pub use error::{Error, Result};
pub use filter::LinearizationOrder;
pub use gaussian::GaussianState;
pub use prior::IwpPrior;
pub use problems::{get_problem, get_problem_variant, IvProblem};
pub use solver::{solve_adaptive, solve_fixed, OdePosterior, Outcome, SolveDiagnostics, SolverSpec};
