//! Local error estimation and proportional step-size control.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::kron_diag;
use crate::prior::{preconditioned_diffusion_factor, preconditioner, TransitionPair};
use crate::problems::IvProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub tau_abs: f64,
    pub tau_rel: f64,
    /// Safety factor.
    pub rho: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    /// Absolute minimal step. `None` means `1e-14 · (T − t₀)`.
    pub h_min: Option<f64>,
    pub max_consecutive_rejects: usize,
    /// Cap on attempted steps; `None` is unbounded.
    pub max_steps: Option<usize>,
    /// Compare `h·D` rather than `D` against the tolerances. `D` is a standard
    /// deviation of the derivative residual; multiplying by the step puts it in
    /// solution units, like the embedded estimate of a Runge–Kutta pair.
    pub step_scaled_error: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            tau_abs: 1e-6,
            tau_rel: 1e-3,
            rho: 0.9,
            eta_min: 0.2,
            eta_max: 10.0,
            h_min: None,
            max_consecutive_rejects: 20,
            max_steps: None,
            step_scaled_error: true,
        }
    }
}

impl ControllerConfig {
    pub fn with_tolerances(tau_abs: f64, tau_rel: f64) -> Self {
        Self {
            tau_abs,
            tau_rel,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_abs > 0.0
            && self.tau_rel > 0.0
            && self.rho > 0.0
            && self.rho <= 1.0
            && self.eta_min > 0.0
            && self.eta_min < 1.0
            && self.eta_max > 1.0
            && self.h_min.is_none_or(|h| h > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid controller configuration {self:?}")))
        }
    }

    /// The quantity compared against the tolerances for a step of length `h`.
    pub fn controlled_error(&self, d_vec: DVector<f64>, h: f64) -> DVector<f64> {
        if self.step_scaled_error {
            d_vec * h
        } else {
            d_vec
        }
    }

    pub fn min_step(&self, t0: f64, t1: f64) -> f64 {
        self.h_min.unwrap_or(1e-14 * (t1 - t0).abs())
    }
}

/// Outcome of one accept/reject decision.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    pub accept: bool,
    pub error_ratio: f64,
    pub h_next: f64,
    pub d_vec: DVector<f64>,
}

/// `Dᵢ = (H (Q̆ ⊗ diag(γ)) Hᵀ)ᵢᵢ^{1/2}`.
pub fn local_error(h_mat: &DMatrix<f64>, pair: &TransitionPair, gamma: &[f64]) -> DVector<f64> {
    let q = pair.order();
    let d = h_mat.nrows();
    let pre = match preconditioner(q, pair.h) {
        Ok(p) => p,
        Err(_) => return DVector::zeros(d),
    };
    let t_full = pre.expand(d);
    let mut h_bar = h_mat.clone();
    for (c, mut col) in h_bar.column_iter_mut().enumerate() {
        col *= t_full[c];
    }
    local_error_preconditioned(&h_bar, &preconditioned_diffusion_factor(q), gamma)
}

pub(crate) fn local_error_preconditioned(
    h_bar: &DMatrix<f64>,
    q_bar_factor: &DMatrix<f64>,
    gamma: &[f64],
) -> DVector<f64> {
    let sqrt_g = DVector::from_iterator(gamma.len(), gamma.iter().map(|g| g.max(0.0).sqrt()));
    let m = h_bar * kron_diag(q_bar_factor, &sqrt_g);
    DVector::from_fn(m.nrows(), |i, _| m.row(i).norm())
}

/// `E = sqrt(mean((Dᵢ / εᵢ)²))` with `εᵢ = τ_abs + τ_rel max(|y_prev,i|, |y_new,i|)`.
///
/// Any non-finite input yields `E = ∞`.
pub fn error_ratio(d_vec: &DVector<f64>, y_prev: &DVector<f64>, y_new: &DVector<f64>, cfg: &ControllerConfig) -> f64 {
    let d = d_vec.len();
    let mut acc = 0.0;
    for i in 0..d {
        let eps = cfg.tau_abs + cfg.tau_rel * y_prev[i].abs().max(y_new[i].abs());
        let r = d_vec[i] / eps;
        acc += r * r;
    }
    let e = (acc / d as f64).sqrt();
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Accepts iff `E ≤ 1`; proposes `h · clamp(ρ E^{-1/(q+1)}, η_min, η_max)`.
pub fn next_step(h: f64, e: f64, q: usize, cfg: &ControllerConfig) -> StepDecision {
    let factor = if e == 0.0 {
        cfg.eta_max
    } else if !e.is_finite() {
        cfg.eta_min
    } else {
        (cfg.rho * (1.0 / e).powf(1.0 / (q as f64 + 1.0))).clamp(cfg.eta_min, cfg.eta_max)
    };
    StepDecision {
        accept: e <= 1.0,
        error_ratio: e,
        h_next: h * factor,
        d_vec: DVector::zeros(0),
    }
}

/// ε-weighted RMS norm used by the initial step heuristic.
fn weighted_rms(v: &DVector<f64>, scale: &DVector<f64>) -> f64 {
    (v.iter().zip(scale.iter()).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Classic starting step `0.01 · ‖y₀‖ / ‖f(y₀, t₀)‖` in the tolerance-weighted norm,
/// clamped to `[h_min, (T − t₀)/10]`. Evaluates `f` once.
pub fn initial_step(problem: &IvProblem, _q: usize, cfg: &ControllerConfig) -> Result<f64> {
    initial_step_from(problem, &problem.f(problem.y0(), problem.t0()), cfg)
}

/// As [`initial_step`], with `f(y₀, t₀)` already evaluated.
pub fn initial_step_from(problem: &IvProblem, f0: &DVector<f64>, cfg: &ControllerConfig) -> Result<f64> {
    let (t0, t1) = problem.tspan();
    let span = t1 - t0;
    let h_max = span / 10.0;
    let h_min = cfg.min_step(t0, t1);
    let y0 = problem.y0();
    if f0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("vector field at the initial value"));
    }
    let scale = y0.map(|y| cfg.tau_abs + cfg.tau_rel * y.abs());
    let d0 = weighted_rms(y0, &scale);
    let d1 = weighted_rms(f0, &scale);
    let h0 = if d1 == 0.0 {
        h_max
    } else if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    Ok(h0.clamp(h_min, h_max))
}
