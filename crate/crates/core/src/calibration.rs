//! Diffusion estimators: fixed and time-varying, scalar and diagonal.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{kron_diag, LinearizationOrder, StepRecord};
use crate::gaussian::{triangularize, GaussianState};
use crate::prior::{preconditioned_diffusion_factor, preconditioner, TransitionPair};

/// Lower bound applied to every diffusion estimate.
pub const DIFFUSION_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiffusionModel {
    FixedScalar,
    FixedDiagonal,
    TvScalar,
    TvDiagonal,
}

impl DiffusionModel {
    pub fn is_fixed(self) -> bool {
        matches!(self, DiffusionModel::FixedScalar | DiffusionModel::FixedDiagonal)
    }

    pub fn is_diagonal(self) -> bool {
        matches!(self, DiffusionModel::FixedDiagonal | DiffusionModel::TvDiagonal)
    }

    /// Diagonal models rely on the EKF0 Kronecker structure.
    pub fn validate(self, order: LinearizationOrder) -> Result<()> {
        if self.is_diagonal() && order != LinearizationOrder::Zeroth {
            return Err(Error::Config(format!(
                "diffusion model '{self}' requires zeroth-order linearization (ekf0/eks0)"
            )));
        }
        Ok(())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DiffusionModel::FixedScalar => "fixed",
            DiffusionModel::FixedDiagonal => "fixed-mv",
            DiffusionModel::TvScalar => "tv",
            DiffusionModel::TvDiagonal => "tv-mv",
        }
    }
}

impl fmt::Display for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DiffusionModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(DiffusionModel::FixedScalar),
            "fixed-mv" => Ok(DiffusionModel::FixedDiagonal),
            "tv" => Ok(DiffusionModel::TvScalar),
            "tv-mv" => Ok(DiffusionModel::TvDiagonal),
            other => Err(Error::Config(format!(
                "unknown diffusion model '{other}' (fixed, fixed-mv, tv, tv-mv)"
            ))),
        }
    }
}

/// Running sufficient statistics of the fixed-diffusion quasi-MLE.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationState {
    pub n: usize,
    /// Sum over steps of `‖S^{-1/2} ẑ‖² / d`.
    pub running_scalar: f64,
    /// Per component, the sum over steps of `ẑᵢ² / s̆ₙ`.
    pub running_diag: DVector<f64>,
}

impl CalibrationState {
    pub fn new(d: usize) -> Self {
        Self {
            n: 0,
            running_scalar: 0.0,
            running_diag: DVector::zeros(d),
        }
    }

    /// The estimate over the steps seen so far, or `None` before the first step.
    pub fn current(&self, model: DiffusionModel) -> Option<DVector<f64>> {
        finalize_fixed(self, model).ok()
    }
}

/// Adds one accepted step, computed under unit diffusion, to the running sums.
pub fn accumulate(cal: &CalibrationState, record: &StepRecord) -> Result<CalibrationState> {
    let d = cal.running_diag.len();
    let res = &record.residual;
    if res.z_hat.len() != d {
        return Err(Error::Dimension("residual does not match calibration state".into()));
    }
    if res.whitened.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("whitened residual"));
    }
    let mut next = cal.clone();
    next.n += 1;
    next.running_scalar += res.whitened.norm_squared() / d as f64;
    for i in 0..d {
        let s = res.s_factor.row(i).norm_squared();
        let z2 = res.z_hat[i] * res.z_hat[i];
        if z2 > 0.0 {
            if !(s > 0.0) {
                return Err(Error::NonFinite("diagonal calibration"));
            }
            next.running_diag[i] += z2 / s;
        }
    }
    if !next.running_scalar.is_finite() || next.running_diag.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibration accumulators"));
    }
    Ok(next)
}

/// The fixed-model estimate: `σ̂²` broadcast to `d` entries, or the diagonal `Γ̂`.
pub fn finalize_fixed(cal: &CalibrationState, model: DiffusionModel) -> Result<DVector<f64>> {
    if cal.n == 0 {
        return Err(Error::NoData);
    }
    let n = cal.n as f64;
    let d = cal.running_diag.len();
    let est = match model {
        DiffusionModel::FixedDiagonal => cal.running_diag.map(|v| v / n),
        _ => DVector::from_element(d, cal.running_scalar / n),
    };
    Ok(est.map(|v| v.max(DIFFUSION_FLOOR)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarEstimate {
    pub value: f64,
    /// Set when the local covariance was singular or the estimate hit the floor.
    pub floored: bool,
}

/// Local scalar estimate `σ̂ₙ² = ẑᵀ (H (Q̆ ⊗ I) Hᵀ)⁻¹ ẑ / d`.
pub fn estimate_tv_scalar(z_hat: &DVector<f64>, pair: &TransitionPair, h_mat: &DMatrix<f64>) -> ScalarEstimate {
    let q = pair.order();
    let d = z_hat.len();
    let pre = match preconditioner(q, pair.h) {
        Ok(p) => p,
        Err(_) => {
            return ScalarEstimate {
                value: DIFFUSION_FLOOR,
                floored: true,
            }
        }
    };
    let t_full = pre.expand(d);
    let mut h_bar = h_mat.clone();
    for (c, mut col) in h_bar.column_iter_mut().enumerate() {
        col *= t_full[c];
    }
    tv_scalar_preconditioned(z_hat, &h_bar, &preconditioned_diffusion_factor(q))
}

/// Same estimate with `H` already expressed in preconditioned coordinates.
pub(crate) fn tv_scalar_preconditioned(
    z_hat: &DVector<f64>,
    h_bar: &DMatrix<f64>,
    q_bar_factor: &DMatrix<f64>,
) -> ScalarEstimate {
    let d = z_hat.len();
    let m = h_bar * kron_diag(q_bar_factor, &DVector::from_element(d, 1.0));
    let s = triangularize(&m);
    let floor = ScalarEstimate {
        value: DIFFUSION_FLOOR,
        floored: true,
    };
    if (0..d).any(|i| !(s[(i, i)] > 0.0)) {
        return floor;
    }
    match s.solve_lower_triangular(z_hat) {
        Some(w) if w.iter().all(|v| v.is_finite()) => {
            let v = w.norm_squared() / d as f64;
            if v < DIFFUSION_FLOOR {
                floor
            } else {
                ScalarEstimate {
                    value: v,
                    floored: false,
                }
            }
        }
        _ => floor,
    }
}

/// Local diagonal estimate `Γ̂ᵢᵢ = ẑᵢ² / Q̆₁₁`, floored.
pub fn estimate_tv_diagonal(z_hat: &DVector<f64>, pair: &TransitionPair) -> DVector<f64> {
    tv_diagonal_from_variance(z_hat, pair.q_small[(1, 1)])
}

pub(crate) fn tv_diagonal_from_variance(z_hat: &DVector<f64>, q11: f64) -> DVector<f64> {
    z_hat.map(|z| {
        let v = z * z / q11;
        if v.is_finite() {
            v.max(DIFFUSION_FLOOR)
        } else {
            DIFFUSION_FLOOR
        }
    })
}

/// Rescales a state computed under unit diffusion to diffusion `diag(gamma)`.
pub fn rescale_state(state: &GaussianState, gamma: &DVector<f64>) -> GaussianState {
    let d = gamma.len();
    let mut out = state.clone();
    for (r, mut row) in out.cov_factor.row_iter_mut().enumerate() {
        row *= gamma[r % d].sqrt();
    }
    out
}

/// Rescales every covariance of a unit-diffusion solve to `diag(gamma)`; means are untouched.
pub fn rescale_posterior(records: &[StepRecord], gamma: &DVector<f64>) -> Vec<StepRecord> {
    let sqrt_g = gamma.map(f64::sqrt);
    records
        .iter()
        .map(|rec| {
            let mut out = rec.clone();
            out.predicted = rescale_state(&rec.predicted, gamma);
            out.filtered = rescale_state(&rec.filtered, gamma);
            for (r, mut row) in out.residual.s_factor.row_iter_mut().enumerate() {
                row *= sqrt_g[r];
            }
            if let Some(w) = out.residual.s_factor.solve_lower_triangular(&(-&rec.residual.z_hat)) {
                if w.iter().all(|v| v.is_finite()) {
                    out.residual.whitened = w;
                }
            }
            out.diffusion = rec.diffusion.component_mul(gamma);
            out
        })
        .collect()
}
