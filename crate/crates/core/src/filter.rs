//! One extended Kalman filter step for the ODE measurement model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration;
use crate::error::{Error, Result};
use crate::gaussian::{sqrt_predict, sqrt_update, GaussianState, ResidualRecord};
use crate::prior::{IwpPrior, TransitionPair};
use crate::problems::IvProblem;

/// Linearization of the vector field inside the measurement model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinearizationOrder {
    /// `H = E₁` (EKF0).
    Zeroth,
    /// `H = E₁ − J_f(E₀ μᴾ, t) E₀` (EKF1).
    First,
}

/// Vector-field and Jacobian evaluation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub f_evals: usize,
    pub jac_evals: usize,
}

/// Everything produced by a single filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Time at the end of the step.
    pub t: f64,
    pub h: f64,
    pub predicted: GaussianState,
    pub filtered: GaussianState,
    pub residual: ResidualRecord,
    /// Measurement matrix in original coordinates.
    pub h_mat: DMatrix<f64>,
    /// Diagonal of the diffusion used for this step's process noise.
    pub diffusion: DVector<f64>,
    /// Whether a time-varying estimate had to be floored.
    pub diffusion_floored: bool,
}

/// How a step obtains its diffusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepDiffusion<'a> {
    /// A given diagonal diffusion.
    Given(&'a [f64]),
    /// Local scalar quasi-MLE from the step's own residual.
    TvScalar,
    /// Local diagonal quasi-MLE from the step's own residual (EKF0 only).
    TvDiagonal,
}

/// `(M ⊗ I_d) x` for the derivative-major layout.
pub(crate) fn kron_identity_apply(m: &DMatrix<f64>, x: &DVector<f64>, d: usize) -> DVector<f64> {
    let n = m.nrows();
    let mut out = DVector::zeros(n * d);
    for i in 0..n {
        for j in 0..m.ncols() {
            let a = m[(i, j)];
            if a != 0.0 {
                for k in 0..d {
                    out[i * d + k] += a * x[j * d + k];
                }
            }
        }
    }
    out
}

/// `M ⊗ diag(s)` as a dense matrix.
pub(crate) fn kron_diag(m: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    m.kronecker(&DMatrix::from_diagonal(s))
}

fn scale_columns(m: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (c, mut col) in out.column_iter_mut().enumerate() {
        col *= s[c];
    }
    out
}

fn scale_rows(m: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (r, mut row) in out.row_iter_mut().enumerate() {
        row *= s[r];
    }
    out
}

fn check_gamma(gamma: &[f64], d: usize) -> Result<()> {
    if gamma.len() != d {
        return Err(Error::Dimension(format!(
            "diffusion has {} entries, expected {d}",
            gamma.len()
        )));
    }
    match gamma.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        Some(&g) => Err(Error::NegativeDiffusion(g)),
        None => Ok(()),
    }
}

/// True when the factor has no coupling between different solution components,
/// i.e. entry `(i·d + k, j·d + l)` vanishes whenever `k ≠ l`.
pub(crate) fn is_separable(l: &DMatrix<f64>, d: usize) -> bool {
    if d == 1 {
        return true;
    }
    (0..l.nrows()).all(|r| (0..l.ncols()).all(|c| r % d == c % d || l[(r, c)] == 0.0))
}

fn extract_component(l: &DMatrix<f64>, d: usize, k: usize) -> DMatrix<f64> {
    let n = l.nrows() / d;
    DMatrix::from_fn(n, n, |i, j| l[(i * d + k, j * d + k)])
}

/// Advances `state` over `pair.h` with process noise `Q̆ ⊗ diag(gamma)`.
///
/// The covariance is propagated in preconditioned coordinates.
pub fn predict(state: &GaussianState, pair: &TransitionPair, gamma: &[f64], d: usize) -> Result<GaussianState> {
    check_gamma(gamma, d)?;
    let q = pair.order();
    if state.dim() != d * (q + 1) {
        return Err(Error::Dimension("state does not match prior".into()));
    }
    let prior = IwpPrior::new(q, d)?;
    let pre = prior.preconditioner(pair.h)?;
    let (t_full, t_inv) = (pre.expand(d), pre.expand_inverse(d));
    let m_bar = state.mean.component_mul(&t_inv);
    let mean = kron_identity_apply(prior.a_bar(), &m_bar, d).component_mul(&t_full);
    let l_bar = scale_rows(&state.cov_factor, &t_inv);
    let a_full = prior.a_bar().kronecker(&DMatrix::<f64>::identity(d, d));
    let sqrt_gamma = DVector::from_iterator(d, gamma.iter().map(|g| g.sqrt()));
    let lq = kron_diag(prior.q_bar_factor(), &sqrt_gamma);
    let lp = sqrt_predict(&a_full, &l_bar, &lq)?;
    let out = GaussianState::new(mean, scale_rows(&lp, &t_full));
    if !out.is_finite() {
        return Err(Error::NonFinite("prediction"));
    }
    Ok(out)
}

/// Residual `ẑ = E₁μᴾ − f(E₀μᴾ, t)` and the measurement matrix for `order`.
pub fn linearize(
    problem: &IvProblem,
    predicted_mean: &DVector<f64>,
    t: f64,
    order: LinearizationOrder,
    counts: &mut EvalCounts,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = problem.dim();
    let big = predicted_mean.len();
    if big < 2 * d || !big.is_multiple_of(d) {
        return Err(Error::Dimension("predicted mean does not match problem".into()));
    }
    let y = predicted_mean.rows(0, d).into_owned();
    let dy = predicted_mean.rows(d, d);
    counts.f_evals += 1;
    let f = problem.f(&y, t);
    if f.len() != d || f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("vector field evaluation"));
    }
    let z_hat = dy - f;
    let mut h = DMatrix::zeros(d, big);
    for k in 0..d {
        h[(k, d + k)] = 1.0;
    }
    if order == LinearizationOrder::First {
        counts.jac_evals += 1;
        let jac = problem.jacobian(&y, t);
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Jacobian evaluation"));
        }
        h.view_mut((0, 0), (d, d)).copy_from(&(-jac));
    }
    Ok((h, z_hat))
}

/// Predict, linearize and update with a given diagonal diffusion.
///
/// `t` is the time at the end of the step, `h` its length.
pub fn filter_step(
    prev: &GaussianState,
    problem: &IvProblem,
    t: f64,
    h: f64,
    gamma: &[f64],
    order: LinearizationOrder,
) -> Result<StepRecord> {
    let prior = IwpPrior::new(prev.dim() / problem.dim() - 1, problem.dim())?;
    let mut counts = EvalCounts::default();
    filter_step_with(
        prev,
        problem,
        &prior,
        t,
        h,
        StepDiffusion::Given(gamma),
        order,
        &mut counts,
    )
}

/// Full filter step, with the diffusion either given or estimated from the local residual.
#[allow(clippy::too_many_arguments)]
pub fn filter_step_with(
    prev: &GaussianState,
    problem: &IvProblem,
    prior: &IwpPrior,
    t: f64,
    h: f64,
    diffusion: StepDiffusion<'_>,
    order: LinearizationOrder,
    counts: &mut EvalCounts,
) -> Result<StepRecord> {
    let d = problem.dim();
    let q = prior.order();
    if prev.dim() != prior.state_dim() || prior.dim() != d {
        return Err(Error::Dimension("state does not match prior".into()));
    }
    let pre = prior.preconditioner(h)?;
    let (t_full, t_inv) = (pre.expand(d), pre.expand_inverse(d));

    let m_bar = prev.mean.component_mul(&t_inv);
    let mp_bar = kron_identity_apply(prior.a_bar(), &m_bar, d);
    let mp = mp_bar.component_mul(&t_full);
    if mp.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mean prediction"));
    }

    let (h_mat, z_hat) = linearize(problem, &mp, t, order, counts)?;
    let h_bar = scale_columns(&h_mat, &t_full);

    let (gamma, floored) = match diffusion {
        StepDiffusion::Given(g) => {
            check_gamma(g, d)?;
            (DVector::from_column_slice(g), false)
        }
        StepDiffusion::TvScalar => {
            let est = calibration::tv_scalar_preconditioned(&z_hat, &h_bar, prior.q_bar_factor());
            (DVector::from_element(d, est.value), est.floored)
        }
        StepDiffusion::TvDiagonal => {
            if order != LinearizationOrder::Zeroth {
                return Err(Error::Config(
                    "time-varying diagonal diffusion requires zeroth-order linearization".into(),
                ));
            }
            let q11 = pre.scale[1] * pre.scale[1] * prior.q_bar_factor().row(1).norm_squared();
            (calibration::tv_diagonal_from_variance(&z_hat, q11), false)
        }
    };
    let sqrt_gamma = gamma.map(f64::sqrt);

    let (predicted_bar, filtered_bar, residual) =
        if order == LinearizationOrder::Zeroth && is_separable(&prev.cov_factor, d) {
            separable_update(prev, prior, &mp_bar, &t_inv, pre.scale[1], &sqrt_gamma, &z_hat)?
        } else {
            let l_bar = scale_rows(&prev.cov_factor, &t_inv);
            let a_full = prior.a_bar().kronecker(&DMatrix::<f64>::identity(d, d));
            let lq = kron_diag(prior.q_bar_factor(), &sqrt_gamma);
            let lp = sqrt_predict(&a_full, &l_bar, &lq)?;
            let predicted_bar = GaussianState::new(mp_bar, lp);
            let (filtered_bar, residual) = sqrt_update(&predicted_bar, &h_bar, &z_hat)?;
            (predicted_bar, filtered_bar, residual)
        };

    let predicted = predicted_bar.scale_rows(&t_full);
    let filtered = filtered_bar.scale_rows(&t_full);
    if !filtered.is_finite() || !predicted.is_finite() {
        return Err(Error::NonFinite("filter step"));
    }
    debug_assert_eq!(q + 1, prior.a_bar().nrows());
    Ok(StepRecord {
        t,
        h,
        predicted,
        filtered,
        residual,
        h_mat,
        diffusion: gamma,
        diffusion_floored: floored,
    })
}

/// EKF0 on per-component `(q+1) × (q+1)` blocks, valid whenever the factor is separable.
fn separable_update(
    prev: &GaussianState,
    prior: &IwpPrior,
    mp_bar: &DVector<f64>,
    t_inv: &DVector<f64>,
    t1: f64,
    sqrt_gamma: &DVector<f64>,
    z_hat: &DVector<f64>,
) -> Result<(GaussianState, GaussianState, ResidualRecord)> {
    let d = prior.dim();
    let n = prior.order() + 1;
    let big = prior.state_dim();
    let mut lp_full = DMatrix::zeros(big, big);
    let mut lf_full = DMatrix::zeros(big, big);
    let mut mf_bar = DVector::zeros(big);
    let mut s_factor = DMatrix::zeros(d, d);
    let mut whitened = DVector::zeros(d);
    let mut h_small = DMatrix::zeros(1, n);
    h_small[(0, 1)] = t1;
    for k in 0..d {
        let mut l_k = extract_component(&prev.cov_factor, d, k);
        for (i, mut row) in l_k.row_iter_mut().enumerate() {
            row *= t_inv[i * d];
        }
        let lq = prior.q_bar_factor() * sqrt_gamma[k];
        let lp = sqrt_predict(prior.a_bar(), &l_k, &lq)?;
        let m_k = DVector::from_fn(n, |i, _| mp_bar[i * d + k]);
        let pred_k = GaussianState::new(m_k, lp.clone());
        let (filt_k, rec_k) = sqrt_update(&pred_k, &h_small, &DVector::from_element(1, z_hat[k]))?;
        for i in 0..n {
            mf_bar[i * d + k] = filt_k.mean[i];
            for j in 0..n {
                lp_full[(i * d + k, j * d + k)] = lp[(i, j)];
                lf_full[(i * d + k, j * d + k)] = filt_k.cov_factor[(i, j)];
            }
        }
        s_factor[(k, k)] = rec_k.s_factor[(0, 0)];
        whitened[k] = rec_k.whitened[0];
    }
    let residual = ResidualRecord {
        z_hat: z_hat.clone(),
        s_factor,
        whitened,
    };
    Ok((
        GaussianState::new(mp_bar.clone(), lp_full),
        GaussianState::new(mf_bar, lf_full),
        residual,
    ))
}
