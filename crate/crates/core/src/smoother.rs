//! Rauch–Tung–Striebel backward pass and Gauss–Markov dense output.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::{kron_diag, kron_identity_apply, predict, StepRecord};
use crate::gaussian::{triangularize, GaussianState};
use crate::prior::IwpPrior;

/// Smoothed posterior on the solver grid, with what is needed to interpolate between nodes.
#[derive(Debug, Clone)]
pub struct SmoothedGrid {
    pub times: Vec<f64>,
    pub states: Vec<GaussianState>,
    /// Filtering marginals on the same grid.
    pub filtered: Vec<GaussianState>,
    /// Diffusion of interval `(times[n], times[n + 1])`.
    pub diffusions: Vec<DVector<f64>>,
    prior: IwpPrior,
}

impl SmoothedGrid {
    pub fn prior(&self) -> &IwpPrior {
        &self.prior
    }
}

/// One backward step: conditions the transition from `filtered` (at `t`) over `h`
/// on the smoothed marginal `next` at `t + h`.
///
/// Works in the preconditioned coordinates of step `h`. The gain
/// `G = Σᶠ Aᵀ (Σᴾ)⁻¹` comes from a triangular solve against the predicted
/// factor, obtained together with the backward noise factor from one QR of
/// `[[(A Lᶠ)ᵀ, Lᶠᵀ], [L_Qᵀ, 0]]`.
pub(crate) fn backward_step(
    prior: &IwpPrior,
    filtered: &GaussianState,
    h: f64,
    gamma: &DVector<f64>,
    next: &GaussianState,
    t_next: f64,
) -> Result<GaussianState> {
    let d = prior.dim();
    let big = prior.state_dim();
    let pre = prior.preconditioner(h)?;
    let (t_full, t_inv) = (pre.expand(d), pre.expand_inverse(d));

    let mf_bar = filtered.mean.component_mul(&t_inv);
    let mut lf_bar = filtered.cov_factor.clone();
    let mut ls_next_bar = next.cov_factor.clone();
    for r in 0..big {
        lf_bar.row_mut(r).scale_mut(t_inv[r]);
        ls_next_bar.row_mut(r).scale_mut(t_inv[r]);
    }
    let ms_next_bar = next.mean.component_mul(&t_inv);

    let a_full = prior.a_bar().kronecker(&DMatrix::<f64>::identity(d, d));
    let lq = kron_diag(prior.q_bar_factor(), &gamma.map(f64::sqrt));

    let mut pre_array = DMatrix::zeros(2 * big, 2 * big);
    pre_array
        .view_mut((0, 0), (big, big))
        .copy_from(&(&a_full * &lf_bar).transpose());
    pre_array.view_mut((0, big), (big, big)).copy_from(&lf_bar.transpose());
    pre_array.view_mut((big, 0), (big, big)).copy_from(&lq.transpose());
    let r = pre_array.qr().unpack_r();

    let r1 = r.view((0, 0), (big, big)).into_owned();
    let r12 = r.view((0, big), (big, big)).into_owned();
    let r2 = r.view((big, big), (big, big)).into_owned();
    if (0..big).any(|i| !(r1[(i, i)].abs() > 0.0)) {
        return Err(Error::DegenerateInterval(t_next));
    }
    let gain_t = r1
        .solve_upper_triangular(&r12)
        .ok_or(Error::DegenerateInterval(t_next))?;
    let gain = gain_t.transpose();

    let mp_bar = kron_identity_apply(prior.a_bar(), &mf_bar, d);
    let ms_bar = &mf_bar + &gain * (ms_next_bar - mp_bar);

    let mut stacked = DMatrix::zeros(big, 2 * big);
    stacked.columns_mut(0, big).copy_from(&(&gain * &ls_next_bar));
    stacked.columns_mut(big, big).copy_from(&r2.transpose());
    let ls_bar = triangularize(&stacked);

    let out = GaussianState::new(ms_bar, ls_bar).scale_rows(&t_full);
    if !out.is_finite() {
        return Err(Error::NonFinite("smoothing step"));
    }
    Ok(out)
}

/// Backward recursion over a forward pass that started from `initial` at `t0`.
pub fn smooth_pass(prior: &IwpPrior, t0: f64, initial: &GaussianState, records: &[StepRecord]) -> Result<SmoothedGrid> {
    let mut times = Vec::with_capacity(records.len() + 1);
    let mut filtered = Vec::with_capacity(records.len() + 1);
    times.push(t0);
    filtered.push(initial.clone());
    for rec in records {
        if rec.t <= *times.last().unwrap() {
            return Err(Error::Degenerate(format!(
                "step records are not increasing in time at t = {}",
                rec.t
            )));
        }
        times.push(rec.t);
        filtered.push(rec.filtered.clone());
    }
    let diffusions: Vec<_> = records.iter().map(|r| r.diffusion.clone()).collect();

    let n = filtered.len();
    let mut states = vec![filtered[n - 1].clone(); n];
    for k in (0..n - 1).rev() {
        let rec = &records[k];
        states[k] = backward_step(prior, &filtered[k], rec.h, &rec.diffusion, &states[k + 1], rec.t)?;
    }
    Ok(SmoothedGrid {
        times,
        states,
        filtered,
        diffusions,
        prior: prior.clone(),
    })
}

/// Index `n` with `times[n] <= t < times[n + 1]`, or the last node for `t = T`.
pub(crate) fn locate(times: &[f64], t: f64) -> Result<usize> {
    let (t0, t1) = (times[0], *times.last().unwrap());
    if !(t >= t0 && t <= t1) {
        return Err(Error::OutOfRange { t, t0, t1 });
    }
    Ok(times.partition_point(|&s| s <= t) - 1)
}

/// Posterior marginal at any `t ∈ [t₀, T]`: the stored node at grid times,
/// otherwise the filter prediction from the left node conditioned on the
/// smoothed state at the right node.
pub fn interpolate(grid: &SmoothedGrid, t: f64) -> Result<GaussianState> {
    let n = locate(&grid.times, t)?;
    if grid.times[n] == t {
        return Ok(grid.states[n].clone());
    }
    let gamma = &grid.diffusions[n];
    let h_left = t - grid.times[n];
    let h_right = grid.times[n + 1] - t;
    let pair = grid.prior.transitions(h_left)?;
    let at_t = predict(&grid.filtered[n], &pair, gamma.as_slice(), grid.prior.dim())?;
    backward_step(
        &grid.prior,
        &at_t,
        h_right,
        gamma,
        &grid.states[n + 1],
        grid.times[n + 1],
    )
}
