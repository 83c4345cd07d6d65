//! Gaussian states in square-root form and the factored predict/update primitives.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A Gaussian `N(mean, L Lᵀ)` carried through its lower-triangular factor `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov_factor: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, cov_factor: DMatrix<f64>) -> Self {
        debug_assert_eq!(mean.len(), cov_factor.nrows());
        Self { mean, cov_factor }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.cov_factor * self.cov_factor.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.cov_factor.iter()).all(|v| v.is_finite())
    }

    /// Multiplies row `r` of the mean and factor by `s[r]` (a diagonal change of coordinates).
    pub fn scale_rows(&self, s: &DVector<f64>) -> GaussianState {
        let mut factor = self.cov_factor.clone();
        for (r, mut row) in factor.row_iter_mut().enumerate() {
            row *= s[r];
        }
        GaussianState::new(self.mean.component_mul(s), factor)
    }
}

/// Quantities of a single measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRecord {
    /// Predicted residual `ẑ = E₁μᴾ − f(E₀μᴾ, t)`.
    pub z_hat: DVector<f64>,
    /// Lower-triangular factor of the innovation covariance `S`.
    pub s_factor: DMatrix<f64>,
    /// `S^{-1/2} (0 − ẑ)`.
    pub whitened: DVector<f64>,
}

impl ResidualRecord {
    pub fn innovation_covariance(&self) -> DMatrix<f64> {
        &self.s_factor * self.s_factor.transpose()
    }
}

/// Lower-triangular `L` (n × n) with `L Lᵀ = M Mᵀ` for an `n × k` matrix `M`.
///
/// Computed from the QR decomposition of `Mᵀ`; the diagonal of the result is
/// non-negative.
pub fn triangularize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let r = m.transpose().qr().unpack_r();
    let mut l = DMatrix::zeros(n, n);
    let rows = r.nrows().min(n);
    for i in 0..rows {
        let sign = if r[(i, i)] < 0.0 { -1.0 } else { 1.0 };
        for j in i..n {
            l[(j, i)] = sign * r[(i, j)];
        }
    }
    l
}

/// Factor of `A L_F L_Fᵀ Aᵀ + L_Q L_Qᵀ`, never forming either covariance.
pub fn sqrt_predict(a: &DMatrix<f64>, l_filter: &DMatrix<f64>, l_process: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if l_filter.nrows() != n || l_process.nrows() != n {
        return Err(Error::Dimension("predict factors disagree with transition".into()));
    }
    let propagated = a * l_filter;
    let mut stacked = DMatrix::zeros(n, propagated.ncols() + l_process.ncols());
    stacked.columns_mut(0, propagated.ncols()).copy_from(&propagated);
    stacked
        .columns_mut(propagated.ncols(), l_process.ncols())
        .copy_from(l_process);
    let l = triangularize(&stacked);
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance prediction"));
    }
    Ok(l)
}

// Pivots at or below this are treated as exact zeros of the innovation factor.
const SINGULAR_PIVOT: f64 = 1e-290;

/// Conditions `predicted` on the noiseless observation `0 = H x + (ẑ − H μᴾ)`.
///
/// Uses the square-root array form: the pre-array `[H L; L]` is lower
/// triangularized into `[S^{1/2} 0; K̄ L_F]`, with `K = K̄ S^{-1/2}`. Zero pivots of
/// `S^{1/2}` are tolerated when the residual carries no component along them.
pub fn sqrt_update(
    predicted: &GaussianState,
    h_mat: &DMatrix<f64>,
    z_hat: &DVector<f64>,
) -> Result<(GaussianState, ResidualRecord)> {
    let big = predicted.dim();
    let m = h_mat.nrows();
    if h_mat.ncols() != big || z_hat.len() != m {
        return Err(Error::Dimension(format!(
            "measurement matrix {}x{} and residual {} do not match state {big}",
            h_mat.nrows(),
            h_mat.ncols(),
            z_hat.len()
        )));
    }
    let l = &predicted.cov_factor;
    let mut pre = DMatrix::zeros(m + big, big);
    pre.rows_mut(0, m).copy_from(&(h_mat * l));
    pre.rows_mut(m, big).copy_from(l);

    let r = pre.transpose().qr().unpack_r();
    // Post-array in lower-triangular form, rows m + big, columns min(big, m + big) = big.
    let mut post = r.transpose();
    for c in 0..post.ncols().min(post.nrows()) {
        if post[(c, c)] < 0.0 {
            post.column_mut(c).neg_mut();
        }
    }
    let pivots = m.min(big);
    let mut s_factor = DMatrix::zeros(m, m);
    s_factor
        .view_mut((0, 0), (m, pivots))
        .copy_from(&post.view((0, 0), (m, pivots)));
    let gain_bar = post.view((m, 0), (big, pivots)).into_owned();

    // Forward substitution for w = S^{-1/2}(0 − ẑ), skipping consistent zero pivots.
    let scale = z_hat.amax().max(1.0);
    let mut whitened = DVector::zeros(m);
    let mut singular = Vec::new();
    for i in 0..m {
        let mut num = -z_hat[i];
        for j in 0..i.min(pivots) {
            num -= s_factor[(i, j)] * whitened[j];
        }
        let pivot = if i < pivots { s_factor[(i, i)] } else { 0.0 };
        if pivot.abs() <= SINGULAR_PIVOT {
            if num.abs() > 1e-12 * scale {
                return Err(Error::SingularInnovation);
            }
            if i < pivots {
                singular.push(i);
            }
        } else {
            whitened[i] = num / pivot;
        }
    }
    if whitened.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("innovation whitening"));
    }

    let mean = &predicted.mean + &gain_bar * whitened.rows(0, pivots);
    let rest = post.view((m, pivots), (big, big - pivots.min(big)));
    let factor = if singular.is_empty() {
        let mut f = DMatrix::zeros(big, big);
        f.columns_mut(0, rest.ncols()).copy_from(&rest);
        f
    } else {
        // Directions with zero innovation variance keep their predicted spread.
        let mut cols = DMatrix::zeros(big, singular.len() + rest.ncols());
        for (c, &i) in singular.iter().enumerate() {
            cols.set_column(c, &gain_bar.column(i));
        }
        cols.columns_mut(singular.len(), rest.ncols()).copy_from(&rest);
        triangularize(&cols)
    };
    if mean.iter().chain(factor.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement update"));
    }
    let record = ResidualRecord {
        z_hat: z_hat.clone(),
        s_factor,
        whitened,
    };
    Ok((GaussianState::new(mean, factor), record))
}

/// Mean and marginal standard deviations of the solution block `X⁰` (the first `d` entries).
pub fn marginal_solution(state: &GaussianState, d: usize) -> (DVector<f64>, DVector<f64>) {
    let mean = state.mean.rows(0, d).into_owned();
    let std = DVector::from_fn(d, |k, _| state.cov_factor.row(k).norm());
    (mean, std)
}

/// The `d × d` covariance of the solution block `X⁰`.
pub fn marginal_covariance(state: &GaussianState, d: usize) -> DMatrix<f64> {
    let rows = state.cov_factor.rows(0, d);
    rows * rows.transpose()
}
