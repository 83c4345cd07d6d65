//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Gauss–Legendre nodes and weights on `[-1, 1]`, by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// `exp(h F)` for the nilpotent shift `F` of the q-times integrated Wiener process,
/// summed as a finite power series.
pub fn shift_exponential(q: usize, h: f64) -> DMatrix<f64> {
    let n = q + 1;
    let f = DMatrix::from_fn(n, n, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=q {
        term = &term * &f * (h / k as f64);
        sum += &term;
    }
    sum
}

/// `Q(h) = ∫₀ʰ e^{sF} e_q e_qᵀ e^{sFᵀ} ds` by Gauss–Legendre quadrature, exact for the
/// polynomial integrand.
pub fn diffusion_quadrature(q: usize, h: f64) -> DMatrix<f64> {
    let n = q + 1;
    let mut acc = DMatrix::zeros(n, n);
    for (x, w) in gauss_legendre(q + 2) {
        let s = 0.5 * h * (x + 1.0);
        let col = shift_exponential(q, s).column(q).into_owned();
        acc += &col * col.transpose() * (0.5 * h * w);
    }
    acc
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.norm();
    if scale == 0.0 {
        a.norm()
    } else {
        (a - b).norm() / scale
    }
}

pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = b.norm().max(1e-300);
    (a - b).norm() / scale
}

/// One step of a plain (covariance-form) Kalman filter with noise-free measurement `0 = H x + c`.
#[derive(Debug, Clone)]
pub struct KalmanStep {
    pub m_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub m_filt: DVector<f64>,
    pub p_filt: DMatrix<f64>,
}

pub fn kalman_step(
    m: &DVector<f64>,
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    h: &DMatrix<f64>,
    c: &DVector<f64>,
) -> KalmanStep {
    let m_pred = a * m;
    let p_pred = a * p * a.transpose() + q;
    let s = h * &p_pred * h.transpose();
    let s_inv = s.try_inverse().expect("innovation covariance is invertible");
    let k = &p_pred * h.transpose() * s_inv;
    let resid = -(h * &m_pred + c);
    let m_filt = &m_pred + &k * resid;
    let i_kh = DMatrix::identity(m.len(), m.len()) - &k * h;
    // Joseph form, with zero measurement noise.
    let p_filt = &i_kh * &p_pred * i_kh.transpose();
    KalmanStep {
        m_pred,
        p_pred,
        m_filt,
        p_filt,
    }
}

/// Rauch–Tung–Striebel backward pass over a forward run starting at `(m0, p0)`.
pub fn rts(
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
    steps: &[KalmanStep],
    a: &DMatrix<f64>,
) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let n = steps.len();
    let mut out = vec![(steps[n - 1].m_filt.clone(), steps[n - 1].p_filt.clone()); n + 1];
    for k in (0..n).rev() {
        let (mf, pf) = if k == 0 {
            (m0.clone(), p0.clone())
        } else {
            (steps[k - 1].m_filt.clone(), steps[k - 1].p_filt.clone())
        };
        let next = &steps[k];
        // Gain against the diagonally equilibrated predicted covariance.
        let s = next.p_pred.diagonal().map(f64::sqrt);
        let scaled = DMatrix::from_fn(s.len(), s.len(), |i, j| next.p_pred[(i, j)] / (s[i] * s[j]));
        let chol = scaled.cholesky().expect("predicted covariance is positive definite");
        let apf = a * &pf;
        let rhs = DMatrix::from_fn(s.len(), s.len(), |i, j| apf[(i, j)] / s[i]);
        let gt = chol.solve(&rhs);
        let g = DMatrix::from_fn(s.len(), s.len(), |i, j| gt[(j, i)] / s[j]);
        let (ms, ps) = &out[k + 1];
        let m = &mf + &g * (ms - &next.m_pred);
        let p = &pf + &g * (ps - &next.p_pred) * g.transpose();
        out[k] = (m, p);
    }
    out
}
