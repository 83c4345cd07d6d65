//! Integrated Wiener process prior.
//!
//! The stacked state is laid out derivative-major: `X = (X⁰, X¹, …, X^q)` where
//! each block holds one derivative of all `d` solution components, so that state
//! index `i * d + k` is derivative `i` of component `k`. With this layout the
//! transition matrices are plain Kronecker products `Ă ⊗ I_d` and `Q̆ ⊗ Γ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gaussian::GaussianState;
use crate::problems::IvProblem;

/// Highest supported number of modelled derivatives.
pub const MAX_ORDER: usize = 5;

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

fn check_step(h: f64) -> Result<()> {
    if h.is_finite() && h > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidStep(h))
    }
}

/// A q-times integrated Wiener process prior over a `d`-dimensional solution.
///
/// Holds the step-independent preconditioned transition matrix and the
/// Cholesky factor of the preconditioned process noise, which are reused by
/// every step of a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct IwpPrior {
    q: usize,
    d: usize,
    a_bar: DMatrix<f64>,
    q_bar_factor: DMatrix<f64>,
}

impl IwpPrior {
    pub fn new(q: usize, d: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidOrder(q));
        }
        if d == 0 {
            return Err(Error::Dimension("ODE dimension must be at least 1".into()));
        }
        Ok(Self {
            q,
            d,
            a_bar: preconditioned_transition(q),
            q_bar_factor: preconditioned_diffusion_factor(q),
        })
    }

    pub fn order(&self) -> usize {
        self.q
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Stacked state dimension `d (q + 1)`.
    pub fn state_dim(&self) -> usize {
        self.d * (self.q + 1)
    }

    pub fn transitions(&self, h: f64) -> Result<TransitionPair> {
        iwp_transitions(self.q, h)
    }

    pub fn preconditioner(&self, h: f64) -> Result<Preconditioner> {
        preconditioner(self.q, h)
    }

    /// `T⁻¹ Ă(h) T`, independent of `h`.
    pub fn a_bar(&self) -> &DMatrix<f64> {
        &self.a_bar
    }

    /// Lower Cholesky factor of `T⁻¹ Q̆(h) T⁻ᵀ`, independent of `h`.
    pub fn q_bar_factor(&self) -> &DMatrix<f64> {
        &self.q_bar_factor
    }

    /// Selector for derivative block `i`, a `d × D` matrix `e_iᵀ ⊗ I_d`.
    pub fn selector(&self, i: usize) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.d, self.state_dim());
        for k in 0..self.d {
            e[(k, i * self.d + k)] = 1.0;
        }
        e
    }
}

/// The discrete-time transition of the one-dimensional IWP over a step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPair {
    pub h: f64,
    /// `Ă(h)`, unit upper triangular.
    pub a_small: DMatrix<f64>,
    /// `Q̆(h)`, symmetric positive semi-definite.
    pub q_small: DMatrix<f64>,
}

impl TransitionPair {
    pub fn order(&self) -> usize {
        self.a_small.nrows() - 1
    }
}

/// Computes `Ă(h)` and `Q̆(h)` for the q-times integrated Wiener process.
///
/// `Ă_ij = h^(j-i) / (j-i)!` for `i <= j`, and
/// `Q̆_ij = h^(2q+1-i-j) / ((2q+1-i-j) (q-i)! (q-j)!)`, with 0-based indices.
pub fn iwp_transitions(q: usize, h: f64) -> Result<TransitionPair> {
    if q == 0 {
        return Err(Error::InvalidOrder(q));
    }
    check_step(h)?;
    let n = q + 1;
    let a_small = DMatrix::from_fn(n, n, |i, j| {
        if i <= j {
            h.powi((j - i) as i32) / factorial(j - i)
        } else {
            0.0
        }
    });
    let q_small = DMatrix::from_fn(n, n, |i, j| {
        let p = 2 * q + 1 - i - j;
        h.powi(p as i32) / (p as f64 * factorial(q - i) * factorial(q - j))
    });
    Ok(TransitionPair { h, a_small, q_small })
}

/// Expands the one-dimensional transition into `A = Ă ⊗ I_d` and `Q = Q̆ ⊗ diag(gamma)`.
///
/// The solver never calls this in its inner loop; it is the dense reference form.
pub fn expand_transitions(pair: &TransitionPair, d: usize, gamma: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if gamma.len() != d {
        return Err(Error::Dimension(format!(
            "diffusion has {} entries, expected {d}",
            gamma.len()
        )));
    }
    if let Some(&g) = gamma.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        return Err(Error::NegativeDiffusion(g));
    }
    let gamma = DMatrix::from_diagonal(&DVector::from_column_slice(gamma));
    let a = pair.a_small.kronecker(&DMatrix::<f64>::identity(d, d));
    let q = pair.q_small.kronecker(&gamma);
    Ok((a, q))
}

/// Diagonal coordinate scaling `T` for a step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    pub scale: DVector<f64>,
    pub inverse_scale: DVector<f64>,
}

impl Preconditioner {
    /// The scaling expanded to the stacked state (`T ⊗ I_d`), as a vector.
    pub fn expand(&self, d: usize) -> DVector<f64> {
        expand_blocks(&self.scale, d)
    }

    pub fn expand_inverse(&self, d: usize) -> DVector<f64> {
        expand_blocks(&self.inverse_scale, d)
    }
}

/// Repeats each of the `q + 1` entries `d` times, matching the derivative-major layout.
pub fn expand_blocks(v: &DVector<f64>, d: usize) -> DVector<f64> {
    DVector::from_fn(v.len() * d, |r, _| v[r / d])
}

/// `T_i = √h · h^(q-i) / (q-i)!`.
///
/// In these coordinates `T⁻¹ Ă(h) T` has binomial entries and `T⁻¹ Q̆(h) T⁻ᵀ`
/// has entries `1 / (2q + 1 - i - j)`, both independent of `h`.
pub fn preconditioner(q: usize, h: f64) -> Result<Preconditioner> {
    if q == 0 {
        return Err(Error::InvalidOrder(q));
    }
    check_step(h)?;
    let sqrt_h = h.sqrt();
    let scale = DVector::from_fn(q + 1, |i, _| sqrt_h * h.powi((q - i) as i32) / factorial(q - i));
    let inverse_scale = scale.map(|s| 1.0 / s);
    Ok(Preconditioner { scale, inverse_scale })
}

/// `T⁻¹ Ă(h) T`: entry `(i, j)` is `C(q - i, j - i)` for `i <= j`.
pub fn preconditioned_transition(q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(q + 1, q + 1, |i, j| if i <= j { binomial(q - i, j - i) } else { 0.0 })
}

/// Lower Cholesky factor of `T⁻¹ Q̆(h) T⁻ᵀ = [1 / (2q + 1 - i - j)]`.
pub fn preconditioned_diffusion_factor(q: usize) -> DMatrix<f64> {
    let q_bar = DMatrix::from_fn(q + 1, q + 1, |i, j| 1.0 / (2 * q + 1 - i - j) as f64);
    q_bar
        .cholesky()
        .expect("the preconditioned IWP covariance is a Hilbert matrix and positive definite")
        .unpack()
}

/// Exact initial state `(y(t₀), ẏ(t₀), …, y^(q)(t₀))` with zero covariance.
///
/// Problems without a Taylor initializer fall back to conditioning a unit
/// Gaussian on `X⁰ = y₀` and `X¹ = f(y₀, t₀)`: those two blocks are exact and
/// every higher derivative has mean zero and unit standard deviation.
pub fn taylor_initial_state(problem: &IvProblem, q: usize) -> Result<GaussianState> {
    if q == 0 {
        return Err(Error::InvalidOrder(q));
    }
    let d = problem.dim();
    let big = d * (q + 1);
    if problem.y0().iter().any(|v| !v.is_finite()) {
        return Err(Error::MissingInitialValue(problem.name().to_string()));
    }
    let mut mean = DVector::zeros(big);
    let mut factor = DMatrix::zeros(big, big);
    match problem.taylor_derivatives(q) {
        Some(derivs) => {
            for (i, di) in derivs.iter().enumerate().take(q + 1) {
                mean.rows_mut(i * d, d).copy_from(di);
            }
        }
        None => {
            let f0 = problem.f(problem.y0(), problem.t0());
            if f0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("initial vector field evaluation"));
            }
            mean.rows_mut(0, d).copy_from(problem.y0());
            mean.rows_mut(d, d).copy_from(&f0);
            for r in 2 * d..big {
                factor[(r, r)] = 1.0;
            }
        }
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Taylor initialization"));
    }
    Ok(GaussianState::new(mean, factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn q1_unit_step_diffusion() {
        let p = iwp_transitions(1, 1.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.5, 0.5, 1.0]);
        assert_relative_eq!(p.q_small, expected, epsilon = 1e-15);
    }

    #[test]
    fn q2_transition_at_tenth() {
        let p = iwp_transitions(2, 0.1).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.1, 0.005, 0.0, 1.0, 0.1, 0.0, 0.0, 1.0]);
        assert_relative_eq!(p.a_small, expected, epsilon = 1e-15);
    }

    #[test]
    fn q2_unit_step_diffusion() {
        let p = iwp_transitions(2, 1.0).unwrap();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(3, 3, &[
            1.0 / 20.0, 1.0 / 8.0, 1.0 / 6.0,
            1.0 / 8.0, 1.0 / 3.0, 0.5,
            1.0 / 6.0, 0.5, 1.0,
        ]);
        assert_relative_eq!(p.q_small, expected, epsilon = 1e-15);
    }

    #[test]
    fn tiny_step_approaches_identity() {
        let p = iwp_transitions(3, 1e-300).unwrap();
        assert_relative_eq!(p.a_small, DMatrix::identity(4, 4), epsilon = 1e-290);
        assert!(p.q_small.iter().all(|v| v.abs() < 1e-290));
    }

    #[test]
    fn rejects_bad_steps() {
        for h in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(iwp_transitions(2, h), Err(Error::InvalidStep(_))));
            assert!(matches!(preconditioner(2, h), Err(Error::InvalidStep(_))));
        }
    }

    #[test]
    fn expansion_is_kronecker() {
        let p = iwp_transitions(1, 1.0).unwrap();
        let (a, q) = expand_transitions(&p, 2, &[1.0, 4.0]).unwrap();
        assert_eq!(a.nrows(), 4);
        for bi in 0..2 {
            for bj in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        let g = if k == l { [1.0, 4.0][k] } else { 0.0 };
                        assert_eq!(q[(bi * 2 + k, bj * 2 + l)], p.q_small[(bi, bj)] * g);
                        let i = if k == l { 1.0 } else { 0.0 };
                        assert_eq!(a[(bi * 2 + k, bj * 2 + l)], p.a_small[(bi, bj)] * i);
                    }
                }
            }
        }
        let ident = TransitionPair {
            h: 0.0,
            a_small: DMatrix::identity(2, 2),
            q_small: DMatrix::zeros(2, 2),
        };
        let (a, _) = expand_transitions(&ident, 2, &[1.0, 1.0]).unwrap();
        assert_eq!(a, DMatrix::identity(4, 4));

        let (_, q) = expand_transitions(&p, 1, &[2.5]).unwrap();
        assert_relative_eq!(q, p.q_small.clone() * 2.5);
        assert!(matches!(
            expand_transitions(&p, 2, &[1.0, -1.0]),
            Err(Error::NegativeDiffusion(_))
        ));
    }

    #[test]
    fn preconditioner_unit_step() {
        let t = preconditioner(1, 1.0).unwrap();
        assert_relative_eq!(t.scale, DVector::from_vec(vec![1.0, 1.0]));
    }

    #[test]
    fn preconditioned_diffusion_is_order_one_at_tiny_steps() {
        let h = 1e-8;
        let t = preconditioner(1, h).unwrap();
        let p = iwp_transitions(1, h).unwrap();
        let ti = DMatrix::from_diagonal(&t.inverse_scale);
        let q_bar = &ti * &p.q_small * ti.transpose();
        for v in q_bar.iter() {
            assert!((1e-2..=1e2).contains(&v.abs()), "{v}");
        }
        let a_bar = &ti * &p.a_small * DMatrix::from_diagonal(&t.scale);
        assert_relative_eq!(a_bar, preconditioned_transition(1), max_relative = 1e-12);
    }

    #[test]
    fn preconditioner_roundtrip() {
        let t = preconditioner(4, 3.7e-5).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0, 3e5, 4e-7, 0.5]);
        let back = x.component_mul(&t.scale).component_mul(&t.inverse_scale);
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs());
        }
    }

    #[test]
    fn selectors_pick_derivative_blocks() {
        let prior = IwpPrior::new(2, 3).unwrap();
        let x = DVector::from_fn(9, |r, _| r as f64);
        assert_eq!((prior.selector(1) * &x).as_slice(), &[3.0, 4.0, 5.0]);
    }
}
