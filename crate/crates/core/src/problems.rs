//! Initial value problems and the registry of benchmark problems.

use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type VectorField = dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync;
pub type JacobianFn = dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync;
/// Returns `(y(t₀), ẏ(t₀), …, y^(q)(t₀))` for a requested `q`.
pub type TaylorFn = dyn Fn(usize) -> Vec<DVector<f64>> + Send + Sync;
pub type AnalyticFn = dyn Fn(f64) -> DVector<f64> + Send + Sync;

/// An initial value problem `ẏ = f(y, t)`, `y(t₀) = y₀` on `[t₀, T]`.
#[derive(Clone)]
pub struct IvProblem {
    name: String,
    params: Vec<(String, f64)>,
    y0: DVector<f64>,
    t0: f64,
    t1: f64,
    f: Arc<VectorField>,
    jacobian: Option<Arc<JacobianFn>>,
    taylor: Option<Arc<TaylorFn>>,
    analytic: Option<Arc<AnalyticFn>>,
}

impl fmt::Debug for IvProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IvProblem")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("y0", &self.y0.as_slice())
            .field("tspan", &(self.t0, self.t1))
            .field("jacobian", &self.jacobian.is_some())
            .field("taylor", &self.taylor.is_some())
            .field("analytic", &self.analytic.is_some())
            .finish()
    }
}

impl IvProblem {
    pub fn new<F>(name: impl Into<String>, y0: DVector<f64>, tspan: (f64, f64), f: F) -> Self
    where
        F: Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            params: Vec::new(),
            y0,
            t0: tspan.0,
            t1: tspan.1,
            f: Arc::new(f),
            jacobian: None,
            taylor: None,
            analytic: None,
        }
    }

    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_taylor<T>(mut self, taylor: T) -> Self
    where
        T: Fn(usize) -> Vec<DVector<f64>> + Send + Sync + 'static,
    {
        self.taylor = Some(Arc::new(taylor));
        self
    }

    pub fn with_analytic<A>(mut self, sol: A) -> Self
    where
        A: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    {
        self.analytic = Some(Arc::new(sol));
        self
    }

    pub fn with_params(mut self, params: &[(&str, f64)]) -> Self {
        self.params = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        self
    }

    /// Same problem on a different time span (drops the Taylor initializer if `t₀` moves).
    pub fn with_tspan(mut self, t0: f64, t1: f64) -> Self {
        if t0 != self.t0 {
            self.taylor = None;
            if let Some(sol) = &self.analytic {
                self.y0 = sol(t0);
            }
        }
        self.t0 = t0;
        self.t1 = t1;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.y0.len()
    }

    pub fn y0(&self) -> &DVector<f64> {
        &self.y0
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn tspan(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    pub fn f(&self, y: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.f)(y, t)
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    /// Analytic Jacobian when supplied, otherwise central finite differences
    /// with step `1e-6 (1 + |y_j|)`.
    pub fn jacobian(&self, y: &DVector<f64>, t: f64) -> DMatrix<f64> {
        match &self.jacobian {
            Some(j) => j(y, t),
            None => finite_difference_jacobian(&*self.f, y, t),
        }
    }

    pub fn has_taylor(&self) -> bool {
        self.taylor.is_some()
    }

    pub fn taylor_derivatives(&self, q: usize) -> Option<Vec<DVector<f64>>> {
        self.taylor.as_ref().map(|t| t(q))
    }

    pub fn has_analytic(&self) -> bool {
        self.analytic.is_some()
    }

    pub fn analytic_value(&self, t: f64) -> Result<DVector<f64>> {
        analytic_value(self, t)
    }
}

pub fn finite_difference_jacobian(f: &VectorField, y: &DVector<f64>, t: f64) -> DMatrix<f64> {
    let d = y.len();
    let mut jac = DMatrix::zeros(d, d);
    let mut yp = y.clone();
    for j in 0..d {
        let step = 1e-6 * (1.0 + y[j].abs());
        yp[j] = y[j] + step;
        let fp = f(&yp, t);
        yp[j] = y[j] - step;
        let fm = f(&yp, t);
        yp[j] = y[j];
        jac.set_column(j, &((fp - fm) / (2.0 * step)));
    }
    jac
}

/// Exact solution value at `t`.
pub fn analytic_value(problem: &IvProblem, t: f64) -> Result<DVector<f64>> {
    let sol = problem
        .analytic
        .as_ref()
        .ok_or_else(|| Error::NoAnalyticSolution(problem.name.clone()))?;
    if !(problem.t0..=problem.t1).contains(&t) {
        return Err(Error::OutOfRange {
            t,
            t0: problem.t0,
            t1: problem.t1,
        });
    }
    Ok(sol(t))
}

/// Truncated Taylor series used to compute exact initial derivatives of autonomous problems.
#[derive(Debug, Clone, PartialEq)]
pub struct Series(pub Vec<f64>);

impl Series {
    pub fn constant(c: f64, len: usize) -> Self {
        let mut v = vec![0.0; len];
        v[0] = c;
        Series(v)
    }

    fn len(&self) -> usize {
        self.0.len()
    }
}

impl Add for &Series {
    type Output = Series;
    fn add(self, rhs: &Series) -> Series {
        Series(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &Series {
    type Output = Series;
    fn sub(self, rhs: &Series) -> Series {
        Series(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Mul for &Series {
    type Output = Series;
    fn mul(self, rhs: &Series) -> Series {
        let n = self.len();
        Series(
            (0..n)
                .map(|k| (0..=k).map(|j| self.0[j] * rhs.0[k - j]).sum())
                .collect(),
        )
    }
}

impl Mul<&Series> for f64 {
    type Output = Series;
    fn mul(self, rhs: &Series) -> Series {
        Series(rhs.0.iter().map(|v| self * v).collect())
    }
}

impl Add<f64> for &Series {
    type Output = Series;
    fn add(self, rhs: f64) -> Series {
        let mut s = self.clone();
        s.0[0] += rhs;
        s
    }
}

/// Derivatives `y^(0..=q)(t₀)` of the flow of an autonomous field given in series arithmetic.
///
/// Uses the recurrence `c_{k+1} = [f(y)]_k / (k + 1)` on Taylor coefficients.
pub fn taylor_derivatives_from_series<F>(field: F, y0: &DVector<f64>, q: usize) -> Vec<DVector<f64>>
where
    F: Fn(&[Series]) -> Vec<Series>,
{
    let n = q + 1;
    let d = y0.len();
    let mut y: Vec<Series> = y0.iter().map(|&v| Series::constant(v, n)).collect();
    for k in 0..q {
        let fy = field(&y);
        for (yi, fi) in y.iter_mut().zip(&fy) {
            yi.0[k + 1] = fi.0[k] / (k + 1) as f64;
        }
    }
    let mut fact = 1.0;
    (0..n)
        .map(|i| {
            if i > 0 {
                fact *= i as f64;
            }
            DVector::from_fn(d, |c, _| y[c].0[i] * fact)
        })
        .collect()
}

/// Which right-hand side to use for the predator-prey problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LotkaVolterraVariant {
    /// `ẏ₂ = −γ y₂ + δ y₁ y₂`.
    Classic,
    /// `ẏ₂ = −γ y₁ + δ y₁ y₂`, which blows up in finite time on `[0, 10]`.
    #[default]
    Literal,
}

pub const PROBLEM_NAMES: [&str; 5] = [
    "logistic",
    "lotka-volterra",
    "fitzhugh-nagumo",
    "vanderpol-stiff",
    "brusselator",
];

/// Looks up a registry problem with its default parameters.
pub fn get_problem(name: &str) -> Result<IvProblem> {
    get_problem_variant(name, None)
}

/// Looks up a registry problem; `variant` selects `classic` or `literal` (the default) for `lotka-volterra`.
pub fn get_problem_variant(name: &str, variant: Option<&str>) -> Result<IvProblem> {
    let unknown = || Error::UnknownProblem {
        name: name.to_string(),
        available: PROBLEM_NAMES.join(", "),
    };
    if variant.is_some() && name != "lotka-volterra" {
        return Err(Error::Config(format!("problem '{name}' has no variants")));
    }
    match name {
        "logistic" => Ok(logistic(3.0, 0.1, (0.0, 2.5))),
        "lotka-volterra" => {
            let v = match variant {
                Some("classic") => LotkaVolterraVariant::Classic,
                None | Some("literal") => LotkaVolterraVariant::Literal,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "unknown lotka-volterra variant '{other}' (classic, literal)"
                    )))
                }
            };
            Ok(lotka_volterra(v))
        }
        "fitzhugh-nagumo" => Ok(fitzhugh_nagumo()),
        "vanderpol-stiff" => Ok(van_der_pol(1e6)),
        "brusselator" => Ok(brusselator()),
        _ => Err(unknown()),
    }
}

fn vec2(a: f64, b: f64) -> DVector<f64> {
    DVector::from_vec(vec![a, b])
}

fn mat2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a, b, c, d])
}

/// `ẏ = r y (1 − y)` with closed-form solution `e^{rt} / (1/y₀ − 1 + e^{rt})`.
pub fn logistic(r: f64, y0: f64, tspan: (f64, f64)) -> IvProblem {
    let field = move |y: &[Series]| {
        let yy = &y[0] * &y[0];
        vec![r * &(&y[0] - &yy)]
    };
    let y0v = DVector::from_element(1, y0);
    let t0 = tspan.0;
    IvProblem::new("logistic", y0v.clone(), tspan, move |y, _| {
        DVector::from_element(1, r * y[0] * (1.0 - y[0]))
    })
    .with_params(&[("r", r), ("y0", y0)])
    .with_jacobian(move |y, _| DMatrix::from_element(1, 1, r * (1.0 - 2.0 * y[0])))
    .with_taylor(move |q| taylor_derivatives_from_series(field, &y0v, q))
    .with_analytic(move |t| {
        let e = (r * (t - t0)).exp();
        DVector::from_element(1, e / (1.0 / y0 - 1.0 + e))
    })
}

pub fn lotka_volterra(variant: LotkaVolterraVariant) -> IvProblem {
    let (alpha, beta, gamma, delta) = (1.5, 1.0, 3.0, 1.0);
    let literal = variant == LotkaVolterraVariant::Literal;
    let field = move |y: &[Series]| {
        let y1y2 = &y[0] * &y[1];
        let decay = if literal { &y[0] } else { &y[1] };
        vec![&(alpha * &y[0]) - &(beta * &y1y2), &(delta * &y1y2) - &(gamma * decay)]
    };
    let y0 = vec2(1.0, 1.0);
    let y0c = y0.clone();
    IvProblem::new("lotka-volterra", y0, (0.0, 10.0), move |y, _| {
        let decay = if literal { y[0] } else { y[1] };
        vec2(alpha * y[0] - beta * y[0] * y[1], -gamma * decay + delta * y[0] * y[1])
    })
    .with_params(&[
        ("alpha", alpha),
        ("beta", beta),
        ("gamma", gamma),
        ("delta", delta),
        ("literal", if literal { 1.0 } else { 0.0 }),
    ])
    .with_jacobian(move |y, _| {
        if literal {
            mat2(alpha - beta * y[1], -beta * y[0], -gamma + delta * y[1], delta * y[0])
        } else {
            mat2(alpha - beta * y[1], -beta * y[0], delta * y[1], -gamma + delta * y[0])
        }
    })
    .with_taylor(move |q| taylor_derivatives_from_series(field, &y0c, q))
}

pub fn fitzhugh_nagumo() -> IvProblem {
    let (a, b, c) = (0.2, 0.2, 3.0);
    let field = move |y: &[Series]| {
        let cube = &(&y[0] * &y[0]) * &y[0];
        let first = &(&y[0] - &((1.0 / 3.0) * &cube)) + &y[1];
        let second = &(&y[0] + (-a)) - &(b * &y[1]);
        vec![c * &first, (-1.0 / c) * &second]
    };
    let y0 = vec2(-1.0, 1.0);
    let y0c = y0.clone();
    IvProblem::new("fitzhugh-nagumo", y0, (0.0, 20.0), move |y, _| {
        vec2(c * (y[0] - y[0].powi(3) / 3.0 + y[1]), -(y[0] - a - b * y[1]) / c)
    })
    .with_params(&[("a", a), ("b", b), ("c", c)])
    .with_jacobian(move |y, _| mat2(c * (1.0 - y[0] * y[0]), c, -1.0 / c, b / c))
    .with_taylor(move |q| taylor_derivatives_from_series(field, &y0c, q))
}

/// Van der Pol in the form `ẏ₁ = y₂`, `ẏ₂ = μ((1 − y₁²) y₂ − y₁)` on `[0, 6.3]`.
pub fn van_der_pol(mu: f64) -> IvProblem {
    let field = move |y: &[Series]| {
        let y1sq = &y[0] * &y[0];
        let damp = &(&y[1] - &(&y1sq * &y[1])) - &y[0];
        vec![y[1].clone(), mu * &damp]
    };
    let y0 = vec2(0.0, 3f64.sqrt());
    let y0c = y0.clone();
    IvProblem::new("vanderpol-stiff", y0, (0.0, 6.3), move |y, _| {
        vec2(y[1], mu * ((1.0 - y[0] * y[0]) * y[1] - y[0]))
    })
    .with_params(&[("mu", mu)])
    .with_jacobian(move |y, _| mat2(0.0, 1.0, mu * (-2.0 * y[0] * y[1] - 1.0), mu * (1.0 - y[0] * y[0])))
    .with_taylor(move |q| taylor_derivatives_from_series(field, &y0c, q))
}

pub fn brusselator() -> IvProblem {
    let field = |y: &[Series]| {
        let y1sq_y2 = &(&y[0] * &y[0]) * &y[1];
        vec![&(&y1sq_y2 + 1.0) - &(4.0 * &y[0]), &(3.0 * &y[0]) - &y1sq_y2]
    };
    let y0 = vec2(1.5, 3.0);
    let y0c = y0.clone();
    IvProblem::new("brusselator", y0, (0.0, 10.0), |y, _| {
        let y1sq_y2 = y[0] * y[0] * y[1];
        vec2(1.0 + y1sq_y2 - 4.0 * y[0], 3.0 * y[0] - y1sq_y2)
    })
    .with_params(&[("a", 1.0), ("b", 3.0)])
    .with_jacobian(|y, _| {
        mat2(
            2.0 * y[0] * y[1] - 4.0,
            y[0] * y[0],
            3.0 - 2.0 * y[0] * y[1],
            -y[0] * y[0],
        )
    })
    .with_taylor(move |q| taylor_derivatives_from_series(field, &y0c, q))
}

/// Linear test problem `ẏ = M y + c` with `y(t₀) = y₀` (exact Taylor initializer, analytic Jacobian).
pub fn affine(m: DMatrix<f64>, c: DVector<f64>, y0: DVector<f64>, tspan: (f64, f64)) -> IvProblem {
    let (mf, cf) = (m.clone(), c.clone());
    let mj = m.clone();
    let y0c = y0.clone();
    IvProblem::new("affine", y0, tspan, move |y, _| &mf * y + &cf)
        .with_jacobian(move |_, _| mj.clone())
        .with_taylor(move |q| {
            let mut out = vec![y0c.clone()];
            if q >= 1 {
                out.push(&m * &y0c + &c);
            }
            for _ in 2..=q {
                let next = &m * out.last().unwrap();
                out.push(next);
            }
            out
        })
}
