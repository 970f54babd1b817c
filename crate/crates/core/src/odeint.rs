//! Explicit initial-value solvers: fixed-step Euler and RK4, and adaptive
//! Dormand-Prince 5(4) with its 4th-order continuous extension.
//!
//! Solvers are generic over [`OdeState`], which is implemented both for plain
//! matrices (ground-truth simulation) and for tape-recorded values (model
//! forwards), so gradients flow through exactly the arithmetic the solver
//! performed.

use crate::error::{invalid, Error, Result};
use crate::Matrix;
use serde::{Deserialize, Serialize};

/// A vector-space element the solvers can integrate.
pub trait OdeState: Clone {
    /// Current numeric value, used for error control.
    fn value(&self) -> &Matrix;
    /// `sum_i c_i * x_i`; `terms` is never empty.
    fn lin_comb(terms: &[(f64, &Self)]) -> Result<Self>;
}

impl OdeState for Matrix {
    fn value(&self) -> &Matrix {
        self
    }

    fn lin_comb(terms: &[(f64, &Self)]) -> Result<Self> {
        lin_comb_values(terms.iter().map(|&(c, m)| (c, m)))
    }
}

pub(crate) fn lin_comb_values<'a>(
    mut terms: impl Iterator<Item = (f64, &'a Matrix)>,
) -> Result<Matrix> {
    let (c0, first) = terms
        .next()
        .ok_or_else(|| invalid("empty linear combination"))?;
    let mut out = first.scaled(c0);
    for (c, m) in terms {
        out.expect_same_shape(m, "lin_comb")?;
        if c != 0.0 {
            out.axpy(c, m);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

/// Step policy for the fixed-step methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// March with step `h` from 0, shortening the last step before each
    /// query time so it is hit exactly.
    Fixed(f64),
    /// Split every gap between consecutive query times (and 0 before the
    /// first) into this many equal steps.
    PerInterval(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub method: Method,
    pub step: StepRule,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl SolverSpec {
    pub fn euler(h: f64) -> Self {
        Self::fixed(Method::Euler, StepRule::Fixed(h))
    }

    pub fn rk4(h: f64) -> Self {
        Self::fixed(Method::Rk4, StepRule::Fixed(h))
    }

    pub fn fixed(method: Method, step: StepRule) -> Self {
        Self {
            method,
            step,
            rtol: 1e-7,
            atol: 1e-9,
            max_steps: 1_000_000,
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            step: StepRule::Fixed(f64::INFINITY),
            rtol,
            atol,
            max_steps: 1_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be >= 1"));
        }
        match self.method {
            Method::Dopri5 => {
                if !(self.rtol > 0.0 && self.atol > 0.0) {
                    return Err(invalid("adaptive tolerances must be positive"));
                }
            }
            Method::Euler | Method::Rk4 => match self.step {
                StepRule::Fixed(h) if !(h > 0.0 && h.is_finite()) => {
                    return Err(invalid(format!("fixed step must be positive, got {h}")))
                }
                StepRule::PerInterval(0) => {
                    return Err(invalid("need at least one step per interval"))
                }
                _ => {}
            },
        }
        Ok(())
    }
}

/// States reported at strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S = Matrix> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
}

impl<S> Trajectory<S> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn check_query_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(invalid("no query times"));
    }
    if !(times[0] >= 0.0) || !times.iter().all(|t| t.is_finite()) {
        return Err(invalid("query times must be finite and >= 0"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("query times must be strictly increasing"));
    }
    Ok(())
}

/// Integrates `dx/dt = rhs(t, x)` from `x(0) = x0` and reports the state at
/// every query time.
pub fn solve<S, F>(
    mut rhs: F,
    x0: &S,
    query_times: &[f64],
    spec: &SolverSpec,
) -> Result<Trajectory<S>>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    spec.validate()?;
    check_query_times(query_times)?;
    let states = match spec.method {
        Method::Euler | Method::Rk4 => fixed_step(&mut rhs, x0, query_times, spec)?,
        Method::Dopri5 => dopri5(&mut rhs, x0, query_times, spec)?,
    };
    Ok(Trajectory {
        times: query_times.to_vec(),
        states,
    })
}

fn fixed_step<S, F>(rhs: &mut F, x0: &S, query: &[f64], spec: &SolverSpec) -> Result<Vec<S>>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    let mut out = Vec::with_capacity(query.len());
    let mut t = 0.0;
    let mut x = x0.clone();
    let mut steps = 0usize;
    let mut take = |t: f64, x: &S, h: f64, steps: &mut usize| -> Result<S> {
        *steps += 1;
        if *steps > spec.max_steps {
            return Err(Error::Stiffness {
                t,
                reason: format!("exceeded {} steps", spec.max_steps),
            });
        }
        match spec.method {
            Method::Euler => {
                let k = rhs(t, x)?;
                S::lin_comb(&[(1.0, x), (h, &k)])
            }
            _ => {
                let k1 = rhs(t, x)?;
                let k2 = rhs(t + 0.5 * h, &S::lin_comb(&[(1.0, x), (0.5 * h, &k1)])?)?;
                let k3 = rhs(t + 0.5 * h, &S::lin_comb(&[(1.0, x), (0.5 * h, &k2)])?)?;
                let k4 = rhs(t + h, &S::lin_comb(&[(1.0, x), (h, &k3)])?)?;
                S::lin_comb(&[
                    (1.0, x),
                    (h / 6.0, &k1),
                    (h / 3.0, &k2),
                    (h / 3.0, &k3),
                    (h / 6.0, &k4),
                ])
            }
        }
    };
    for &tq in query {
        match spec.step {
            StepRule::Fixed(h) => {
                while tq - t > h * (1.0 + 1e-9) {
                    x = take(t, &x, h, &mut steps)?;
                    t += h;
                }
                if tq > t {
                    x = take(t, &x, tq - t, &mut steps)?;
                }
            }
            StepRule::PerInterval(k) => {
                let span = tq - t;
                if span > 0.0 {
                    let h = span / k as f64;
                    for i in 0..k {
                        x = take(t + i as f64 * h, &x, h, &mut steps)?;
                    }
                }
            }
        }
        t = tq;
        out.push(x.clone());
    }
    Ok(out)
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth minus fourth order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// continuous extension
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// RMS of `v / (atol + rtol * max(|a|, |b|))`.
fn error_norm(v: &Matrix, a: &Matrix, b: &Matrix, spec: &SolverSpec) -> f64 {
    let n = v.len().max(1) as f64;
    let sum: f64 = v
        .as_slice()
        .iter()
        .zip(a.as_slice().iter().zip(b.as_slice()))
        .map(|(&e, (&x, &y))| {
            let scale = spec.atol + spec.rtol * x.abs().max(y.abs());
            (e / scale).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn initial_step<S, F>(rhs: &mut F, x0: &S, f0: &S, spec: &SolverSpec) -> Result<f64>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    let x = x0.value();
    let d0 = error_norm(x, x, x, spec);
    let d1 = error_norm(f0.value(), x, x, spec);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let x1 = S::lin_comb(&[(1.0, x0), (h0, f0)])?;
    let f1 = rhs(h0, &x1)?;
    let diff = lin_comb_values([(1.0, f1.value()), (-1.0, f0.value())].into_iter())?;
    let d2 = error_norm(&diff, x, x, spec) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1))
}

fn dopri5<S, F>(rhs: &mut F, x0: &S, query: &[f64], spec: &SolverSpec) -> Result<Vec<S>>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S>,
{
    let mut out = Vec::with_capacity(query.len());
    let mut q = 0;
    while q < query.len() && query[q] == 0.0 {
        out.push(x0.clone());
        q += 1;
    }
    if q == query.len() {
        return Ok(out);
    }
    let t_end = *query.last().unwrap();
    let min_step = 1e-14 * t_end;
    let mut t = 0.0;
    let mut x = x0.clone();
    let mut k1 = rhs(0.0, &x)?;
    let mut h = initial_step(rhs, &x, &k1, spec)?.min(t_end);
    let mut steps = 0usize;

    while q < query.len() {
        steps += 1;
        if steps > spec.max_steps {
            return Err(Error::Stiffness {
                t,
                reason: format!("exceeded {} steps", spec.max_steps),
            });
        }
        let last = h >= t_end - t;
        if last {
            h = t_end - t;
        }
        if h < min_step {
            return Err(Error::Stiffness {
                t,
                reason: format!("step size {h:e} underflowed"),
            });
        }
        let k2 = rhs(t + C2 * h, &S::lin_comb(&[(1.0, &x), (h * A21, &k1)])?)?;
        let k3 = rhs(
            t + C3 * h,
            &S::lin_comb(&[(1.0, &x), (h * A31, &k1), (h * A32, &k2)])?,
        )?;
        let k4 = rhs(
            t + C4 * h,
            &S::lin_comb(&[(1.0, &x), (h * A41, &k1), (h * A42, &k2), (h * A43, &k3)])?,
        )?;
        let k5 = rhs(
            t + C5 * h,
            &S::lin_comb(&[
                (1.0, &x),
                (h * A51, &k1),
                (h * A52, &k2),
                (h * A53, &k3),
                (h * A54, &k4),
            ])?,
        )?;
        let k6 = rhs(
            t + h,
            &S::lin_comb(&[
                (1.0, &x),
                (h * A61, &k1),
                (h * A62, &k2),
                (h * A63, &k3),
                (h * A64, &k4),
                (h * A65, &k5),
            ])?,
        )?;
        let x_new = S::lin_comb(&[
            (1.0, &x),
            (h * B1, &k1),
            (h * B3, &k3),
            (h * B4, &k4),
            (h * B5, &k5),
            (h * B6, &k6),
        ])?;
        let t_new = if last { t_end } else { t + h };
        let k7 = rhs(t_new, &x_new)?;
        let err = lin_comb_values(
            [
                (h * E1, k1.value()),
                (h * E3, k3.value()),
                (h * E4, k4.value()),
                (h * E5, k5.value()),
                (h * E6, k6.value()),
                (h * E7, k7.value()),
            ]
            .into_iter(),
        )?;
        let norm = error_norm(&err, x.value(), x_new.value(), spec);
        if !norm.is_finite() {
            return Err(Error::Stiffness {
                t,
                reason: "non-finite error estimate".into(),
            });
        }
        if norm <= 1.0 {
            while q < query.len() && query[q] <= t_new {
                if query[q] == t_new {
                    out.push(x_new.clone());
                } else {
                    let theta = (query[q] - t) / h;
                    out.push(dense_output(
                        theta,
                        h,
                        &x,
                        &x_new,
                        [&k1, &k3, &k4, &k5, &k6, &k7],
                    )?);
                }
                q += 1;
            }
            t = t_new;
            x = x_new;
            k1 = k7;
            let factor = if norm == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            h *= factor;
        } else {
            h *= (SAFETY * norm.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
        }
    }
    Ok(out)
}

/// Hairer's 4th-order continuous extension, written as a linear combination
/// of the step endpoints and stage derivatives.
fn dense_output<S: OdeState>(theta: f64, h: f64, y0: &S, y1: &S, k: [&S; 6]) -> Result<S> {
    let [k1, k3, k4, k5, k6, k7] = k;
    let a = theta;
    let b = theta * (1.0 - theta);
    let c = theta * theta * (1.0 - theta);
    let e = c * (1.0 - theta);
    S::lin_comb(&[
        (1.0 - a + b - 2.0 * c, y0),
        (a - b + 2.0 * c, y1),
        (h * (b - c + e * D1), k1),
        (h * e * D3, k3),
        (h * e * D4, k4),
        (h * e * D5, k5),
        (h * e * D6, k6),
        (h * (e * D7 - c), k7),
    ])
}

/// Scalar test problems with closed-form solutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestProblem {
    /// `x' = -x`, `x(0) = 1`
    Decay,
    /// `x' = x`, `x(0) = 1`
    Growth,
}

impl TestProblem {
    fn rate(self) -> f64 {
        match self {
            TestProblem::Decay => -1.0,
            TestProblem::Growth => 1.0,
        }
    }

    pub fn exact(self, t: f64) -> f64 {
        (self.rate() * t).exp()
    }

    /// Absolute error at `t = 1` under `spec`.
    pub fn error_at_one(self, spec: &SolverSpec) -> Result<f64> {
        let rate = self.rate();
        let traj = solve(
            |_, x: &Matrix| Ok(x.scaled(rate)),
            &Matrix::scalar(1.0),
            &[1.0],
            spec,
        )?;
        Ok((traj.states[0].item() - self.exact(1.0)).abs())
    }
}

/// Ratio `error(spec) / error(refined)` at `t = 1`, where `refined` halves
/// the step (fixed-step methods) or the relative tolerance (adaptive).
pub fn order_check(spec: &SolverSpec, problem: TestProblem) -> Result<f64> {
    let mut refined = *spec;
    match spec.method {
        Method::Dopri5 => refined.rtol /= 2.0,
        _ => {
            refined.step = match spec.step {
                StepRule::Fixed(h) => StepRule::Fixed(h / 2.0),
                StepRule::PerInterval(k) => StepRule::PerInterval(2 * k),
            }
        }
    }
    Ok(problem.error_at_one(spec)? / problem.error_at_one(&refined)?)
}
