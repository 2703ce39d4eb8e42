//! Explicit (forward) Euler integration of initial value problems.
//!
//! The solver exists to make the step-size story of the residual trunk
//! concrete on a classical problem: the update `x_{n+1} = x_n + h * f(t_n, x_n)`
//! is exactly the residual-block update with the branch in place of `f`, and
//! its stability behaviour as `h` grows is the same story the training
//! experiments tell at network scale.

use crate::error::{Error, Result};

/// Right-hand side of an IVP: `f(t, x)`.
pub type Rhs = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;

/// Known solution `x(t)`, used to measure solver error.
pub type Analytic = dyn Fn(f64) -> Vec<f64> + Send + Sync;

/// An initial value problem `dx/dt = f(t, x)`, `x(0) = x0`, solved on
/// `[0, t_end]`, optionally with a known analytic solution.
pub struct IvpProblem {
    pub rhs: Box<Rhs>,
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub analytic: Option<Box<Analytic>>,
}

impl IvpProblem {
    pub fn new(rhs: Box<Rhs>, x0: Vec<f64>, t_end: f64) -> Result<IvpProblem> {
        if !t_end.is_finite() || t_end <= 0.0 {
            return Err(Error::InvalidArgument {
                arg: "t_end",
                reason: format!("must be positive and finite, got {t_end}"),
            });
        }
        if x0.is_empty() || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument {
                arg: "x0",
                reason: "must be non-empty and finite".to_string(),
            });
        }
        Ok(IvpProblem {
            rhs,
            x0,
            t_end,
            analytic: None,
        })
    }

    pub fn with_analytic(mut self, analytic: Box<Analytic>) -> IvpProblem {
        self.analytic = Some(analytic);
        self
    }

    /// The benchmark problem used throughout: `dx/dt = -2.3 x`, `x(0) = 1`,
    /// whose solution is `exp(-2.3 t)`. Explicit Euler on it is stable for
    /// `h < 2/2.3` and oscillates with growing amplitude beyond that.
    pub fn decay_benchmark(t_end: f64) -> Result<IvpProblem> {
        Ok(IvpProblem::new(
            Box::new(|_t, x| vec![-2.3 * x[0]]),
            vec![1.0],
            t_end,
        )?
        .with_analytic(Box::new(|t| vec![(-2.3 * t).exp()])))
    }
}

/// Solution trajectory: `states[n]` is the state at `times[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least x0")
    }
}

/// Integrates the problem with the fixed step `h`.
///
/// Interior steps use exactly `h` with `t_n = n * h`; the final step is
/// truncated so the trajectory lands exactly on `t_end`. The trajectory has
/// `ceil(t_end / h) + 1` points. A non-finite state ends the solve with an
/// error carrying the offending step index; explicit Euler on stiff problems
/// is *expected* to blow up for large `h`, and callers report that instead
/// of crashing.
pub fn euler_solve(problem: &IvpProblem, h: f64) -> Result<Trajectory> {
    if !h.is_finite() || h <= 0.0 || h > problem.t_end {
        return Err(Error::InvalidArgument {
            arg: "h",
            reason: format!("must satisfy 0 < h <= t_end ({}), got {h}", problem.t_end),
        });
    }
    let ratio = problem.t_end / h;
    // Guard against the ratio landing a hair above an integer: 10 steps of
    // h = 0.07 cover t_end = 0.7 even though 0.7 / 0.07 > 10 in floats.
    let n_steps = if (ratio - ratio.round()).abs() < 1e-9 {
        ratio.round() as usize
    } else {
        ratio.ceil() as usize
    };

    let dim = problem.x0.len();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(0.0);
    states.push(problem.x0.clone());

    let mut x = problem.x0.clone();
    for n in 0..n_steps {
        let t_n = n as f64 * h;
        let t_next = if n + 1 == n_steps {
            problem.t_end
        } else {
            (n + 1) as f64 * h
        };
        let dt = t_next - t_n;
        let dx = (problem.rhs)(t_n, &x);
        if dx.len() != dim {
            return Err(Error::DimensionMismatch {
                op: "euler_solve rhs",
                expected: dim,
                actual: dx.len(),
            });
        }
        for (xi, dxi) in x.iter_mut().zip(&dx) {
            *xi += dt * dxi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "euler_solve state",
                step: n + 1,
            });
        }
        times.push(t_next);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Largest Euclidean distance between the trajectory and the problem's
/// analytic solution over all trajectory points. Errors if the problem has
/// no analytic solution attached.
pub fn max_abs_error(trajectory: &Trajectory, problem: &IvpProblem) -> Result<f64> {
    let analytic = problem.analytic.as_ref().ok_or(Error::InvalidArgument {
        arg: "problem.analytic",
        reason: "max_abs_error needs a problem with a known solution".to_string(),
    })?;
    let mut worst = 0.0f64;
    for (t, state) in trajectory.times.iter().zip(&trajectory.states) {
        let exact = analytic(*t);
        if exact.len() != state.len() {
            return Err(Error::DimensionMismatch {
                op: "max_abs_error analytic",
                expected: state.len(),
                actual: exact.len(),
            });
        }
        let dist = state
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(dist);
    }
    Ok(worst)
}
