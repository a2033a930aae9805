//! Box-constrained quasi-Newton minimization.
//!
//! Projected BFGS: the search direction comes from an inverse-Hessian
//! approximation restricted to the free variables, steps are projected back
//! onto the box and accepted under an Armijo condition. Every accepted step
//! strictly lowers the objective, so the returned point is never worse than the
//! (projected) starting point.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tolerance: 1e-5,
            step_tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("objective returned a non-finite value")]
    NonFinite,
    #[error("bounds and start point have inconsistent dimensions")]
    Dimension,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    Step,
    MaxIterations,
    LineSearch,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

fn project(x: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

fn projected_gradient_norm(x: &DVector<f64>, g: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> f64 {
    (0..x.len())
        .map(|i| (x[i] - (x[i] - g[i]).clamp(lower[i], upper[i])).abs())
        .fold(0.0, f64::max)
}

/// Minimizes `f` over `lower ≤ x ≤ upper`; `f` returns value and gradient.
pub fn minimize_box<F>(
    mut f: F,
    x0: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    options: &SolverOptions,
) -> Result<Minimum, OptimError>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    if lower.len() != n || upper.len() != n {
        return Err(OptimError::Dimension);
    }
    let mut x = x0.clone();
    project(&mut x, lower, upper);
    let (mut fx, mut g) = f(&x);
    let mut evaluations = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite);
    }

    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut iterations = 0;
    let termination = loop {
        if projected_gradient_norm(&x, &g, lower, upper) < options.gradient_tolerance {
            break Termination::Gradient;
        }
        if iterations >= options.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;

        let scale = 1e-12 * (1.0 + x.amax());
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lower[i] + scale && g[i] > 0.0) || (x[i] >= upper[i] - scale && g[i] < 0.0))
            .collect();

        let mut accepted = None;
        for attempt in 0..2 {
            if attempt == 1 {
                if fresh {
                    break;
                }
                h = DMatrix::identity(n, n);
                fresh = true;
            }
            let mut gf = g.clone();
            for i in 0..n {
                if active[i] {
                    gf[i] = 0.0;
                }
            }
            let mut d = -(&h * &gf);
            for i in 0..n {
                if active[i] {
                    d[i] = 0.0;
                }
            }
            if g.dot(&d) >= 0.0 {
                h = DMatrix::identity(n, n);
                fresh = true;
                d = -gf;
            }
            let mut alpha = if fresh { (1.0 / d.amax().max(1e-12)).min(1.0) } else { 1.0 };
            for _ in 0..MAX_BACKTRACKS {
                let mut candidate = &x + &d * alpha;
                project(&mut candidate, lower, upper);
                let s = &candidate - &x;
                let decrease = g.dot(&s);
                if s.amax() == 0.0 {
                    break;
                }
                let (fc, gc) = f(&candidate);
                evaluations += 1;
                if !fc.is_finite() || gc.iter().any(|v| !v.is_finite()) {
                    return Err(OptimError::NonFinite);
                }
                if fc < fx && fc <= fx + ARMIJO_C1 * decrease.min(0.0) {
                    accepted = Some((candidate, fc, gc));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            break Termination::LineSearch;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        x = x_new;
        fx = f_new;
        g = g_new;
        if s.amax() < options.step_tolerance {
            break Termination::Step;
        }
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if fresh {
                // Scale the initial approximation to the observed curvature.
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
    };

    Ok(Minimum {
        x,
        value: fx,
        iterations,
        evaluations,
        termination,
    })
}
