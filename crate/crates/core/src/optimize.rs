//! BFGS with a backtracking line search.
//!
//! Minimizes a smooth function given value and gradient. A step is taken
//! when it satisfies the sufficient-decrease condition or, once function
//! differences sink into rounding noise, when `f` rises by no more than a
//! few ulps and the largest gradient component shrinks.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Convergence threshold on the largest absolute gradient component.
    pub gtol: f64,
    /// Stop once an accepted step moves no coordinate by more than this.
    pub step_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gtol: 1e-6,
            step_tol: 1e-10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    LineSearchFailed,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective value at the start and after every accepted step.
    pub trajectory: Vec<f64>,
}

impl BfgsOutcome {
    pub fn gradient_norm(&self) -> f64 {
        max_abs(&self.gradient)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

/// Minimizes `objective`, which returns `(value, gradient)` at a point.
pub fn minimize<F>(mut objective: F, x0: &[f64], opts: &BfgsOptions) -> BfgsOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut f, g0) = objective(x.as_slice());
    let mut g = DVector::from_vec(g0);
    let mut inv_hessian = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut trajectory = vec![f];
    let mut iterations = 0;

    let termination = loop {
        if max_abs(g.as_slice()) <= opts.gtol {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iter {
            break Termination::MaxIterations;
        }

        let mut accepted = None;
        for attempt in 0..2 {
            if attempt == 1 {
                // retry once from a fresh (scaled) identity
                inv_hessian = DMatrix::identity(n, n);
                scaled = false;
            }
            let mut direction = -(&inv_hessian * &g);
            if g.dot(&direction) >= 0.0 {
                inv_hessian = DMatrix::identity(n, n);
                scaled = false;
                direction = -g.clone();
            }
            let initial = if scaled {
                1.0
            } else {
                (1.0 / max_abs(direction.as_slice())).min(1.0)
            };
            if let Some(step) = line_search(&mut objective, &x, f, &g, &direction, initial) {
                accepted = Some(step);
                break;
            }
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break Termination::LineSearchFailed;
        };
        iterations += 1;

        let s = &x_new - &x;
        let y = &g_new - &g;
        x = x_new;
        f = f_new;
        g = g_new;
        trajectory.push(f);

        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                inv_hessian = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &inv_hessian * &y;
            let yhy = y.dot(&hy);
            // H+ = H - ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            inv_hessian -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            inv_hessian += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }

        if max_abs(s.as_slice()) <= opts.step_tol && max_abs(g.as_slice()) > opts.gtol {
            break Termination::StepTolerance;
        }
    };

    BfgsOutcome {
        x: x.as_slice().to_vec(),
        value: f,
        gradient: g.as_slice().to_vec(),
        iterations,
        termination,
        trajectory,
    }
}

fn line_search<F>(
    objective: &mut F,
    x: &DVector<f64>,
    f: f64,
    g: &DVector<f64>,
    direction: &DVector<f64>,
    initial: f64,
) -> Option<(DVector<f64>, f64, DVector<f64>)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let slope = g.dot(direction);
    let g_norm = max_abs(g.as_slice());
    let noise = 8.0 * f64::EPSILON * f.abs().max(1.0);
    let mut alpha = initial;
    for _ in 0..MAX_BACKTRACKS {
        let candidate = x + direction * alpha;
        if candidate == *x {
            return None;
        }
        let (f_new, g_new) = objective(candidate.as_slice());
        if f_new.is_finite() {
            let g_new = DVector::from_vec(g_new);
            if f_new <= f + ARMIJO * alpha * slope
                || (f_new <= f + noise && max_abs(g_new.as_slice()) < g_norm)
            {
                return Some((candidate, f_new, g_new));
            }
            // minimizer of the quadratic through f, slope and f_new
            let denom = 2.0 * (f_new - f - slope * alpha);
            let trial = if denom > 0.0 {
                -slope * alpha * alpha / denom
            } else {
                0.5 * alpha
            };
            alpha = trial.clamp(0.1 * alpha, 0.5 * alpha);
        } else {
            alpha *= 0.1;
        }
    }
    None
}
