//! Dense Levenberg–Marquardt for small nonlinear least-squares problems.
//!
//! Minimizes `‖r(x)‖²` with Marquardt's diagonal scaling of the damping
//! term. Only steps that strictly decrease the cost are accepted, so the cost
//! history is non-increasing by construction.

use nalgebra::{DMatrix, DVector};

/// A residual function `r: Rⁿ → Rᵐ` with a fixed residual count.
pub trait Residuals {
    fn residual_count(&self) -> usize;

    fn residuals(&self, params: &[f64], out: &mut [f64]);

    /// Fills `jac` (m×n). Defaults to forward differences with a relative step.
    fn jacobian(&self, params: &[f64], residuals: &[f64], jac: &mut DMatrix<f64>) {
        forward_difference(self, params, residuals, None, jac);
    }
}

/// Forward-difference Jacobian. With `step = None` each coordinate uses
/// `sqrt(eps) * max(|x|, 1)`.
pub fn forward_difference<P: Residuals + ?Sized>(
    problem: &P,
    params: &[f64],
    residuals: &[f64],
    step: Option<f64>,
    jac: &mut DMatrix<f64>,
) {
    let m = problem.residual_count();
    let mut x = params.to_vec();
    let mut shifted = vec![0.0; m];
    for j in 0..params.len() {
        let h = step.unwrap_or_else(|| f64::EPSILON.sqrt() * params[j].abs().max(1.0));
        x[j] = params[j] + h;
        problem.residuals(&x, &mut shifted);
        x[j] = params[j];
        for i in 0..m {
            jac[(i, j)] = (shifted[i] - residuals[i]) / h;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    /// Upper bound on solver iterations (accepted and rejected steps both count).
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Stop once an accepted step changes the cost by less than this fraction.
    pub relative_tolerance: f64,
    /// Stop once `‖Jᵀr‖∞` drops below this.
    pub gradient_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            relative_tolerance: 1e-6,
            gradient_tolerance: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub initial_gradient_norm: f64,
    pub gradient_norm: f64,
}

fn sum_squares(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

pub fn minimize<P: Residuals + ?Sized>(problem: &P, x0: &[f64], config: &LmConfig) -> LmOutcome {
    let n = x0.len();
    let m = problem.residual_count();
    let mut x = x0.to_vec();
    let mut r = vec![0.0; m];
    problem.residuals(&x, &mut r);
    let mut cost = sum_squares(&r);
    let initial_cost = cost;
    let mut history = vec![cost];

    let mut jac = DMatrix::zeros(m, n);
    let mut lambda = config.initial_lambda;
    let mut iterations = 0;
    let mut accepted = 0;
    let mut trial = vec![0.0; n];
    let mut trial_r = vec![0.0; m];

    let mut need_jacobian = true;
    let mut jtj = DMatrix::zeros(n, n);
    let mut grad = DVector::zeros(n);
    let mut initial_gradient_norm = f64::NAN;

    if n == 0 || m == 0 || !cost.is_finite() {
        return LmOutcome {
            params: x,
            initial_cost,
            cost,
            iterations: 0,
            accepted_steps: 0,
            cost_history: history,
            initial_gradient_norm: 0.0,
            gradient_norm: 0.0,
        };
    }

    while iterations < config.max_iterations {
        if need_jacobian {
            problem.jacobian(&x, &r, &mut jac);
            jtj = jac.tr_mul(&jac);
            grad = jac.tr_mul(&DVector::from_column_slice(&r));
            need_jacobian = false;
            if initial_gradient_norm.is_nan() {
                initial_gradient_norm = grad.norm();
            }
        }
        if cost == 0.0 || grad.amax() <= config.gradient_tolerance {
            break;
        }
        iterations += 1;

        let mut lhs = jtj.clone();
        for i in 0..n {
            let d = jtj[(i, i)].max(1e-12);
            lhs[(i, i)] += lambda * d;
        }
        let step = match lhs.cholesky() {
            Some(ch) => ch.solve(&(-&grad)),
            None => {
                lambda *= config.lambda_up;
                if lambda > 1e20 {
                    break;
                }
                continue;
            }
        };
        for i in 0..n {
            trial[i] = x[i] + step[i];
        }
        problem.residuals(&trial, &mut trial_r);
        let trial_cost = sum_squares(&trial_r);
        if trial_cost.is_finite() && trial_cost < cost {
            let relative = (cost - trial_cost) / cost;
            std::mem::swap(&mut x, &mut trial);
            std::mem::swap(&mut r, &mut trial_r);
            cost = trial_cost;
            history.push(cost);
            accepted += 1;
            lambda = (lambda * config.lambda_down).max(1e-15);
            need_jacobian = true;
            if relative < config.relative_tolerance {
                break;
            }
        } else {
            lambda *= config.lambda_up;
            if lambda > 1e20 {
                break;
            }
        }
    }

    let gradient_norm = if need_jacobian {
        problem.jacobian(&x, &r, &mut jac);
        jac.tr_mul(&DVector::from_column_slice(&r)).norm()
    } else {
        grad.norm()
    };
    if initial_gradient_norm.is_nan() {
        initial_gradient_norm = gradient_norm;
    }

    LmOutcome {
        params: x,
        initial_cost,
        cost,
        iterations,
        accepted_steps: accepted,
        cost_history: history,
        initial_gradient_norm,
        gradient_norm,
    }
}
