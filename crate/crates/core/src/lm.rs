//! Damped least squares (Levenberg–Marquardt) for small dense problems.
//!
//! The damping follows Nielsen's gain-ratio update: a step is accepted when
//! it reduces the cost, and `λ` is scaled by how well the quadratic model
//! predicted that reduction.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Converged when `‖δ‖ < step_tol·(‖p‖ + step_tol)`.
    pub step_tol: f64,
    /// Converged when `‖Jᵀr‖∞ < grad_tol`.
    pub grad_tol: f64,
    /// Initial damping relative to the largest diagonal entry of `JᵀJ`.
    pub tau: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iter: 200,
            step_tol: 1e-8,
            grad_tol: 1e-10,
            tau: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResult {
    pub params: Vec<f64>,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Standard errors from `s²·(JᵀJ)⁻¹` with `s² = cost/(n − p)`; `None`
    /// when the normal matrix is singular or `n ≤ p`.
    pub std_errors: Option<Vec<f64>>,
}

/// A least-squares model: fills residuals and the Jacobian (`n × p`,
/// derivative of each residual by each parameter) at `p`. Returns `false`
/// when `p` lies outside the model's domain, which rejects the step.
pub trait Model {
    fn n_residuals(&self) -> usize;
    fn eval(&self, p: &[f64], r: &mut [f64], jac: Option<&mut DMatrix<f64>>) -> bool;
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

pub fn minimize<M: Model>(model: &M, p0: &[f64], opts: &LmOptions) -> LmResult {
    let n = model.n_residuals();
    let np = p0.len();
    let mut p = DVector::from_column_slice(p0);
    let mut r = vec![0.0; n];
    let mut jac = DMatrix::zeros(n, np);
    if !model.eval(p.as_slice(), &mut r, Some(&mut jac)) {
        return LmResult {
            params: p0.to_vec(),
            cost: f64::INFINITY,
            iterations: 0,
            converged: false,
            std_errors: None,
        };
    }
    let mut cost = cost_of(&r);
    let mut trial_r = vec![0.0; n];
    let mut a = jac.tr_mul(&jac);
    let mut g = jac.tr_mul(&DVector::from_column_slice(&r));
    let max_diag = (0..np).map(|i| a[(i, i)]).fold(0.0f64, f64::max);
    let mut lambda = opts.tau * max_diag.max(f64::MIN_POSITIVE);
    let mut nu = 2.0;
    let mut converged = g.amax() < opts.grad_tol;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let mut damped = a.clone();
        for i in 0..np {
            damped[(i, i)] += lambda * a[(i, i)].max(1e-12 * max_diag.max(1e-300));
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
            lambda *= nu;
            nu *= 2.0;
            continue;
        };
        let small = step.norm() < opts.step_tol * (p.norm() + opts.step_tol);
        let trial = &p + &step;
        let ok = model.eval(trial.as_slice(), &mut trial_r, None);
        let trial_cost = if ok { cost_of(&trial_r) } else { f64::INFINITY };
        // predicted reduction of the quadratic model, for the 2·cost scale
        let predicted = -(step.dot(&g) * 2.0 + step.dot(&(&a * &step)));
        let rho = if predicted > 0.0 {
            (cost - trial_cost) / predicted
        } else {
            -1.0
        };
        if trial_cost.is_finite() && trial_cost <= cost && rho > 0.0 {
            p = trial;
            model.eval(p.as_slice(), &mut r, Some(&mut jac));
            cost = cost_of(&r);
            a = jac.tr_mul(&jac);
            g = jac.tr_mul(&DVector::from_column_slice(&r));
            lambda *= (1.0 / 3.0f64).max(1.0 - (2.0 * rho - 1.0).powi(3));
            nu = 2.0;
            converged = small || g.amax() < opts.grad_tol;
        } else {
            if small {
                // the step is already below tolerance and cannot improve
                converged = true;
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if !lambda.is_finite() {
                break;
            }
        }
    }

    let std_errors = if n > np {
        a.clone().try_inverse().map(|inv| {
            let s2 = cost / (n - np) as f64;
            (0..np).map(|i| (s2 * inv[(i, i)]).max(0.0).sqrt()).collect()
        })
    } else {
        None
    };
    LmResult {
        params: p.as_slice().to_vec(),
        cost,
        iterations,
        converged,
        std_errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Exp {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl Model for Exp {
        fn n_residuals(&self) -> usize {
            self.t.len()
        }
        fn eval(&self, p: &[f64], r: &mut [f64], jac: Option<&mut DMatrix<f64>>) -> bool {
            let mut jac = jac;
            for (i, (&t, &y)) in self.t.iter().zip(&self.y).enumerate() {
                let e = (-p[1] * t).exp();
                r[i] = p[0] * e - y;
                if let Some(j) = jac.as_deref_mut() {
                    j[(i, 0)] = e;
                    j[(i, 1)] = -p[0] * t * e;
                }
            }
            true
        }
    }

    #[test]
    fn recovers_exponential_decay() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 * 0.25).collect();
        let y = t.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        let m = Exp { t, y };
        let fit = minimize(&m, &[1.0, 0.1], &LmOptions::default());
        assert!(fit.converged);
        assert!((fit.params[0] - 3.0).abs() < 1e-9, "{:?}", fit.params);
        assert!((fit.params[1] - 0.7).abs() < 1e-9);
        assert!(fit.cost < 1e-20);
    }

    struct Rosenbrock;

    impl Model for Rosenbrock {
        fn n_residuals(&self) -> usize {
            2
        }
        fn eval(&self, p: &[f64], r: &mut [f64], jac: Option<&mut DMatrix<f64>>) -> bool {
            r[0] = 10.0 * (p[1] - p[0] * p[0]);
            r[1] = 1.0 - p[0];
            if let Some(j) = jac {
                j[(0, 0)] = -20.0 * p[0];
                j[(0, 1)] = 10.0;
                j[(1, 0)] = -1.0;
                j[(1, 1)] = 0.0;
            }
            true
        }
    }

    #[test]
    fn solves_rosenbrock_from_standard_start() {
        let fit = minimize(&Rosenbrock, &[-1.2, 1.0], &LmOptions::default());
        assert!(fit.converged);
        assert!((fit.params[0] - 1.0).abs() < 1e-8 && (fit.params[1] - 1.0).abs() < 1e-8);
        // exactly determined: no standard errors
        assert!(fit.std_errors.is_none());
    }

    #[test]
    fn rejected_domain_start_reports_failure() {
        struct Never;
        impl Model for Never {
            fn n_residuals(&self) -> usize {
                1
            }
            fn eval(&self, _: &[f64], _: &mut [f64], _: Option<&mut DMatrix<f64>>) -> bool {
                false
            }
        }
        let fit = minimize(&Never, &[0.0], &LmOptions::default());
        assert!(!fit.converged);
        assert!(fit.cost.is_infinite());
    }
}
