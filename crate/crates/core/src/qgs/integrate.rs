//! Adaptive integration of the gradient flow: an explicit Dormand-Prince
//! 5(4) pair and a linearly implicit two-stage Rosenbrock pair for stiff
//! trajectories.

use nalgebra::{DMatrix, DVector};

use super::{Direction, IntegrationResult, IntegratorConfig, Method, Status, Trace, TracePoint};
use crate::error::{QgsError, Result};
use crate::residual::Residual;

// Dormand-Prince tableau (the flow is autonomous, so the nodes c_i are unused).
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
// b - b_hat
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// PI controller (Hairer & Wanner, dopri5 defaults).
const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - BETA * 0.75;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
// Cap on h * rho, rho a secant estimate of the flow Jacobian along the last
// step. Near an attracting equilibrium the error estimate alone lets h drift
// to the edge of the stability region (h * lambda ~ 3.3), where the iterates
// stop contracting.
const STIFF_CAP: f64 = 2.0;

// ROS2 (Verwer et al.), order 2 for any approximation of the flow Jacobian.
const GAMMA: f64 = 1.0 + std::f64::consts::FRAC_1_SQRT_2;
const ROS_FAC_MAX: f64 = 5.0;

/// Gradient flow `x' = -grad f(x)` (forward) or `x' = +grad f(x)` (backward).
struct Flow<'a, R: Residual + ?Sized> {
    sys: &'a R,
    sign: f64,
    evaluations: usize,
}

impl<R: Residual + ?Sized> Flow<'_, R> {
    /// Returns `(f(x), grad f(x))`.
    fn eval(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.evaluations += 1;
        let (f, g) = self.sys.value_and_gradient(x)?;
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(QgsError::Numeric("non-finite objective or gradient along trajectory".into()));
        }
        Ok((f, g))
    }

    fn rhs(&self, g: &DVector<f64>) -> DVector<f64> {
        g * (-self.sign)
    }

    fn eval_rhs(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (_, g) = self.eval(x)?;
        Ok(self.rhs(&g))
    }
}

/// Outcome of one trial step of size `h` from `x`.
struct Trial {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
    err: f64,
}

fn error_norm(err: &DVector<f64>, x: &DVector<f64>, x_new: &DVector<f64>, cfg: &IntegratorConfig) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(x.iter().zip(x_new.iter()))
        .map(|(e, (a, b))| {
            let sc = cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn dopri_trial<R: Residual + ?Sized>(
    flow: &mut Flow<'_, R>,
    x: &DVector<f64>,
    g: &DVector<f64>,
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<Trial> {
    let k1 = flow.rhs(g);
    let k2 = flow.eval_rhs(&(x + &k1 * (h * A21)))?;
    let k3 = flow.eval_rhs(&(x + (&k1 * A31 + &k2 * A32) * h))?;
    let k4 = flow.eval_rhs(&(x + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h))?;
    let k5 = flow.eval_rhs(&(x + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h))?;
    let k6 = flow.eval_rhs(&(x + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h))?;
    let x_new = x + (&k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * h;
    let (f_new, g_new) = flow.eval(&x_new)?;
    let k7 = flow.rhs(&g_new);
    let err_vec = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
    let err = error_norm(&err_vec, x, &x_new, cfg);
    Ok(Trial {
        x: x_new,
        f: f_new,
        g: g_new,
        err,
    })
}

/// Solves `(I + c M) k = b` for symmetric positive semidefinite `M`.
fn solve_shifted(gram: &DMatrix<f64>, c: f64, b: &DVector<f64>) -> Option<DVector<f64>> {
    let mut a = gram * c;
    for i in 0..a.nrows() {
        a[(i, i)] += 1.0;
    }
    if c > 0.0 {
        if let Some(ch) = a.clone().cholesky() {
            return Some(ch.solve(b));
        }
    }
    a.lu().solve(b)
}

fn rosenbrock_trial<R: Residual + ?Sized>(
    flow: &mut Flow<'_, R>,
    gram: &DMatrix<f64>,
    x: &DVector<f64>,
    g: &DVector<f64>,
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<Option<Trial>> {
    // The flow Jacobian is approximated by -sign * Dh^T Dh, so the stage
    // matrix is I + sign * gamma * h * Dh^T Dh.
    let c = flow.sign * GAMMA * h;
    let f0 = flow.rhs(g);
    let Some(k1) = solve_shifted(gram, c, &f0) else {
        return Ok(None);
    };
    let f1 = flow.eval_rhs(&(x + &k1 * h))?;
    let Some(k2) = solve_shifted(gram, c, &(f1 - &k1 * 2.0)) else {
        return Ok(None);
    };
    let x_new = x + (&k1 * 1.5 + &k2 * 0.5) * h;
    let (f_new, g_new) = flow.eval(&x_new)?;
    let err_vec = (&k1 + &k2) * (0.5 * h);
    let err = error_norm(&err_vec, x, &x_new, cfg);
    Ok(Some(Trial {
        x: x_new,
        f: f_new,
        g: g_new,
        err,
    }))
}

/// Integrates the forward flow until an equilibrium or the budget.
pub fn integrate_forward<R: Residual + ?Sized>(
    sys: &R,
    x0: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<IntegrationResult> {
    integrate(sys, x0, cfg, Direction::Forward, None)
}

/// Integrates the reversed flow `x' = +grad f` until an equilibrium, until
/// `f > f_cap`, or until the budget runs out.
pub fn integrate_backward<R: Residual + ?Sized>(
    sys: &R,
    x0: &DVector<f64>,
    cfg: &IntegratorConfig,
    f_cap: f64,
) -> Result<IntegrationResult> {
    integrate(sys, x0, cfg, Direction::Backward, Some(f_cap))
}

pub(crate) fn integrate<R: Residual + ?Sized>(
    sys: &R,
    x0: &DVector<f64>,
    cfg: &IntegratorConfig,
    direction: Direction,
    f_cap: Option<f64>,
) -> Result<IntegrationResult> {
    cfg.validate()?;
    if x0.len() != sys.param_dim() {
        return Err(QgsError::Shape(format!(
            "start point has {} entries, system expects {}",
            x0.len(),
            sys.param_dim()
        )));
    }
    let sign = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    let mut flow = Flow { sys, sign, evaluations: 0 };

    let mut x = x0.clone();
    let (mut f, mut g) = flow.eval(&x)?;
    let mut t = 0.0;
    let mut trace = Trace::new(cfg.trace_states);
    trace.push(TracePoint::new(0, t, f, g.amax(), &x, cfg.trace_states));

    let finish = |x: DVector<f64>,
                  f: f64,
                  g: &DVector<f64>,
                  t: f64,
                  steps: usize,
                  rejected: usize,
                  evaluations: usize,
                  status: Status,
                  mut trace: Trace| {
        if trace.points.last().map(|p| p.step) != Some(steps) {
            trace.push(TracePoint::new(steps, t, f, g.amax(), &x, cfg.trace_states));
        }
        IntegrationResult {
            x_end: x,
            f_end: f,
            grad_norm_end: g.amax(),
            t_end: t,
            status,
            steps,
            rejected,
            evaluations,
            trace,
        }
    };

    if g.amax() < cfg.equilibrium_tol {
        let ev = flow.evaluations;
        return Ok(finish(x, f, &g, t, 0, 0, ev, Status::Equilibrium, trace));
    }
    if let Some(cap) = f_cap {
        if f > cap {
            let ev = flow.evaluations;
            return Ok(finish(x, f, &g, t, 0, 0, ev, Status::CapReached, trace));
        }
    }

    let mut h = cfg
        .initial_step
        .unwrap_or_else(|| 0.01 * (1.0 + x.amax()) / g.amax().max(1e-300))
        .clamp(cfg.min_step, cfg.max_step);
    let mut err_prev: f64 = 1e-4;
    let mut last_rejected = false;
    let mut steps = 0usize;
    let mut rejected = 0usize;
    // Dh^T Dh at the current point, for the Rosenbrock stages.
    let mut gram: Option<DMatrix<f64>> = None;

    loop {
        if steps >= cfg.max_steps || t >= cfg.max_time {
            let ev = flow.evaluations;
            return Ok(finish(x, f, &g, t, steps, rejected, ev, Status::BudgetExhausted, trace));
        }
        let mut clipped = false;
        if t + h > cfg.max_time {
            h = cfg.max_time - t;
            clipped = true;
        }

        let trial = match cfg.method {
            Method::DormandPrince => Some(dopri_trial(&mut flow, &x, &g, h, cfg)?),
            Method::Rosenbrock => {
                if gram.is_none() {
                    let jac = sys.jacobian(&x)?;
                    gram = Some(jac.tr_mul(&jac));
                }
                let gm = gram.as_ref().expect("just computed");
                rosenbrock_trial(&mut flow, gm, &x, &g, h, cfg)?
            }
        };

        // The flow is monotone in f; a step that breaks monotonicity is
        // treated like an error-test failure.
        let slack = cfg.monotone_slack * (1.0 + f.abs());
        // A failed linear solve counts as an infinite error.
        let trial_err = trial.as_ref().map_or(f64::INFINITY, |tr| tr.err);
        let accepted = trial.filter(|tr| {
            let monotone = match direction {
                Direction::Forward => tr.f <= f + slack,
                Direction::Backward => tr.f >= f - slack,
            };
            tr.err <= 1.0 && monotone
        });

        match accepted {
            Some(tr) => {
                let err = tr.err;
                let dx = (&tr.x - &x).norm();
                let rho = if dx > 0.0 {
                    (flow.rhs(&tr.g) - flow.rhs(&g)).norm() / dx
                } else {
                    0.0
                };
                steps += 1;
                t += h;
                x = tr.x;
                f = tr.f;
                g = tr.g;
                gram = None;
                if steps.is_multiple_of(cfg.trace_stride) {
                    trace.push(TracePoint::new(steps, t, f, g.amax(), &x, cfg.trace_states));
                }
                if g.amax() < cfg.equilibrium_tol {
                    let ev = flow.evaluations;
                    return Ok(finish(x, f, &g, t, steps, rejected, ev, Status::Equilibrium, trace));
                }
                if let Some(cap) = f_cap {
                    if f > cap {
                        let ev = flow.evaluations;
                        return Ok(finish(x, f, &g, t, steps, rejected, ev, Status::CapReached, trace));
                    }
                }
                let err_c = err.max(1e-10);
                let mut fac = match cfg.method {
                    Method::DormandPrince => {
                        (SAFETY * err_c.powf(-ALPHA) * err_prev.powf(BETA)).clamp(FAC_MIN, FAC_MAX)
                    }
                    Method::Rosenbrock => (SAFETY * err_c.powf(-0.5)).clamp(FAC_MIN, ROS_FAC_MAX),
                };
                if last_rejected {
                    fac = fac.min(1.0);
                }
                err_prev = err_c;
                last_rejected = false;
                if !clipped {
                    h = (h * fac).min(cfg.max_step);
                    if cfg.method == Method::DormandPrince && rho.is_finite() && rho * h > STIFF_CAP {
                        h = (STIFF_CAP / rho).max(cfg.min_step);
                    }
                }
            }
            None => {
                rejected += 1;
                last_rejected = true;
                let exponent = match cfg.method {
                    Method::DormandPrince => -0.2,
                    Method::Rosenbrock => -0.5,
                };
                h *= if trial_err > 1.0 && trial_err.is_finite() {
                    (SAFETY * trial_err.powf(exponent)).max(FAC_MIN)
                } else {
                    0.5
                };
            }
        }
        if h < cfg.min_step {
            return Err(QgsError::Stiffness {
                t,
                step: h,
                f_value: f,
                grad_norm: g.amax(),
                x: x.iter().copied().collect(),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual::FnResidual;

    fn cfg() -> IntegratorConfig {
        IntegratorConfig::default()
    }

    #[test]
    fn linear_decay_matches_closed_form() {
        // h(x) = x gives x' = -x.
        let sys = FnResidual::scalar(|x| x, |_| 1.0);
        let cfg = IntegratorConfig {
            max_time: 5.0,
            equilibrium_tol: 1e-14,
            ..cfg()
        };
        let res = integrate_forward(&sys, &DVector::from_element(1, 1.0), &cfg).unwrap();
        assert_eq!(res.status, Status::BudgetExhausted);
        assert!((res.t_end - 5.0).abs() < 1e-12);
        assert!((res.x_end[0] - (-5.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn equilibrium_start_returns_immediately() {
        let sys = FnResidual::scalar(|x| x, |_| 1.0);
        let res = integrate_forward(&sys, &DVector::zeros(1), &cfg()).unwrap();
        assert_eq!(res.status, Status::Equilibrium);
        assert_eq!(res.steps, 0);
        assert_eq!(res.x_end[0], 0.0);
    }

    #[test]
    fn backward_reaches_double_well_saddle() {
        let sys = FnResidual::scalar(|x| x * x - 1.0, |x| 2.0 * x);
        let res = integrate_backward(&sys, &DVector::from_element(1, 0.99), &cfg(), 10.0).unwrap();
        assert_eq!(res.status, Status::Equilibrium);
        assert!(res.x_end[0].abs() < 1e-8);
        for w in res.trace.points.windows(2) {
            assert!(w[1].f >= w[0].f - 1e-9 * (1.0 + w[0].f));
        }
    }

    #[test]
    fn backward_from_exact_equilibrium_stays() {
        let sys = FnResidual::scalar(|x| x * x - 1.0, |x| 2.0 * x);
        let res = integrate_backward(&sys, &DVector::from_element(1, 1.0), &cfg(), 10.0).unwrap();
        assert_eq!(res.status, Status::Equilibrium);
        assert_eq!(res.x_end[0], 1.0);
    }

    #[test]
    fn backward_cap_stops_uphill_run() {
        // f = x^2 / 2 has no saddle to run into.
        let sys = FnResidual::scalar(|x| x, |_| 1.0);
        let res = integrate_backward(&sys, &DVector::from_element(1, 0.1), &cfg(), 2.0).unwrap();
        assert_eq!(res.status, Status::CapReached);
        assert!(res.f_end > 2.0);
    }

    #[test]
    fn forward_trace_is_monotone() {
        let sys = FnResidual::new(
            2,
            2,
            |x| DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]),
            |x| nalgebra::DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]),
        );
        let res = integrate_forward(&sys, &DVector::from_vec(vec![-1.2, 1.0]), &cfg()).unwrap();
        assert_eq!(res.status, Status::Equilibrium);
        assert!((res.x_end[0] - 1.0).abs() < 1e-6);
        for w in res.trace.points.windows(2) {
            assert!(w[1].f <= w[0].f + 1e-9 * (1.0 + w[0].f));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let sys = FnResidual::scalar(|x| x, |_| 1.0);
        let bad = IntegratorConfig {
            min_step: 1.0,
            max_step: 0.5,
            ..cfg()
        };
        assert!(matches!(
            integrate_forward(&sys, &DVector::zeros(1), &bad),
            Err(QgsError::Config(_))
        ));
    }

    #[test]
    fn step_underflow_is_stiffness_error() {
        let sys = FnResidual::scalar(|x| 1e4 * x, |_| 1e4);
        let cfg = IntegratorConfig {
            min_step: 1e-3,
            initial_step: Some(1e-3),
            ..cfg()
        };
        let err = integrate_forward(&sys, &DVector::from_element(1, 1.0), &cfg).unwrap_err();
        assert!(matches!(err, QgsError::Stiffness { .. }));
    }

    fn rosenbrock() -> IntegratorConfig {
        IntegratorConfig {
            method: Method::Rosenbrock,
            ..cfg()
        }
    }

    #[test]
    fn rosenbrock_linear_decay_matches_closed_form() {
        let sys = FnResidual::scalar(|x| x, |_| 1.0);
        let cfg = IntegratorConfig {
            max_time: 5.0,
            equilibrium_tol: 1e-14,
            ..rosenbrock()
        };
        let res = integrate_forward(&sys, &DVector::from_element(1, 1.0), &cfg).unwrap();
        assert!((res.t_end - 5.0).abs() < 1e-12);
        assert!((res.x_end[0] - (-5.0f64).exp()).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_converges_on_curved_valley() {
        let sys = FnResidual::new(
            2,
            2,
            |x| DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]),
            |x| nalgebra::DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]),
        );
        let ros = IntegratorConfig {
            max_step: 1e6,
            ..rosenbrock()
        };
        let res = integrate_forward(&sys, &DVector::from_vec(vec![-1.2, 1.0]), &ros).unwrap();
        assert_eq!(res.status, Status::Equilibrium);
        assert!((res.x_end[0] - 1.0).abs() < 1e-6);
        let dp = integrate_forward(&sys, &DVector::from_vec(vec![-1.2, 1.0]), &cfg()).unwrap();
        assert!(res.steps < dp.steps);
        for w in res.trace.points.windows(2) {
            assert!(w[1].f <= w[0].f + 1e-9 * (1.0 + w[0].f));
        }
    }

    #[test]
    fn rosenbrock_backward_reaches_double_well_saddle() {
        let sys = FnResidual::scalar(|x| x * x - 1.0, |x| 2.0 * x);
        let res = integrate_backward(&sys, &DVector::from_element(1, 0.99), &rosenbrock(), 10.0).unwrap();
        assert_eq!(res.status, Status::Equilibrium);
        assert!(res.x_end[0].abs() < 1e-8);
    }

    #[test]
    fn rosenbrock_follows_the_explicit_trajectory() {
        // Same flow time, two schemes: end points agree to the tolerance scale.
        let sys = FnResidual::new(
            2,
            2,
            |x| DVector::from_vec(vec![x[0].sin() + x[1], x[0] * x[1] - 0.5]),
            |x| nalgebra::DMatrix::from_row_slice(2, 2, &[x[0].cos(), 1.0, x[1], x[0]]),
        );
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let base = IntegratorConfig {
            max_time: 2.0,
            equilibrium_tol: 1e-14,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            ..cfg()
        };
        let a = integrate_forward(&sys, &x0, &base).unwrap();
        let b = integrate_forward(
            &sys,
            &x0,
            &IntegratorConfig {
                method: Method::Rosenbrock,
                ..base
            },
        )
        .unwrap();
        assert!((&a.x_end - &b.x_end).amax() < 1e-5, "{} vs {}", a.x_end, b.x_end);
    }
}
