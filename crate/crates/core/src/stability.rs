//! Numerical checks of the Lyapunov argument behind the gradient flow:
//! descent of `V = h^T h`, its exponential decay near a root, tolerance to
//! perturbations of the flow, and the norm bounds on `h` and `Dh`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{QgsError, Result};
use crate::qgs::{integrate_forward, IntegratorConfig, Status};
use crate::residual::{Residual, ResidualSystem, SensitivityMode};
use crate::rnn::{predict, NetworkShape, ParamVector};

/// Relative agreement required between analytic and numeric `V'`.
pub const DESCENT_REL_TOL: f64 = 1e-4;
/// Fraction of `sigma_min V` that `-V'` must reach at each checked point.
pub const RATE_FACTOR: f64 = 0.95;
/// Rate-check points with `sigma_min` at or below this are skipped.
pub const RANK_TOL: f64 = 1e-10;

/// `V'` along the flow, analytically and by a central difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentCheck {
    pub v: f64,
    /// `-2 |Dh^T h|^2`
    pub analytic: f64,
    pub numeric: f64,
    pub ok: bool,
}

/// Compares `V' = -2 |Dh^T h|^2` for `V = h^T h` with a central difference
/// of `V` along `F = -Dh^T h`. The step is `|delta F|_inf = 1e-5 (1 + |x|_inf)`,
/// shortened near a root so that `V` changes by about `1e-4 V` across it.
pub fn lyapunov_descent_check<R: Residual + ?Sized>(sys: &R, x: &DVector<f64>) -> Result<DescentCheck> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(QgsError::Numeric("lyapunov check at a non-finite point".into()));
    }
    let h = sys.residuals(x)?;
    let v = h.norm_squared();
    let g = sys.jacobian(x)?.tr_mul(&h);
    let analytic = -2.0 * g.norm_squared();
    let f_inf = g.amax();
    if f_inf == 0.0 {
        return Ok(DescentCheck {
            v,
            analytic,
            numeric: 0.0,
            ok: true,
        });
    }
    let delta = (1e-5 * (1.0 + x.amax()) / f_inf).min(1e-4 * v / analytic.abs());
    let v_plus = sys.residuals(&(x - &g * delta))?.norm_squared();
    let v_minus = sys.residuals(&(x + &g * delta))?.norm_squared();
    let numeric = (v_plus - v_minus) / (2.0 * delta);
    // Cancellation in v_plus - v_minus.
    let floor = 16.0 * f64::EPSILON * (h.lp_norm(1) + v) / delta;
    let agree = (analytic - numeric).abs() <= DESCENT_REL_TOL * analytic.abs().max(numeric.abs()) + floor;
    Ok(DescentCheck {
        v,
        analytic,
        numeric,
        ok: agree && numeric <= floor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub v: f64,
    pub vdot: f64,
    /// Smallest eigenvalue of `Dh Dh^T`.
    pub sigma_min: f64,
    /// `None` when the point was skipped for rank deficiency.
    pub ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub points: Vec<RatePoint>,
    pub checked: usize,
    pub passed: usize,
    pub skipped: usize,
}

impl RateReport {
    /// Passed fraction of the checked points (1 when none was checked).
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Checks `V' <= -0.95 sigma_min V` at each point, `sigma_min` being the
/// smallest eigenvalue of `Dh Dh^T`. Points where `Dh Dh^T` is numerically
/// singular are skipped.
pub fn exponential_rate_check<R: Residual + ?Sized>(sys: &R, points: &[DVector<f64>]) -> Result<RateReport> {
    let mut out = Vec::with_capacity(points.len());
    let (mut checked, mut passed, mut skipped) = (0, 0, 0);
    for x in points {
        let h = sys.residuals(x)?;
        let jac = sys.jacobian(x)?;
        let v = h.norm_squared();
        let g = jac.tr_mul(&h);
        let vdot = -2.0 * g.norm_squared();
        let gram = &jac * jac.transpose();
        let sigma_min = SymmetricEigen::try_new(gram, f64::EPSILON, 0)
            .map(|e| e.eigenvalues.min())
            .unwrap_or(f64::NAN);
        let ok = if sigma_min.is_nan() || sigma_min <= RANK_TOL {
            skipped += 1;
            log::warn!("rate check: Dh Dh^T is rank deficient (sigma_min = {sigma_min:e}); point skipped");
            None
        } else {
            checked += 1;
            let ok = vdot <= -RATE_FACTOR * sigma_min * v;
            passed += usize::from(ok);
            Some(ok)
        };
        out.push(RatePoint {
            v,
            vdot,
            sigma_min,
            ok,
        });
    }
    Ok(RateReport {
        points: out,
        checked,
        passed,
        skipped,
    })
}

/// Sizes and data bounds entering the perturbation bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    #[serde(rename = "N")]
    pub samples: usize,
    pub m: usize,
    pub n: usize,
    pub k_u: f64,
    pub k_y: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.m == 0 || self.n == 0 {
            return Err(QgsError::Precondition("N, m and n must be >= 1".into()));
        }
        if !(self.k_u >= 0.0 && self.k_y >= 0.0) || !self.k_u.is_finite() || !self.k_y.is_finite() {
            return Err(QgsError::Precondition("K_u and K_y must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Largest linear-growth constant of a flow perturbation that keeps `V'`
/// negative: `N sqrt(N m) (sqrt(m) + sqrt(K_y (K_u sqrt(n) + m)))^2`.
pub fn perturbation_bound(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let (nn, m, n) = (b.samples as f64, b.m as f64, b.n as f64);
    let inner = m.sqrt() + (b.k_y * (b.k_u * n.sqrt() + m)).sqrt();
    Ok(nn * (nn * m).sqrt() * inner * inner)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbedDescent {
    pub vdot: f64,
    pub ok: bool,
}

/// `V' = -|Dh^T h|^2 + g^T Dh^T h` for the flow perturbed by `g`; `ok` iff
/// it is negative.
pub fn perturbed_descent_test<R: Residual + ?Sized>(
    sys: &R,
    x: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<PerturbedDescent> {
    if g.len() != sys.param_dim() {
        return Err(QgsError::Shape(format!(
            "perturbation has {} entries, system has {} parameters",
            g.len(),
            sys.param_dim()
        )));
    }
    let grad = sys.gradient(x)?;
    let sq = grad.norm_squared();
    if sq == 0.0 {
        return Err(QgsError::Precondition("perturbed descent needs a non-equilibrium point".into()));
    }
    let vdot = -sq + g.dot(&grad);
    Ok(PerturbedDescent { vdot, ok: vdot < 0.0 })
}

/// Both sides of `|h| <= N (m |x| + K_y)` and
/// `|Dh| <= sqrt(N m) (1 + sqrt(n) K_u |x| + m |x|)` at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBoundReport {
    pub h_norm: f64,
    pub h_bound: f64,
    pub h_ok: bool,
    /// Spectral norm of the one-step `Dh` (`z(k-1)` held fixed), the
    /// Jacobian the bound is derived for.
    pub dh_norm: f64,
    pub dh_frobenius: f64,
    pub dh_bound: f64,
    /// Both the spectral and the Frobenius norm are within `dh_bound`.
    pub dh_ok: bool,
    /// Spectral norm of the full recurrent `Dh`. Not covered by the bound:
    /// expanding recurrences can exceed it.
    pub dh_recurrent_norm: f64,
}

/// Evaluates the residual and Jacobian norm bounds, with `|u|` replaced by
/// its bound `u_bound` and Euclidean `|x|`. Single-output networks only.
/// The Jacobian bound is checked on the one-step sensitivity whatever the
/// mode of `sys`.
pub fn norm_bound_checks(
    sys: &ResidualSystem,
    x: &ParamVector,
    u_bound: f64,
    y_bound: f64,
) -> Result<NormBoundReport> {
    let shape = sys.shape();
    if shape.t != 1 {
        return Err(QgsError::Precondition(format!(
            "norm bounds hold for single-output networks, got t = {}",
            shape.t
        )));
    }
    if x.shape() != shape {
        return Err(QgsError::Shape("parameter vector does not match the system".into()));
    }
    let ds = sys.dataset();
    if ds.max_input_norm() > u_bound {
        return Err(QgsError::Precondition(format!(
            "input norm {} exceeds the bound {u_bound}",
            ds.max_input_norm()
        )));
    }
    if ds.max_target_norm() > y_bound {
        return Err(QgsError::Precondition(format!(
            "target norm {} exceeds the bound {y_bound}",
            ds.max_target_norm()
        )));
    }
    let (nn, m, n) = (ds.len() as f64, shape.m as f64, shape.n as f64);
    let xn = x.values().norm();
    let h_norm = sys.residuals_at(x)?.norm();
    let h_bound = nn * (m * xn + y_bound);
    let one_step = ResidualSystem::new(ds.clone(), shape, SensitivityMode::OneStep)?.with_activation(sys.activation());
    let jac = one_step.jacobian_at(x)?;
    let dh_frobenius = jac.norm();
    let dh_norm = spectral_norm(&jac);
    let dh_recurrent_norm = spectral_norm(&sys.jacobian_at(x)?);
    let dh_bound = (nn * m).sqrt() * (1.0 + n.sqrt() * u_bound * xn + m * xn);
    Ok(NormBoundReport {
        h_norm,
        h_bound,
        h_ok: h_norm <= h_bound,
        dh_norm,
        dh_frobenius,
        dh_bound,
        dh_ok: dh_norm <= dh_bound && dh_frobenius <= dh_bound,
        dh_recurrent_norm,
    })
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// A random network and dataset: inputs and targets uniform in `[-1, 1]`,
/// weights `N(0, sigma^2)`.
pub fn random_instance<G: Rng + ?Sized>(
    rng: &mut G,
    shape: NetworkShape,
    samples: usize,
    sigma: f64,
) -> Result<(ResidualSystem, ParamVector)> {
    let inputs: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..shape.n).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let targets: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..shape.t).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let ds = Dataset::from_rows(inputs, targets)?;
    let x = ParamVector::random_normal(shape, sigma, rng);
    Ok((ResidualSystem::new(ds, shape, SensitivityMode::FullRecurrent)?, x))
}

/// A dataset the network reproduces exactly at the returned `x*`.
pub fn realizable_instance<G: Rng + ?Sized>(
    rng: &mut G,
    shape: NetworkShape,
    samples: usize,
    sigma: f64,
) -> Result<(ResidualSystem, ParamVector)> {
    let (sys, x_star) = random_instance(rng, shape, samples, sigma)?;
    let inputs: Vec<Vec<f64>> = sys.dataset().inputs().iter().map(|u| u.iter().copied().collect()).collect();
    let placeholder = Dataset::from_rows(inputs.clone(), vec![vec![0.0; shape.t]; samples])?;
    let targets: Vec<Vec<f64>> = predict(&x_star, &placeholder)?
        .into_iter()
        .map(|y| y.iter().copied().collect())
        .collect();
    let ds = Dataset::from_rows(inputs, targets)?;
    Ok((ResidualSystem::new(ds, shape, SensitivityMode::FullRecurrent)?, x_star))
}

fn random_direction<G: Rng + ?Sized>(rng: &mut G, len: usize) -> DVector<f64> {
    loop {
        let d = DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = d.norm();
        if norm > 1e-12 {
            return d / norm;
        }
    }
}

/// Seeded suites over random instances, as run from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub trials: usize,
    pub seed: u64,
    /// Output dimension of the random networks.
    pub t: usize,
}

impl SuiteConfig {
    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(QgsError::Config("a suite needs at least one trial".into()));
        }
        if self.t == 0 {
            return Err(QgsError::Config("output dimension t must be >= 1".into()));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentTrial {
    pub accepted_steps: usize,
    /// Accepted steps where `f` rose by more than `1e-9 (1 + f)`.
    pub monotone_violations: usize,
    pub checks: Vec<DescentCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentSuiteReport {
    pub trials: Vec<DescentTrial>,
    pub monotone_violations: usize,
    pub points_checked: usize,
    pub points_ok: usize,
}

impl DescentSuiteReport {
    pub fn passed(&self) -> bool {
        self.monotone_violations == 0 && self.points_ok == self.points_checked
    }
}

/// Forward trajectories from random starts on random small networks: the
/// trace must descend, and `V'` is checked at `points_per_trial` trace
/// points of each.
pub fn descent_suite(cfg: &SuiteConfig, points_per_trial: usize) -> Result<DescentSuiteReport> {
    cfg.validate()?;
    let mut rng = cfg.rng();
    let icfg = IntegratorConfig {
        max_steps: 5_000,
        trace_states: true,
        ..IntegratorConfig::default()
    };
    let mut trials = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let shape = NetworkShape::new(rng.random_range(1..=3), rng.random_range(1..=3), cfg.t)?;
        let samples = rng.random_range(2..=8);
        let (sys, x0) = random_instance(&mut rng, shape, samples, 0.5)?;
        let run = integrate_forward(&sys, x0.values(), &icfg)?;
        let pts = &run.trace.points;
        let monotone_violations = pts
            .windows(2)
            .filter(|w| w[1].f > w[0].f + 1e-9 * (1.0 + w[0].f))
            .count();
        let mut checks = Vec::with_capacity(points_per_trial);
        for i in 0..points_per_trial {
            let idx = if points_per_trial == 1 {
                0
            } else {
                i * (pts.len() - 1) / (points_per_trial - 1)
            };
            let x = pts[idx].x.as_ref().expect("trace keeps states");
            checks.push(lyapunov_descent_check(&sys, x)?);
        }
        trials.push(DescentTrial {
            accepted_steps: run.steps,
            monotone_violations,
            checks,
        });
    }
    let monotone_violations = trials.iter().map(|t| t.monotone_violations).sum();
    let points_checked = trials.iter().map(|t| t.checks.len()).sum();
    let points_ok = trials.iter().flat_map(|t| &t.checks).filter(|c| c.ok).count();
    Ok(DescentSuiteReport {
        trials,
        monotone_violations,
        points_checked,
        points_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTrial {
    pub status: Status,
    pub f_end: f64,
    pub report: RateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSuiteReport {
    pub trials: Vec<RateTrial>,
    pub checked: usize,
    pub passed: usize,
    pub skipped: usize,
}

impl RateSuiteReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Trajectories started near the root of realizable instances with fewer
/// residuals than weights, so that `Dh Dh^T` can be nonsingular.
pub fn rate_suite(cfg: &SuiteConfig) -> Result<RateSuiteReport> {
    cfg.validate()?;
    let mut rng = cfg.rng();
    let icfg = IntegratorConfig {
        equilibrium_tol: 1e-10,
        max_steps: 20_000,
        trace_states: true,
        ..IntegratorConfig::default()
    };
    let mut trials = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let shape = NetworkShape::new(3, 3, cfg.t)?;
        let samples = (shape.param_count() / (2 * cfg.t)).clamp(1, 6);
        let (sys, x_star) = realizable_instance(&mut rng, shape, samples, 0.5)?;
        let kick = random_direction(&mut rng, shape.param_count()) * 0.05;
        let x0 = x_star.values() + kick;
        let run = integrate_forward(&sys, &x0, &icfg)?;
        let states: Vec<DVector<f64>> = run.trace.points.iter().filter_map(|p| p.x.clone()).collect();
        let report = exponential_rate_check(&sys, &states)?;
        trials.push(RateTrial {
            status: run.status,
            f_end: run.f_end,
            report,
        });
    }
    let checked = trials.iter().map(|t| t.report.checked).sum();
    let passed = trials.iter().map(|t| t.report.passed).sum();
    let skipped = trials.iter().map(|t| t.report.skipped).sum();
    Ok(RateSuiteReport {
        trials,
        checked,
        passed,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTrial {
    /// `|g| / |Dh^T h|` for the norm-bounded draw.
    pub small_ratio: f64,
    pub small: PerturbedDescent,
    /// `c` in `g = c Dh^T h`.
    pub aligned_factor: f64,
    pub aligned: PerturbedDescent,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSuiteReport {
    pub trials: Vec<PerturbationTrial>,
    /// Draws with `|g| < |Dh^T h|` that kept `V' < 0`.
    pub small_ok: usize,
    /// Draws with `g = c Dh^T h`, `c > 1`, that made `V' > 0`.
    pub aligned_ascent: usize,
    /// Bound for `N = m = n = 1`, `K_u = K_y = 0` (exactly 1).
    pub reference_bound_zero: f64,
    /// Bound for `N = m = n = 1`, `K_u = K_y = 1` (exactly `(1 + sqrt 2)^2`).
    pub reference_bound_unit: f64,
}

impl PerturbationSuiteReport {
    pub fn passed(&self) -> bool {
        self.small_ok == self.trials.len() && self.aligned_ascent == self.trials.len()
    }
}

pub fn perturbation_suite(cfg: &SuiteConfig) -> Result<PerturbationSuiteReport> {
    cfg.validate()?;
    let mut rng = cfg.rng();
    let mut trials = Vec::with_capacity(cfg.trials);
    while trials.len() < cfg.trials {
        let shape = NetworkShape::new(rng.random_range(1..=4), rng.random_range(1..=4), cfg.t)?;
        let samples = rng.random_range(1..=10);
        let (sys, x) = random_instance(&mut rng, shape, samples, 0.5)?;
        let grad = sys.gradient_at(&x)?;
        let gn = grad.norm();
        if gn < 1e-12 {
            continue;
        }
        let small_ratio = rng.random_range(0.0..0.99);
        let g_small = random_direction(&mut rng, grad.len()) * (small_ratio * gn);
        let small = perturbed_descent_test(&sys, x.values(), &g_small)?;
        let aligned_factor = rng.random_range(1.01..3.0);
        let aligned = perturbed_descent_test(&sys, x.values(), &(&grad * aligned_factor))?;
        let ds = sys.dataset();
        let bound = perturbation_bound(&BoundInputs {
            samples,
            m: shape.m,
            n: shape.n,
            k_u: ds.max_input_norm(),
            k_y: ds.max_target_norm(),
        })?;
        trials.push(PerturbationTrial {
            small_ratio,
            small,
            aligned_factor,
            aligned,
            bound,
        });
    }
    let small_ok = trials.iter().filter(|t| t.small.ok).count();
    let aligned_ascent = trials.iter().filter(|t| t.aligned.vdot > 0.0).count();
    let one = |k: f64| BoundInputs {
        samples: 1,
        m: 1,
        n: 1,
        k_u: k,
        k_y: k,
    };
    Ok(PerturbationSuiteReport {
        trials,
        small_ok,
        aligned_ascent,
        reference_bound_zero: perturbation_bound(&one(0.0))?,
        reference_bound_unit: perturbation_bound(&one(1.0))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSuiteReport {
    pub trials: Vec<NormBoundReport>,
    pub violations: usize,
}

/// Norm bounds on random bounded single-output instances; `cfg.t` other
/// than 1 is rejected.
pub fn bounds_suite(cfg: &SuiteConfig) -> Result<BoundsSuiteReport> {
    cfg.validate()?;
    if cfg.t != 1 {
        return Err(QgsError::Precondition(format!(
            "norm bounds hold for single-output networks, got t = {}",
            cfg.t
        )));
    }
    let mut rng = cfg.rng();
    let mut trials = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let shape = NetworkShape::new(rng.random_range(1..=4), rng.random_range(1..=4), 1)?;
        let samples = rng.random_range(1..=10);
        let sigma = rng.random_range(0.1..=2.0);
        let (sys, x) = random_instance(&mut rng, shape, samples, sigma)?;
        let ds = sys.dataset();
        let (k_u, k_y) = (ds.max_input_norm(), ds.max_target_norm());
        trials.push(norm_bound_checks(&sys, &x, k_u, k_y)?);
    }
    let violations = trials.iter().filter(|r| !(r.h_ok && r.dh_ok)).count();
    Ok(BoundsSuiteReport { trials, violations })
}
