use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{ClassifyConfig, EquilibriumRecord, Provenance, Stability};
use crate::error::{QgsError, Result};
use crate::residual::Residual;

/// Which symmetric matrix stands in for the linearization of the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearizationKind {
    /// `Dh^T Dh`, exact Hessian of `f` at zero residual.
    GaussNewton,
    /// Central-difference Hessian of `f`.
    Hessian,
}

/// Eigen-decomposition of the linearization at a point, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub kind: LinearizationKind,
    pub eigenvalues: DVector<f64>,
    /// Column `i` belongs to `eigenvalues[i]`.
    pub eigenvectors: DMatrix<f64>,
}

impl Linearization {
    pub fn eig_min(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn eig_max(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    /// Eigenvector of the smallest eigenvalue.
    pub fn min_eigenvector(&self) -> DVector<f64> {
        self.eigenvectors.column(0).into_owned()
    }
}

/// Central differences of the analytic gradient, symmetrized.
pub fn hessian_fd<R: Residual + ?Sized>(sys: &R, x: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
    if !(step > 0.0) {
        return Err(QgsError::Precondition(format!("hessian step must be > 0, got {step}")));
    }
    let p = sys.param_dim();
    let mut hess = DMatrix::zeros(p, p);
    let mut xp = x.clone();
    for j in 0..p {
        let dx = step * x[j].abs().max(1.0);
        xp[j] = x[j] + dx;
        let gp = sys.gradient(&xp)?;
        xp[j] = x[j] - dx;
        let gm = sys.gradient(&xp)?;
        xp[j] = x[j];
        hess.set_column(j, &((gp - gm) / (2.0 * dx)));
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    Ok(sym)
}

fn sorted_eigen(mat: DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(QgsError::Numeric("non-finite entries in linearization".into()));
    }
    let eig = SymmetricEigen::try_new(mat, f64::EPSILON, 100_000)
        .ok_or_else(|| QgsError::Numeric("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(eig.eigenvectors.nrows(), order.len());
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Gauss-Newton matrix near zero residual, finite-difference Hessian otherwise.
pub fn linearize<R: Residual + ?Sized>(
    sys: &R,
    x: &DVector<f64>,
    cfg: &ClassifyConfig,
) -> Result<Linearization> {
    let h = sys.residuals(x)?;
    let (kind, mat) = if h.norm() <= cfg.gauss_newton_residual {
        let jac = sys.jacobian(x)?;
        (LinearizationKind::GaussNewton, jac.tr_mul(&jac))
    } else {
        (LinearizationKind::Hessian, hessian_fd(sys, x, cfg.hessian_step)?)
    };
    let (eigenvalues, eigenvectors) = sorted_eigen(mat)?;
    Ok(Linearization {
        kind,
        eigenvalues,
        eigenvectors,
    })
}

/// Classifies an equilibrium by the smallest eigenvalue of its linearization.
///
/// Eigen-solver failures give [`Stability::Indeterminate`] rather than an error.
pub fn classify_equilibrium<R: Residual + ?Sized>(
    sys: &R,
    x: &DVector<f64>,
    equilibrium_tol: f64,
    cfg: &ClassifyConfig,
) -> Result<EquilibriumRecord> {
    let (f_value, g) = sys.value_and_gradient(x)?;
    let grad_norm = g.amax();
    if !(grad_norm < equilibrium_tol) {
        return Err(QgsError::Precondition(format!(
            "not an equilibrium: |grad f|_inf = {grad_norm:e} >= {equilibrium_tol:e}"
        )));
    }
    let (stability, eig_min, eig_max, kind) = match linearize(sys, x, cfg) {
        Ok(lin) => {
            let floor = cfg.tol + cfg.rel_tol * lin.eig_max().abs();
            let stability = if lin.eig_min() >= -floor {
                Stability::Stable
            } else {
                Stability::Unstable
            };
            (stability, lin.eig_min(), lin.eig_max(), lin.kind)
        }
        Err(e) => {
            log::warn!("equilibrium classification failed: {e}");
            (Stability::Indeterminate, f64::NAN, f64::NAN, LinearizationKind::Hessian)
        }
    };
    Ok(EquilibriumRecord {
        x: x.clone(),
        f_value,
        grad_norm,
        stability,
        eig_min,
        eig_max,
        linearization: kind,
        found_at: Provenance::initial(),
    })
}
