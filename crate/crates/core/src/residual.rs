//! Residual systems `h(x)` and the least-squares objective `f = 1/2 |h|^2`.
//!
//! [`Residual`] is the abstraction the trajectory solver integrates over. The
//! network training residual is [`ResidualSystem`]; [`FnResidual`] and
//! [`SlackAugmentedCsp`] cover hand-written constraint systems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{QgsError, Result};
use crate::rnn::{check_dataset, Activation, Network, NetworkShape, ParamVector};

/// A smooth residual map `h: R^p -> R^q` with its Jacobian.
pub trait Residual {
    fn param_dim(&self) -> usize;

    fn residual_dim(&self) -> usize;

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// `Dh(x)`, `residual_dim x param_dim`.
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// `f(x) = 1/2 |h(x)|^2`.
    fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * self.residuals(x)?.norm_squared())
    }

    /// `(f(x), Dh(x)^T h(x))`.
    fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let h = self.residuals(x)?;
        let jac = self.jacobian(x)?;
        Ok((0.5 * h.norm_squared(), jac.tr_mul(&h)))
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.value_and_gradient(x)?.1)
    }
}

impl<R: Residual + ?Sized> Residual for &R {
    fn param_dim(&self) -> usize {
        (**self).param_dim()
    }
    fn residual_dim(&self) -> usize {
        (**self).residual_dim()
    }
    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).residuals(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).jacobian(x)
    }
    fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        (**self).objective(x)
    }
    fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        (**self).value_and_gradient(x)
    }
}

/// Central-difference Jacobian, column by column.
///
/// Column `j` uses the step `step * max(1, |x_j|)`.
pub fn jacobian_fd<R: Residual + ?Sized>(
    sys: &R,
    x: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    if !(step > 0.0) {
        return Err(QgsError::Precondition(format!("finite-difference step must be > 0, got {step}")));
    }
    let p = sys.param_dim();
    let q = sys.residual_dim();
    let mut jac = DMatrix::zeros(q, p);
    let mut xp = x.clone();
    for j in 0..p {
        let dx = step * x[j].abs().max(1.0);
        xp[j] = x[j] + dx;
        let plus = sys.residuals(&xp)?;
        xp[j] = x[j] - dx;
        let minus = sys.residuals(&xp)?;
        xp[j] = x[j];
        jac.set_column(j, &((plus - minus) / (2.0 * dx)));
    }
    Ok(jac)
}

/// Central-difference gradient of the objective.
pub fn gradient_fd<R: Residual + ?Sized>(
    sys: &R,
    x: &DVector<f64>,
    step: f64,
) -> Result<DVector<f64>> {
    let p = sys.param_dim();
    let mut g = DVector::zeros(p);
    let mut xp = x.clone();
    for j in 0..p {
        let dx = step * x[j].abs().max(1.0);
        xp[j] = x[j] + dx;
        let plus = sys.objective(&xp)?;
        xp[j] = x[j] - dx;
        let minus = sys.objective(&xp)?;
        xp[j] = x[j];
        g[j] = (plus - minus) / (2.0 * dx);
    }
    Ok(g)
}

/// How the dependence of the hidden state on the weights is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    /// Exact derivative through the whole recursion.
    #[default]
    FullRecurrent,
    /// `z(i-1)` is frozen at its forward-pass value.
    OneStep,
}

/// Training-set residual of a recurrent network:
/// `h_i(x) = V psi(W u(i) + S z(i-1)) - y(i)`, stacked over `i = 1..N`.
#[derive(Debug, Clone)]
pub struct ResidualSystem {
    dataset: Dataset,
    shape: NetworkShape,
    mode: SensitivityMode,
    activation: Activation,
}

struct ForwardPass {
    net: Network,
    /// `a(k)`
    pre: Vec<DVector<f64>>,
    /// `z(k)`; index 0 holds `z(0) = 0`, index `k` holds `z(k)`.
    states: Vec<DVector<f64>>,
    /// `y_hat(k) - y(k)`
    errors: Vec<DVector<f64>>,
}

impl ResidualSystem {
    pub fn new(dataset: Dataset, shape: NetworkShape, mode: SensitivityMode) -> Result<Self> {
        if dataset.is_empty() {
            return Err(QgsError::Domain("residual system needs at least one sample".into()));
        }
        check_dataset(shape, &dataset)?;
        Ok(Self {
            dataset,
            shape,
            mode,
            activation: Activation::tanh(),
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn shape(&self) -> NetworkShape {
        self.shape
    }

    pub fn mode(&self) -> SensitivityMode {
        self.mode
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn params(&self, x: &DVector<f64>) -> Result<ParamVector> {
        ParamVector::new(self.shape, x.clone())
    }

    fn forward(&self, x: &DVector<f64>) -> Result<ForwardPass> {
        let net = Network::with_activation(&self.params(x)?, self.activation);
        let n_samples = self.dataset.len();
        let mut pre = Vec::with_capacity(n_samples);
        let mut states = Vec::with_capacity(n_samples + 1);
        let mut errors = Vec::with_capacity(n_samples);
        states.push(DVector::zeros(self.shape.m));
        for (u, y) in self.dataset.inputs().iter().zip(self.dataset.targets()) {
            let a = net.preactivation(u, states.last().expect("z(0) present"));
            let z = a.map(self.activation.value);
            let e = &net.weights().v * &z - y;
            if e.iter().any(|v| !v.is_finite()) {
                return Err(QgsError::Numeric("non-finite residual".into()));
            }
            pre.push(a);
            states.push(z);
            errors.push(e);
        }
        Ok(ForwardPass {
            net,
            pre,
            states,
            errors,
        })
    }

    /// Typed wrapper over [`Residual::residuals`].
    pub fn residuals_at(&self, x: &ParamVector) -> Result<DVector<f64>> {
        self.residuals(x.values())
    }

    pub fn objective_at(&self, x: &ParamVector) -> Result<f64> {
        self.objective(x.values())
    }

    pub fn jacobian_at(&self, x: &ParamVector) -> Result<DMatrix<f64>> {
        self.jacobian(x.values())
    }

    pub fn gradient_at(&self, x: &ParamVector) -> Result<DVector<f64>> {
        self.gradient(x.values())
    }
}

impl Residual for ResidualSystem {
    fn param_dim(&self) -> usize {
        self.shape.param_count()
    }

    fn residual_dim(&self) -> usize {
        self.dataset.len() * self.shape.t
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let fp = self.forward(x)?;
        let t = self.shape.t;
        let mut h = DVector::zeros(self.residual_dim());
        for (i, e) in fp.errors.iter().enumerate() {
            h.rows_mut(i * t, t).copy_from(e);
        }
        Ok(h)
    }

    fn objective(&self, x: &DVector<f64>) -> Result<f64> {
        let fp = self.forward(x)?;
        Ok(0.5 * fp.errors.iter().map(|e| e.norm_squared()).sum::<f64>())
    }

    /// Forward sensitivity propagation of `P(k) = dz(k)/dx`.
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let sh = self.shape;
        let (n, m, t) = (sh.n, sh.m, sh.t);
        let fp = self.forward(x)?;
        let wts = fp.net.weights();
        // P only has nonzero columns for the W and S blocks.
        let off = sh.w_offset();
        let cols = sh.param_count() - off;
        let mut sens = DMatrix::<f64>::zeros(m, cols);
        let mut jac = DMatrix::zeros(self.residual_dim(), sh.param_count());
        for (k, u) in self.dataset.inputs().iter().enumerate() {
            let z_prev = &fp.states[k];
            let mut next = match self.mode {
                SensitivityMode::FullRecurrent => &wts.s * &sens,
                SensitivityMode::OneStep => DMatrix::zeros(m, cols),
            };
            for i in 0..m {
                for c in 0..n {
                    next[(i, sh.w_index(i, c) - off)] += u[c];
                }
                for c in 0..m {
                    next[(i, sh.s_index(i, c) - off)] += z_prev[c];
                }
            }
            for i in 0..m {
                let d = self.activation.derivative_at(fp.pre[k][i], fp.states[k + 1][i]);
                next.row_mut(i).scale_mut(d);
            }
            sens = next;

            let z = &fp.states[k + 1];
            let vp = &wts.v * &sens;
            for r in 0..t {
                let row = k * t + r;
                for j in 0..m {
                    jac[(row, sh.v_index(r, j))] = z[j];
                }
                jac.view_mut((row, off), (1, cols)).copy_from(&vp.row(r));
            }
        }
        Ok(jac)
    }

    /// Reverse accumulation through the recursion; equals `Dh^T h` without
    /// materializing `Dh`. Works on flat buffers since it sits in the
    /// integrator's inner loop.
    fn value_and_gradient(&self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let sh = self.shape;
        let (n, m, t) = (sh.n, sh.m, sh.t);
        if x.len() != sh.param_count() {
            return Err(QgsError::Shape(format!(
                "parameter vector has length {} but shape {:?} needs {}",
                x.len(),
                sh,
                sh.param_count()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(QgsError::Numeric("parameter vector has non-finite entries".into()));
        }
        let xs = x.as_slice();
        let (w0, s0) = (sh.w_offset(), sh.s_offset());
        let w_row = |i: usize| &xs[w0 + i * n..w0 + (i + 1) * n];
        let s_row = |i: usize| &xs[s0 + i * m..s0 + (i + 1) * m];
        let v_at = |r: usize, j: usize| xs[sh.v_index(r, j)];
        let psi = self.activation.value;
        let act = self.activation;
        let inputs = self.dataset.inputs();
        let targets = self.dataset.targets();
        let ns = inputs.len();

        let mut pre = vec![0.0; ns * m];
        let mut states = vec![0.0; (ns + 1) * m];
        let mut errors = vec![0.0; ns * t];
        let mut f = 0.0;
        for k in 0..ns {
            let u = inputs[k].as_slice();
            let (past, rest) = states.split_at_mut((k + 1) * m);
            let z_prev = &past[k * m..];
            let z = &mut rest[..m];
            for i in 0..m {
                let a = dot(w_row(i), u) + dot(s_row(i), z_prev);
                pre[k * m + i] = a;
                z[i] = psi(a);
            }
            for r in 0..t {
                let y_hat: f64 = (0..m).map(|j| v_at(r, j) * z[j]).sum();
                let e = y_hat - targets[k][r];
                if !e.is_finite() {
                    return Err(QgsError::Numeric("non-finite residual".into()));
                }
                errors[k * t + r] = e;
                f += e * e;
            }
        }

        let full = self.mode == SensitivityMode::FullRecurrent;
        let mut grad = vec![0.0; sh.param_count()];
        let mut carry = vec![0.0; m];
        let mut da = vec![0.0; m];
        for k in (0..ns).rev() {
            let e = &errors[k * t..(k + 1) * t];
            let z = &states[(k + 1) * m..(k + 2) * m];
            let z_prev = &states[k * m..(k + 1) * m];
            let u = inputs[k].as_slice();
            for r in 0..t {
                for j in 0..m {
                    grad[sh.v_index(r, j)] += e[r] * z[j];
                }
            }
            for j in 0..m {
                let mut dz: f64 = (0..t).map(|r| v_at(r, j) * e[r]).sum();
                if full {
                    dz += carry[j];
                }
                da[j] = dz * act.derivative_at(pre[k * m + j], z[j]);
            }
            for i in 0..m {
                let di = da[i];
                let gw = &mut grad[w0 + i * n..w0 + (i + 1) * n];
                for (g, uc) in gw.iter_mut().zip(u) {
                    *g += di * uc;
                }
                let gs = &mut grad[s0 + i * m..s0 + (i + 1) * m];
                for (g, zc) in gs.iter_mut().zip(z_prev) {
                    *g += di * zc;
                }
            }
            if full {
                // carry = S^T da
                carry.iter_mut().for_each(|c| *c = 0.0);
                for i in 0..m {
                    for (c, s) in carry.iter_mut().zip(s_row(i)) {
                        *c += s * da[i];
                    }
                }
            }
        }
        Ok((0.5 * f, DVector::from_vec(grad)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

type VecFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Residual given by closures; used for analytic test problems.
pub struct FnResidual {
    param_dim: usize,
    residual_dim: usize,
    h: VecFn,
    jac: MatFn,
}

impl FnResidual {
    pub fn new(
        param_dim: usize,
        residual_dim: usize,
        h: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        jac: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            param_dim,
            residual_dim,
            h: Box::new(h),
            jac: Box::new(jac),
        }
    }

    /// Scalar residual `h(x)` with derivative `dh(x)`.
    pub fn scalar(h: fn(f64) -> f64, dh: fn(f64) -> f64) -> Self {
        Self::new(
            1,
            1,
            move |x| DVector::from_element(1, h(x[0])),
            move |x| DMatrix::from_element(1, 1, dh(x[0])),
        )
    }

    /// `h(x) = A x - b`.
    pub fn linear(a: DMatrix<f64>, b: DVector<f64>) -> Self {
        let (q, p) = a.shape();
        let a2 = a.clone();
        Self::new(p, q, move |x| &a * x - &b, move |_| a2.clone())
    }
}

impl std::fmt::Debug for FnResidual {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnResidual")
            .field("param_dim", &self.param_dim)
            .field("residual_dim", &self.residual_dim)
            .finish()
    }
}

impl Residual for FnResidual {
    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn residual_dim(&self) -> usize {
        self.residual_dim
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.param_dim {
            return Err(QgsError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_dim,
                x.len()
            )));
        }
        let h = (self.h)(x);
        if h.len() != self.residual_dim {
            return Err(QgsError::Shape(format!(
                "residual closure returned {} entries, expected {}",
                h.len(),
                self.residual_dim
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(QgsError::Numeric("non-finite residual".into()));
        }
        Ok(h)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let jac = (self.jac)(x);
        if jac.shape() != (self.residual_dim, self.param_dim) {
            return Err(QgsError::Shape(format!(
                "jacobian closure returned {:?}, expected {:?}",
                jac.shape(),
                (self.residual_dim, self.param_dim)
            )));
        }
        Ok(jac)
    }
}

/// Constraint system `C_I(y) <= 0`, `C_E(y) = 0`, turned into equalities by
/// slack variables: `h(y, s) = [C_I(y) + s^2; C_E(y)]`.
pub struct SlackAugmentedCsp {
    y_dim: usize,
    inequality_dim: usize,
    equality_dim: usize,
    c_i: Option<(VecFn, MatFn)>,
    c_e: Option<(VecFn, MatFn)>,
}

impl SlackAugmentedCsp {
    pub fn new(y_dim: usize) -> Self {
        Self {
            y_dim,
            inequality_dim: 0,
            equality_dim: 0,
            c_i: None,
            c_e: None,
        }
    }

    /// Adds `C_I` (and its Jacobian) with `l` components.
    pub fn with_inequalities(
        mut self,
        l: usize,
        c: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        dc: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.inequality_dim = l;
        self.c_i = Some((Box::new(c), Box::new(dc)));
        self
    }

    /// Adds `C_E` (and its Jacobian) with `m_e` components.
    pub fn with_equalities(
        mut self,
        m_e: usize,
        c: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        dc: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.equality_dim = m_e;
        self.c_e = Some((Box::new(c), Box::new(dc)));
        self
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn inequality_dim(&self) -> usize {
        self.inequality_dim
    }

    pub fn equality_dim(&self) -> usize {
        self.equality_dim
    }

    /// Splits an augmented state `x = (y, s)`.
    pub fn split(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            x.rows(0, self.y_dim).into_owned(),
            x.rows(self.y_dim, self.inequality_dim).into_owned(),
        )
    }

    pub fn augment(&self, y: &DVector<f64>, s: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.y_dim || s.len() != self.inequality_dim {
            return Err(QgsError::Shape(format!(
                "expected y of length {} and s of length {}, got {} and {}",
                self.y_dim,
                self.inequality_dim,
                y.len(),
                s.len()
            )));
        }
        let mut h = DVector::zeros(self.inequality_dim + self.equality_dim);
        if let Some((c, _)) = &self.c_i {
            let ci = c(y);
            if ci.len() != self.inequality_dim {
                return Err(QgsError::Shape("C_I returned the wrong length".into()));
            }
            for k in 0..self.inequality_dim {
                h[k] = ci[k] + s[k] * s[k];
            }
        }
        if let Some((c, _)) = &self.c_e {
            let ce = c(y);
            if ce.len() != self.equality_dim {
                return Err(QgsError::Shape("C_E returned the wrong length".into()));
            }
            h.rows_mut(self.inequality_dim, self.equality_dim).copy_from(&ce);
        }
        Ok(h)
    }
}

pub fn augment_with_slacks(
    csp: &SlackAugmentedCsp,
    y: &DVector<f64>,
    s: &DVector<f64>,
) -> Result<DVector<f64>> {
    csp.augment(y, s)
}

impl Residual for SlackAugmentedCsp {
    fn param_dim(&self) -> usize {
        self.y_dim + self.inequality_dim
    }

    fn residual_dim(&self) -> usize {
        self.inequality_dim + self.equality_dim
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.param_dim() {
            return Err(QgsError::Shape(format!(
                "expected {} augmented variables, got {}",
                self.param_dim(),
                x.len()
            )));
        }
        let (y, s) = self.split(x);
        self.augment(&y, &s)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (y, s) = self.split(x);
        let l = self.inequality_dim;
        let mut jac = DMatrix::zeros(self.residual_dim(), self.param_dim());
        if let Some((_, dc)) = &self.c_i {
            jac.view_mut((0, 0), (l, self.y_dim)).copy_from(&dc(&y));
            for k in 0..l {
                jac[(k, self.y_dim + k)] = 2.0 * s[k];
            }
        }
        if let Some((_, dc)) = &self.c_e {
            jac.view_mut((l, 0), (self.equality_dim, self.y_dim)).copy_from(&dc(&y));
        }
        Ok(jac)
    }
}
