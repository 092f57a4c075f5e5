//! Three-layer fully recurrent network
//!
//! ```text
//! z(k) = psi(W u(k) + S z(k-1))
//! y(k) = V z(k)
//! ```
//!
//! with `V` of size `t x m`, `W` of size `m x n` and `S` of size `m x m`. No
//! bias terms, linear output layer, zero initial hidden state.
//!
//! All weights live in one flat [`ParamVector`] grouped per hidden node:
//! `[v_1, ..., v_m, w_1, ..., w_m, s_1, ..., s_m]`, where `v_i` is the
//! `t`-vector of output weights leaving hidden node `i` (column `i` of `V`),
//! `w_i` is row `i` of `W` and `s_i` is row `i` of `S`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{QgsError, Result};

/// Network dimensions: `n` inputs, `m` hidden nodes, `t` outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkShape {
    pub n: usize,
    pub m: usize,
    pub t: usize,
}

impl NetworkShape {
    pub fn new(n: usize, m: usize, t: usize) -> Result<Self> {
        if n == 0 || m == 0 || t == 0 {
            return Err(QgsError::Shape(format!(
                "network dimensions must be positive (n = {n}, m = {m}, t = {t})"
            )));
        }
        Ok(Self { n, m, t })
    }

    /// `m^2 + m (n + t)`.
    pub fn param_count(&self) -> usize {
        self.m * self.m + self.m * (self.n + self.t)
    }

    pub(crate) fn v_offset(&self) -> usize {
        0
    }

    pub(crate) fn w_offset(&self) -> usize {
        self.m * self.t
    }

    pub(crate) fn s_offset(&self) -> usize {
        self.m * (self.t + self.n)
    }

    /// Index of `V[(row, col)]` in the flat vector.
    pub fn v_index(&self, row: usize, col: usize) -> usize {
        self.v_offset() + col * self.t + row
    }

    /// Index of `W[(row, col)]` in the flat vector.
    pub fn w_index(&self, row: usize, col: usize) -> usize {
        self.w_offset() + row * self.n + col
    }

    /// Index of `S[(row, col)]` in the flat vector.
    pub fn s_index(&self, row: usize, col: usize) -> usize {
        self.s_offset() + row * self.m + col
    }
}

/// Elementwise hidden-layer nonlinearity together with its derivative.
#[derive(Clone, Copy)]
pub struct Activation {
    pub name: &'static str,
    pub value: fn(f64) -> f64,
    pub derivative: fn(f64) -> f64,
    /// The derivative written in terms of the output `psi(a)`, when that is
    /// cheaper than `derivative(a)`.
    pub derivative_from_output: Option<fn(f64) -> f64>,
}

impl Activation {
    pub fn tanh() -> Self {
        Self {
            name: "tanh",
            value: f64::tanh,
            derivative: |a| {
                let th = a.tanh();
                1.0 - th * th
            },
            derivative_from_output: Some(|z| 1.0 - z * z),
        }
    }

    /// `psi'(a)` given `a` and `z = psi(a)`.
    #[inline]
    pub fn derivative_at(&self, a: f64, z: f64) -> f64 {
        match self.derivative_from_output {
            Some(d) => d(z),
            None => (self.derivative)(a),
        }
    }
}

impl Default for Activation {
    fn default() -> Self {
        Self::tanh()
    }
}

impl std::fmt::Debug for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Activation").field("name", &self.name).finish()
    }
}

/// Flat vector of all network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: DVector<f64>,
    shape: NetworkShape,
}

impl ParamVector {
    pub fn new(shape: NetworkShape, values: DVector<f64>) -> Result<Self> {
        if values.len() != shape.param_count() {
            return Err(QgsError::Shape(format!(
                "parameter vector has length {} but shape {:?} needs {}",
                values.len(),
                shape,
                shape.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(QgsError::Numeric("parameter vector has non-finite entries".into()));
        }
        Ok(Self { values, shape })
    }

    pub fn from_slice(shape: NetworkShape, values: &[f64]) -> Result<Self> {
        Self::new(shape, DVector::from_column_slice(values))
    }

    pub fn zeros(shape: NetworkShape) -> Self {
        Self {
            values: DVector::zeros(shape.param_count()),
            shape,
        }
    }

    /// I.i.d. `N(0, sigma^2)` entries.
    pub fn random_normal<R: Rng + ?Sized>(shape: NetworkShape, sigma: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
        let values = DVector::from_fn(shape.param_count(), |_, _| normal.sample(rng));
        Self { values, shape }
    }

    pub fn shape(&self) -> NetworkShape {
        self.shape
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The three weight matrices of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// Output weights, `t x m`.
    pub v: DMatrix<f64>,
    /// Input weights, `m x n`.
    pub w: DMatrix<f64>,
    /// Recurrent weights, `m x m`.
    pub s: DMatrix<f64>,
}

impl Weights {
    pub fn shape(&self) -> Result<NetworkShape> {
        let m = self.s.nrows();
        if self.s.ncols() != m || self.w.nrows() != m || self.v.ncols() != m {
            return Err(QgsError::Shape(format!(
                "inconsistent weight matrices: V {}x{}, W {}x{}, S {}x{}",
                self.v.nrows(),
                self.v.ncols(),
                self.w.nrows(),
                self.w.ncols(),
                self.s.nrows(),
                self.s.ncols()
            )));
        }
        NetworkShape::new(self.w.ncols(), m, self.v.nrows())
    }
}

pub fn pack(v: &DMatrix<f64>, w: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<ParamVector> {
    let weights = Weights {
        v: v.clone(),
        w: w.clone(),
        s: s.clone(),
    };
    let shape = weights.shape()?;
    let mut values = DVector::zeros(shape.param_count());
    for i in 0..shape.m {
        for r in 0..shape.t {
            values[shape.v_index(r, i)] = v[(r, i)];
        }
        for c in 0..shape.n {
            values[shape.w_index(i, c)] = w[(i, c)];
        }
        for c in 0..shape.m {
            values[shape.s_index(i, c)] = s[(i, c)];
        }
    }
    ParamVector::new(shape, values)
}

pub fn unpack(x: &ParamVector) -> Weights {
    let sh = x.shape;
    let xv = &x.values;
    Weights {
        v: DMatrix::from_fn(sh.t, sh.m, |r, c| xv[sh.v_index(r, c)]),
        w: DMatrix::from_fn(sh.m, sh.n, |r, c| xv[sh.w_index(r, c)]),
        s: DMatrix::from_fn(sh.m, sh.m, |r, c| xv[sh.s_index(r, c)]),
    }
}

/// Network with unpacked weights, ready for evaluation.
#[derive(Debug, Clone)]
pub struct Network {
    shape: NetworkShape,
    weights: Weights,
    activation: Activation,
}

impl Network {
    pub fn new(x: &ParamVector) -> Self {
        Self::with_activation(x, Activation::tanh())
    }

    pub fn with_activation(x: &ParamVector, activation: Activation) -> Self {
        Self {
            shape: x.shape(),
            weights: unpack(x),
            activation,
        }
    }

    pub fn shape(&self) -> NetworkShape {
        self.shape
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Pre-activation `W u + S z_prev`.
    pub(crate) fn preactivation(&self, u: &DVector<f64>, z_prev: &DVector<f64>) -> DVector<f64> {
        let mut a = &self.weights.w * u;
        a.gemv(1.0, &self.weights.s, z_prev, 1.0);
        a
    }

    /// One step of the recursion; returns `(z(k), y_hat(k))`.
    pub fn step(
        &self,
        u: &DVector<f64>,
        z_prev: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if u.len() != self.shape.n || z_prev.len() != self.shape.m {
            return Err(QgsError::Shape(format!(
                "step expects u of length {} and z of length {}, got {} and {}",
                self.shape.n,
                self.shape.m,
                u.len(),
                z_prev.len()
            )));
        }
        if u.iter().chain(z_prev.iter()).any(|v| !v.is_finite()) {
            return Err(QgsError::Numeric("non-finite network input".into()));
        }
        let z = self.preactivation(u, z_prev).map(self.activation.value);
        let y = &self.weights.v * &z;
        Ok((z, y))
    }

    /// Runs the recursion over `inputs` from `z0` (zero when `None`).
    pub fn simulate(
        &self,
        inputs: &[DVector<f64>],
        z0: Option<&DVector<f64>>,
    ) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        let mut z = match z0 {
            Some(z0) => z0.clone(),
            None => DVector::zeros(self.shape.m),
        };
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut states = Vec::with_capacity(inputs.len());
        for u in inputs {
            let (z_next, y) = self.step(u, &z)?;
            z = z_next;
            outputs.push(y);
            states.push(z.clone());
        }
        Ok((outputs, states))
    }
}

pub fn forward_step(
    x: &ParamVector,
    u: &DVector<f64>,
    z_prev: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    Network::new(x).step(u, z_prev)
}

pub fn simulate_sequence(
    x: &ParamVector,
    inputs: &[DVector<f64>],
    z0: Option<&DVector<f64>>,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    Network::new(x).simulate(inputs, z0)
}

/// Network predictions for every sample of `dataset`.
pub fn predict(x: &ParamVector, dataset: &Dataset) -> Result<Vec<DVector<f64>>> {
    check_dataset(x.shape(), dataset)?;
    Ok(simulate_sequence(x, dataset.inputs(), None)?.0)
}

/// Sum of squared prediction errors over the dataset.
pub fn sse(x: &ParamVector, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(QgsError::Domain("sse of an empty dataset".into()));
    }
    let outputs = predict(x, dataset)?;
    Ok(outputs
        .iter()
        .zip(dataset.targets())
        .map(|(y_hat, y)| (y_hat - y).norm_squared())
        .sum())
}

pub(crate) fn check_dataset(shape: NetworkShape, dataset: &Dataset) -> Result<()> {
    if dataset.input_dim() != shape.n || dataset.output_dim() != shape.t {
        return Err(QgsError::Shape(format!(
            "dataset has n = {}, t = {} but network expects n = {}, t = {}",
            dataset.input_dim(),
            dataset.output_dim(),
            shape.n,
            shape.t
        )));
    }
    Ok(())
}
