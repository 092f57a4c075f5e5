//! Identification benchmarks: a second-order nonlinear plant and a
//! tenth-order NARMA plant, driven by `N(0, 0.5^2)` inputs, plus the error
//! metrics used to compare trained networks.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta, Split};
use crate::error::{QgsError, Result};
use crate::rnn::{Network, ParamVector};

/// Standard deviation of the plant input `q(k)`.
pub const INPUT_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    /// `y(k+1) = y(k) y(k-1) (y(k) + 0.25) / (1 + y(k)^2 + y(k-1)^2) + q(k)`
    Example1,
    /// `y(k+1) = 0.3 y(k) + 0.05 y(k) sum_{i=1..9} y(k-i) + 1.5 q(k-9) q(k) + 0.1`
    Example2,
}

impl System {
    pub fn as_str(&self) -> &'static str {
        match self {
            System::Example1 => "example1",
            System::Example2 => "example2",
        }
    }

    /// Number of past outputs (and past inputs) the plant state holds.
    pub fn order(&self) -> usize {
        match self {
            System::Example1 => 2,
            System::Example2 => 10,
        }
    }

    /// Length of the network regressor `u(k)`.
    pub fn regressor_dim(&self) -> usize {
        match self {
            System::Example1 => 4,
            System::Example2 => 15,
        }
    }

    /// Number of input lags at the front of the regressor; the rest are
    /// output lags.
    fn input_lags(&self) -> usize {
        match self {
            System::Example1 => 2,
            System::Example2 => 10,
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for System {
    type Err = QgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "example1" => Ok(System::Example1),
            "example2" => Ok(System::Example2),
            other => Err(QgsError::Config(format!("unknown system '{other}'"))),
        }
    }
}

pub fn step_example1(y_k: f64, y_km1: f64, q_k: f64) -> f64 {
    y_k * y_km1 * (y_k + 0.25) / (1.0 + y_k * y_k + y_km1 * y_km1) + q_k
}

/// `y_lags[0] = y(k)`, ..., `y_lags[9] = y(k-9)`.
pub fn step_example2(y_lags: &[f64; 10], q_k: f64, q_km9: f64) -> f64 {
    let tail: f64 = y_lags[1..10].iter().sum();
    0.3 * y_lags[0] + 0.05 * y_lags[0] * tail + 1.5 * q_km9 * q_k + 0.1
}

/// Lag buffers of a plant: most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    system: System,
    outputs: VecDeque<f64>,
    inputs: VecDeque<f64>,
}

impl PlantState {
    /// Zero initial conditions.
    pub fn new(system: System) -> Self {
        let order = system.order();
        Self {
            system,
            outputs: VecDeque::from(vec![0.0; order]),
            inputs: VecDeque::from(vec![0.0; order]),
        }
    }

    pub fn outputs(&self) -> &VecDeque<f64> {
        &self.outputs
    }

    pub fn inputs(&self) -> &VecDeque<f64> {
        &self.inputs
    }

    /// Applies `q(k)`; returns `(u(k), y(k+1))` and shifts the buffers.
    pub fn advance(&mut self, q_k: f64) -> (Vec<f64>, f64) {
        self.inputs.pop_back();
        self.inputs.push_front(q_k);
        let y_next = match self.system {
            System::Example1 => step_example1(self.outputs[0], self.outputs[1], q_k),
            System::Example2 => {
                let mut lags = [0.0; 10];
                for (dst, src) in lags.iter_mut().zip(&self.outputs) {
                    *dst = *src;
                }
                step_example2(&lags, q_k, self.inputs[9])
            }
        };
        let regressor = self.regressor();
        self.outputs.pop_back();
        self.outputs.push_front(y_next);
        (regressor, y_next)
    }

    /// `[q(k), q(k-1), y(k), y(k-1)]` or `[q(k..k-9), y(k..k-4)]`.
    fn regressor(&self) -> Vec<f64> {
        let (nq, ny) = match self.system {
            System::Example1 => (2, 2),
            System::Example2 => (10, 5),
        };
        self.inputs
            .iter()
            .take(nq)
            .chain(self.outputs.iter().take(ny))
            .copied()
            .collect()
    }
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Test => 1,
    }
}

/// Drives a plant from rest with Gaussian inputs, discards `order` warm-up
/// steps and records `N` series-parallel regressor/target pairs. Train and
/// test splits draw from separate random streams of the same seed.
pub fn generate_dataset(system: System, samples: usize, seed: u64, split: Split) -> Result<Dataset> {
    if samples == 0 {
        return Err(QgsError::Precondition("dataset needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split_stream(split));
    let normal = Normal::new(0.0, INPUT_SIGMA).expect("valid sigma");
    let mut plant = PlantState::new(system);
    let mut inputs = Vec::with_capacity(samples);
    let mut targets = Vec::with_capacity(samples);
    for step in 0..system.order() + samples {
        let (u, y_next) = plant.advance(normal.sample(&mut rng));
        if !y_next.is_finite() {
            return Err(QgsError::Numeric(format!("{system} plant diverged at step {step}")));
        }
        if step >= system.order() {
            inputs.push(DVector::from_vec(u));
            targets.push(DVector::from_element(1, y_next));
        }
    }
    Dataset::new(
        inputs,
        targets,
        DatasetMeta {
            system: system.as_str().to_string(),
            seed,
            samples,
            split,
            n: system.regressor_dim(),
            t: 1,
        },
    )
}

/// Mean over samples of `e^T e`.
pub fn mse(predictions: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(QgsError::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(QgsError::Domain("mse of zero samples".into()));
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y).norm_squared())
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Mean absolute error as a percentage of the target range (per output).
pub fn generalization_error_pct(predictions: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(QgsError::Shape(format!(
            "{} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(QgsError::Domain("no samples".into()));
    }
    let t = targets[0].len();
    let mut ranges = Vec::with_capacity(t);
    for j in 0..t {
        let (lo, hi) = targets
            .iter()
            .map(|y| y[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if !(range > 0.0) {
            return Err(QgsError::Domain(format!("target component {j} is constant")));
        }
        ranges.push(range);
    }
    let mut total = 0.0;
    for (p, y) in predictions.iter().zip(targets) {
        for j in 0..t {
            total += (p[j] - y[j]).abs() / ranges[j];
        }
    }
    Ok(100.0 * total / (targets.len() * t) as f64)
}

/// Parallel (free-running) predictions: the output lags of the regressor
/// are replaced by the network's own past predictions, starting from the
/// measured lags of the first sample.
pub fn free_run_predictions(x: &ParamVector, system: System, dataset: &Dataset) -> Result<Vec<DVector<f64>>> {
    if dataset.input_dim() != system.regressor_dim() || dataset.output_dim() != 1 {
        return Err(QgsError::Shape(format!("dataset does not match {system} regressors")));
    }
    let net = Network::new(x);
    let nq = system.input_lags();
    let ny = system.regressor_dim() - nq;
    let Some(first) = dataset.inputs().first() else {
        return Ok(Vec::new());
    };
    let mut y_lags: VecDeque<f64> = first.iter().skip(nq).copied().collect();
    let mut z = DVector::zeros(x.shape().m);
    let mut out = Vec::with_capacity(dataset.len());
    for u in dataset.inputs() {
        let mut reg = u.clone();
        for (i, y) in y_lags.iter().enumerate().take(ny) {
            reg[nq + i] = *y;
        }
        let (z_next, y_hat) = net.step(&reg, &z)?;
        z = z_next;
        y_lags.pop_back();
        y_lags.push_front(y_hat[0]);
        out.push(y_hat);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual::{Residual, ResidualSystem, SensitivityMode};
    use crate::rnn::{predict, NetworkShape};
    use approx::assert_abs_diff_eq;

    #[test]
    fn example1_hand_values() {
        assert_eq!(step_example1(0.0, 0.0, 0.0), 0.0);
        assert_abs_diff_eq!(step_example1(1.0, 1.0, 0.0), 1.25 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(step_example1(1.0, 1.0, 0.5), 1.25 / 3.0 + 0.5, epsilon = 1e-15);
    }

    #[test]
    fn example2_hand_values() {
        let zero = [0.0; 10];
        assert_abs_diff_eq!(step_example2(&zero, 0.0, 0.0), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(step_example2(&zero, 1.0, 1.0), 1.6, epsilon = 1e-15);
        let mut lags = [0.0; 10];
        lags[0] = 1.0;
        assert_abs_diff_eq!(step_example2(&lags, 0.0, 0.0), 0.4, epsilon = 1e-15);
    }

    #[test]
    fn example2_sum_runs_over_nine_lags() {
        // y(k-10) is not held; y(k-1..k-9) each contribute 0.05 * y(k).
        let mut lags = [1.0; 10];
        lags[0] = 2.0;
        assert_abs_diff_eq!(step_example2(&lags, 0.0, 0.0), 0.6 + 0.05 * 2.0 * 9.0 + 0.1, epsilon = 1e-14);
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(matches!(
            generate_dataset(System::Example1, 0, 1, Split::Train),
            Err(QgsError::Precondition(_))
        ));
    }

    #[test]
    fn dataset_dimensions() {
        let d1 = generate_dataset(System::Example1, 200, 7, Split::Train).unwrap();
        assert_eq!((d1.len(), d1.input_dim(), d1.output_dim()), (200, 4, 1));
        let d2 = generate_dataset(System::Example2, 100, 7, Split::Train).unwrap();
        assert_eq!((d2.len(), d2.input_dim(), d2.output_dim()), (100, 15, 1));
        assert_eq!(d2.meta().system, "example2");
    }

    #[test]
    fn generation_is_deterministic_and_split_dependent() {
        let a = generate_dataset(System::Example2, 50, 3, Split::Train).unwrap();
        let b = generate_dataset(System::Example2, 50, 3, Split::Train).unwrap();
        let c = generate_dataset(System::Example2, 50, 3, Split::Test).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.inputs(), c.inputs());
    }

    #[test]
    fn regressor_layout_example1() {
        let d = generate_dataset(System::Example1, 5, 11, Split::Train).unwrap();
        let (u, y) = (d.inputs(), d.targets());
        for k in 1..d.len() {
            // q(k-1) of row k is q(k) of row k-1; y(k) of row k is the target of row k-1.
            assert_eq!(u[k][1], u[k - 1][0]);
            assert_eq!(u[k][2], y[k - 1][0]);
            assert_eq!(u[k][3], u[k - 1][2]);
            assert_abs_diff_eq!(y[k][0], step_example1(u[k][2], u[k][3], u[k][0]), epsilon = 0.0);
        }
    }

    #[test]
    fn regressor_layout_example2() {
        let d = generate_dataset(System::Example2, 30, 5, Split::Test).unwrap();
        let (u, y) = (d.inputs(), d.targets());
        for k in 1..d.len() {
            for i in 1..10 {
                assert_eq!(u[k][i], u[k - 1][i - 1]);
            }
            assert_eq!(u[k][10], y[k - 1][0]);
            for i in 11..15 {
                assert_eq!(u[k][i], u[k - 1][i - 1]);
            }
        }
    }

    #[test]
    fn example1_bounded_under_truncated_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, INPUT_SIGMA).unwrap();
        let mut plant = PlantState::new(System::Example1);
        for _ in 0..10_000 {
            let q = normal.sample(&mut rng).clamp(-3.0 * INPUT_SIGMA, 3.0 * INPUT_SIGMA);
            let (_, y) = plant.advance(q);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn plant_buffers_have_plant_order() {
        for sys in [System::Example1, System::Example2] {
            let mut p = PlantState::new(sys);
            p.advance(0.3);
            assert_eq!(p.outputs().len(), sys.order());
            assert_eq!(p.inputs().len(), sys.order());
        }
    }

    #[test]
    fn mse_examples() {
        let v = |x: f64| DVector::from_element(1, x);
        assert_eq!(mse(&[v(1.0), v(2.0)], &[v(1.0), v(2.0)]).unwrap(), 0.0);
        assert_eq!(mse(&[v(1.0), v(1.0)], &[v(0.0), v(0.0)]).unwrap(), 1.0);
        assert_eq!(mse(&[v(0.5)], &[v(0.0)]).unwrap(), 0.25);
        assert!(matches!(mse(&[v(0.5)], &[]), Err(QgsError::Shape(_))));
        assert!(matches!(mse(&[], &[]), Err(QgsError::Domain(_))));
    }

    #[test]
    fn generalization_examples() {
        let v = |x: f64| DVector::from_element(1, x);
        let targets: Vec<_> = (0..21).map(|k| v(-1.0 + 0.1 * k as f64)).collect();
        assert_eq!(generalization_error_pct(&targets, &targets).unwrap(), 0.0);
        let off: Vec<_> = targets.iter().map(|y| y.add_scalar(0.01)).collect();
        assert_abs_diff_eq!(generalization_error_pct(&off, &targets).unwrap(), 0.5, epsilon = 1e-12);
        let off2: Vec<_> = targets.iter().map(|y| y.add_scalar(0.02)).collect();
        assert_abs_diff_eq!(
            generalization_error_pct(&off2, &targets).unwrap(),
            2.0 * generalization_error_pct(&off, &targets).unwrap(),
            epsilon = 1e-12
        );
        let flat = vec![v(1.0), v(1.0)];
        assert!(matches!(generalization_error_pct(&flat, &flat), Err(QgsError::Domain(_))));
    }

    #[test]
    fn mse_times_n_is_sse() {
        let d = generate_dataset(System::Example1, 40, 2, Split::Train).unwrap();
        let shape = NetworkShape::new(4, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ParamVector::random_normal(shape, 0.5, &mut rng);
        let m = mse(&predict(&x, &d).unwrap(), d.targets()).unwrap();
        let sys = ResidualSystem::new(d.clone(), shape, SensitivityMode::FullRecurrent).unwrap();
        let sse = 2.0 * sys.objective(x.values()).unwrap();
        assert_abs_diff_eq!(m * d.len() as f64, sse, epsilon = 1e-12 * sse.max(1.0));
    }

    #[test]
    fn free_run_matches_series_parallel_for_perfect_first_step() {
        let d = generate_dataset(System::Example1, 10, 2, Split::Test).unwrap();
        let x = ParamVector::zeros(NetworkShape::new(4, 2, 1).unwrap());
        let out = free_run_predictions(&x, System::Example1, &d).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|y| y[0] == 0.0));
    }
}
