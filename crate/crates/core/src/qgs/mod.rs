//! Quotient gradient system: trajectory integration, equilibrium
//! classification, escapes from stability regions and the multi-minimum
//! search built from them.

mod classify;
mod integrate;
mod search;

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{QgsError, Result};
use crate::fsio::write_atomic;

pub use classify::{classify_equilibrium, hessian_fd, linearize, Linearization, LinearizationKind};
pub use integrate::{integrate_backward, integrate_forward};
pub use search::{
    best_by_score, best_by_validation, escape, search_minima, EscapeCandidate, SearchOutcome,
    StopReason,
};

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Explicit Dormand-Prince 5(4).
    #[default]
    DormandPrince,
    /// Linearly implicit ROS2 with an embedded first-order estimate; the
    /// stage matrix uses the Gauss-Newton product `Dh^T Dh`. Suited to the
    /// stiff flows of network training, where explicit steps are limited by
    /// the largest curvature.
    Rosenbrock,
}

/// Step control and stopping settings of the trajectory integrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub method: Method,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub min_step: f64,
    /// First trial step; chosen from the initial slope when absent.
    pub initial_step: Option<f64>,
    /// Threshold on `|grad f|_inf` that counts as an equilibrium.
    pub equilibrium_tol: f64,
    pub max_time: f64,
    pub max_steps: usize,
    /// Accepted steps may not move `f` against the flow by more than
    /// `monotone_slack * (1 + |f|)`.
    pub monotone_slack: f64,
    /// Record every `trace_stride`-th accepted step.
    pub trace_stride: usize,
    /// Store the state vector in each trace point.
    pub trace_states: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::DormandPrince,
            rel_tol: 1e-6,
            abs_tol: 1e-8,
            max_step: 10.0,
            min_step: 1e-12,
            initial_step: None,
            equilibrium_tol: 1e-8,
            max_time: 1e6,
            max_steps: 200_000,
            monotone_slack: 1e-10,
            trace_stride: 1,
            trace_states: false,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("min_step", self.min_step),
            ("max_step", self.max_step),
            ("equilibrium_tol", self.equilibrium_tol),
            ("max_time", self.max_time),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || v.is_nan() {
                return Err(QgsError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.min_step > self.max_step {
            return Err(QgsError::Config(format!(
                "min_step {} exceeds max_step {}",
                self.min_step, self.max_step
            )));
        }
        if self.monotone_slack < 0.0 {
            return Err(QgsError::Config("monotone_slack must be >= 0".into()));
        }
        if self.max_steps == 0 || self.trace_stride == 0 {
            return Err(QgsError::Config("max_steps and trace_stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `x' = -grad f`
    Forward,
    /// `x' = +grad f`
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Equilibrium,
    CapReached,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub t: f64,
    pub f: f64,
    pub grad_norm: f64,
    pub x: Option<DVector<f64>>,
}

impl TracePoint {
    fn new(step: usize, t: f64, f: f64, grad_norm: f64, x: &DVector<f64>, keep_x: bool) -> Self {
        Self {
            step,
            t,
            f,
            grad_norm,
            x: keep_x.then(|| x.clone()),
        }
    }
}

/// Sampled trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub has_states: bool,
    pub points: Vec<TracePoint>,
}

impl Trace {
    fn new(has_states: bool) -> Self {
        Self {
            has_states,
            points: Vec::new(),
        }
    }

    fn push(&mut self, p: TracePoint) {
        self.points.push(p);
    }

    /// CSV with columns `step,t,f,grad_norm` and `x_1..x_p` when states are
    /// recorded and `include_states` is set.
    pub fn to_csv(&self, include_states: bool) -> Result<Vec<u8>> {
        let states = include_states && self.has_states;
        let dim = if states {
            self.points
                .iter()
                .find_map(|p| p.x.as_ref().map(|x| x.len()))
                .unwrap_or(0)
        } else {
            0
        };
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["step".to_string(), "t".into(), "f".into(), "grad_norm".into()];
        header.extend((1..=dim).map(|i| format!("x_{i}")));
        wtr.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![
                p.step.to_string(),
                p.t.to_string(),
                p.f.to_string(),
                p.grad_norm.to_string(),
            ];
            if let (true, Some(x)) = (states, &p.x) {
                row.extend(x.iter().map(|v| v.to_string()));
            }
            wtr.write_record(&row)?;
        }
        wtr.into_inner()
            .map_err(|e| QgsError::Io(std::io::Error::other(e.to_string())))
    }

    pub fn write_csv(&self, path: &Path, include_states: bool) -> Result<()> {
        write_atomic(path, &self.to_csv(include_states)?)
    }
}

#[derive(Debug, Clone)]
pub struct IntegrationResult {
    pub x_end: DVector<f64>,
    pub f_end: f64,
    pub grad_norm_end: f64,
    pub t_end: f64,
    pub status: Status,
    pub steps: usize,
    pub rejected: usize,
    pub evaluations: usize,
    pub trace: Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
    Indeterminate,
}

/// Where an equilibrium came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Sequence number of the forward-integration start point.
    pub start_id: usize,
    /// Archive index of the minimum that was escaped from; `None` for the
    /// initial start.
    pub parent: Option<usize>,
    /// How the start point was produced, e.g. `initial`, `eig-min+/saddle-`,
    /// `random3/cap`.
    pub direction: String,
}

impl Provenance {
    pub fn initial() -> Self {
        Self {
            start_id: 0,
            parent: None,
            direction: "initial".into(),
        }
    }
}

/// A classified equilibrium of the flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumRecord {
    #[serde(with = "dvector_as_vec")]
    pub x: DVector<f64>,
    pub f_value: f64,
    pub grad_norm: f64,
    pub stability: Stability,
    pub eig_min: f64,
    pub eig_max: f64,
    pub linearization: LinearizationKind,
    pub found_at: Provenance,
}

/// Settings for classification of equilibria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyConfig {
    /// An equilibrium is stable when the smallest linearization eigenvalue is
    /// at least `-(tol + rel_tol * |largest eigenvalue|)`.
    pub tol: f64,
    /// Negative curvature this small relative to the spectrum is treated as
    /// flat.
    pub rel_tol: f64,
    /// Below this `|h|_2` the Gauss-Newton matrix `Dh^T Dh` is used; above it
    /// a finite-difference Hessian of `f`.
    pub gauss_newton_residual: f64,
    /// Relative step of the finite-difference Hessian.
    pub hessian_step: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            rel_tol: 0.0,
            gauss_newton_residual: 1e-6,
            hessian_step: 1e-5,
        }
    }
}

/// Everything the search needs besides the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub integrator: IntegratorConfig,
    /// Settings of the backward (escape) integrations; defaults to
    /// `integrator` when absent.
    pub backward: Option<IntegratorConfig>,
    pub classify: ClassifyConfig,
    /// Size of escape perturbations in the infinity norm.
    pub kick: f64,
    /// Escape directions tried per new minimum.
    pub escape_directions: usize,
    /// How many times a forward run that stops at a saddle is kicked
    /// downhill along its most negative curvature direction and resumed.
    pub saddle_continuations: usize,
    /// Fresh random start points drawn when the queue of start points runs
    /// dry before the budget does.
    pub restarts: usize,
    /// Standard deviation of the entries of a restart point.
    pub restart_sigma: f64,
    /// Fixed cap on `f` during backward runs; when absent the cap is
    /// `10 * best f + 1`.
    pub f_cap: Option<f64>,
    pub dedup_distance: f64,
    pub dedup_fvalue: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig::default(),
            backward: None,
            classify: ClassifyConfig::default(),
            kick: 1e-2,
            escape_directions: 4,
            saddle_continuations: 0,
            restarts: 0,
            restart_sigma: 0.5,
            f_cap: None,
            dedup_distance: 1e-3,
            dedup_fvalue: 1e-8,
        }
    }
}

impl SearchConfig {
    pub fn backward_config(&self) -> &IntegratorConfig {
        self.backward.as_ref().unwrap_or(&self.integrator)
    }

    pub fn validate(&self) -> Result<()> {
        self.integrator.validate()?;
        self.backward_config().validate()?;
        if !(self.kick > 0.0) {
            return Err(QgsError::Config(format!("kick must be > 0, got {}", self.kick)));
        }
        if self.escape_directions == 0 {
            return Err(QgsError::Config("escape_directions must be >= 1".into()));
        }
        if !(self.restart_sigma > 0.0) || !self.restart_sigma.is_finite() {
            return Err(QgsError::Config(format!("restart_sigma must be > 0, got {}", self.restart_sigma)));
        }
        if !(self.classify.tol >= 0.0) || !(self.classify.rel_tol >= 0.0) {
            return Err(QgsError::Config("classification tolerances must be >= 0".into()));
        }
        if !(self.dedup_distance >= 0.0) || !(self.dedup_fvalue >= 0.0) {
            return Err(QgsError::Config("dedup thresholds must be >= 0".into()));
        }
        Ok(())
    }
}

/// Limits of a multi-minimum search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchBudget {
    pub max_minima: usize,
    pub max_escape_attempts: usize,
    /// Wall-clock limit. Hitting it makes the result timing-dependent.
    pub max_wall_seconds: f64,
    pub seed: u64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            max_minima: 50,
            max_escape_attempts: 200,
            max_wall_seconds: 3600.0,
            seed: 0,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<()> {
        if self.max_minima == 0 || self.max_escape_attempts == 0 || !(self.max_wall_seconds > 0.0) {
            return Err(QgsError::Config("search budget entries must be positive".into()));
        }
        Ok(())
    }
}

/// Distinct stable equilibria in discovery order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaArchive {
    pub records: Vec<EquilibriumRecord>,
    pub dedup_distance: f64,
    pub dedup_fvalue: f64,
}

impl MinimaArchive {
    pub fn new(dedup_distance: f64, dedup_fvalue: f64) -> Self {
        Self {
            records: Vec::new(),
            dedup_distance,
            dedup_fvalue,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn same(&self, a: &EquilibriumRecord, b: &EquilibriumRecord) -> bool {
        (&a.x - &b.x).amax() < self.dedup_distance && (a.f_value - b.f_value).abs() < self.dedup_fvalue
    }

    /// Index of an existing record that `rec` duplicates.
    pub fn find_duplicate(&self, rec: &EquilibriumRecord) -> Option<usize> {
        self.records.iter().position(|r| self.same(r, rec))
    }

    /// Inserts `rec` unless it duplicates an existing record; returns the new
    /// index when inserted.
    pub fn insert(&mut self, rec: EquilibriumRecord) -> Option<usize> {
        if self.find_duplicate(&rec).is_some() {
            return None;
        }
        self.records.push(rec);
        Some(self.records.len() - 1)
    }

    /// Merges another archive; the earlier record wins among duplicates.
    pub fn merge(&mut self, other: MinimaArchive) {
        for rec in other.records {
            self.insert(rec);
        }
    }

    pub fn best_f(&self) -> Option<f64> {
        self.records.iter().map(|r| r.f_value).reduce(f64::min)
    }
}

pub(crate) mod dvector_as_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(x: f64, f: f64) -> EquilibriumRecord {
        EquilibriumRecord {
            x: DVector::from_element(1, x),
            f_value: f,
            grad_norm: 0.0,
            stability: Stability::Stable,
            eig_min: 1.0,
            eig_max: 1.0,
            linearization: LinearizationKind::GaussNewton,
            found_at: Provenance::initial(),
        }
    }

    #[test]
    fn archive_dedup_needs_both_criteria() {
        let mut a = MinimaArchive::new(1e-3, 1e-8);
        assert_eq!(a.insert(rec(1.0, 0.0)), Some(0));
        assert_eq!(a.insert(rec(1.0 + 1e-4, 1e-9)), None);
        // close in x, far in f
        assert_eq!(a.insert(rec(1.0 + 1e-4, 1e-3)), Some(1));
        // far in x, same f
        assert_eq!(a.insert(rec(-1.0, 0.0)), Some(2));
        for (i, r) in a.records.iter().enumerate() {
            for s in &a.records[i + 1..] {
                assert!(!a.same(r, s));
            }
        }
    }

    #[test]
    fn merge_is_order_insensitive_in_content() {
        let mut a = MinimaArchive::new(1e-3, 1e-8);
        a.insert(rec(1.0, 0.0));
        let mut b = MinimaArchive::new(1e-3, 1e-8);
        b.insert(rec(1.0, 0.0));
        b.insert(rec(-1.0, 0.0));
        let mut ab = a.clone();
        ab.merge(b.clone());
        let mut ba = b;
        ba.merge(a);
        assert_eq!(ab.len(), 2);
        assert_eq!(ba.len(), 2);
    }

    #[test]
    fn record_serializes_x_as_plain_array() {
        let json = serde_json::to_value(rec(0.5, 0.0)).unwrap();
        assert_eq!(json["x"], serde_json::json!([0.5]));
        let back: EquilibriumRecord = serde_json::from_value(json).unwrap();
        assert_eq!(back, rec(0.5, 0.0));
    }

    #[test]
    fn trace_csv_columns() {
        let mut tr = Trace::new(true);
        tr.push(TracePoint::new(0, 0.0, 1.0, 2.0, &DVector::from_vec(vec![3.0, 4.0]), true));
        let text = String::from_utf8(tr.to_csv(true).unwrap()).unwrap();
        assert_eq!(text, "step,t,f,grad_norm,x_1,x_2\n0,0,1,2,3,4\n");
        let text = String::from_utf8(tr.to_csv(false).unwrap()).unwrap();
        assert_eq!(text, "step,t,f,grad_norm\n0,0,1,2\n");
    }
}
