//! Training configuration, the end-to-end training pipeline, run reports and
//! their aggregation into comparison tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{train_ebp, train_ga, EbpConfig, GaConfig};
use crate::benchmarks::{generalization_error_pct, mse};
use crate::dataset::{Dataset, DatasetMeta};
use crate::error::{QgsError, Result};
use crate::fsio::write_atomic;
use crate::qgs::{best_by_validation, search_minima, SearchBudget, SearchConfig, Stability, Status, StopReason};
use crate::residual::{ResidualSystem, SensitivityMode};
use crate::rnn::{predict, NetworkShape, ParamVector};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMethod {
    #[default]
    Qgs,
    Ga,
    Ebp,
}

impl TrainMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMethod::Qgs => "qgs",
            TrainMethod::Ga => "ga",
            TrainMethod::Ebp => "ebp",
        }
    }
}

impl std::str::FromStr for TrainMethod {
    type Err = QgsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qgs" => Ok(TrainMethod::Qgs),
            "ga" => Ok(TrainMethod::Ga),
            "ebp" => Ok(TrainMethod::Ebp),
            other => Err(QgsError::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Everything a training run depends on besides its datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: TrainMethod,
    /// Number of hidden units `m`.
    pub hidden: usize,
    /// Master seed. [`TrainConfig::resolved`] copies it into the search,
    /// EBP and GA seeds.
    pub seed: u64,
    /// Standard deviation of the random start point used by QGS and EBP.
    pub init_sigma: f64,
    pub sensitivity: SensitivityMode,
    pub search: SearchConfig,
    pub budget: SearchBudget,
    /// When the search archives no minimum, select among the forward end
    /// points by validation MSE instead of failing. The report says which
    /// source was used.
    pub fallback_to_endpoint: bool,
    pub ebp: EbpConfig,
    pub ga: GaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::Qgs,
            hidden: 4,
            seed: 0,
            init_sigma: 0.5,
            sensitivity: SensitivityMode::FullRecurrent,
            search: SearchConfig::default(),
            budget: SearchBudget::default(),
            fallback_to_endpoint: true,
            ebp: EbpConfig::default(),
            ga: GaConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Copy with the master seed pushed into every sub-config.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.budget.seed = cfg.seed;
        cfg.ebp.seed = cfg.seed;
        cfg.ga.seed = cfg.seed;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(QgsError::Config("hidden must be >= 1".into()));
        }
        if !(self.init_sigma >= 0.0) || !self.init_sigma.is_finite() {
            return Err(QgsError::Config(format!("init_sigma must be >= 0, got {}", self.init_sigma)));
        }
        match self.method {
            TrainMethod::Qgs => {
                self.search.validate()?;
                self.budget.validate()
            }
            TrainMethod::Ebp => self.ebp.validate(),
            TrainMethod::Ga => self.ga.validate(),
        }
    }

    /// Settings for the benchmark runs: [`benchmark_search`] plus a small
    /// escape budget for QGS and 20 000 epochs for EBP.
    pub fn benchmark(method: TrainMethod, hidden: usize, seed: u64) -> Self {
        let mut cfg = Self { method, hidden, seed, ..Self::default() };
        cfg.search = benchmark_search();
        cfg.budget.max_minima = 10;
        cfg.budget.max_escape_attempts = 20;
        cfg.budget.max_wall_seconds = 1e6;
        cfg.ebp.max_epochs = 20_000;
        cfg
    }
}

/// Search settings for network benchmarks.
///
/// Gradient flows of these networks are stiff and often creep along
/// shallow valleys, so equilibria are accepted at `|grad f|_inf < 1e-3` with
/// curvature down to `-3e-2`, each forward run has a step budget, runs that
/// stop at saddles are continued downhill, and the search restarts from fresh
/// random points when it runs out of start points.
pub fn benchmark_search() -> SearchConfig {
    let mut cfg = SearchConfig::default();
    cfg.integrator.rel_tol = 1e-4;
    cfg.integrator.abs_tol = 1e-6;
    cfg.integrator.equilibrium_tol = 1e-3;
    cfg.integrator.max_steps = 50_000;
    cfg.classify.tol = 3e-2;
    cfg.saddle_continuations = 4;
    cfg.escape_directions = 2;
    cfg.restarts = 4;
    cfg
}

/// Datasets of one run. Selection among QGS minima uses `validation` when
/// present and the test set otherwise.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
    pub validation: Option<Dataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeEcho {
    pub n: usize,
    pub m: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub f_value: f64,
    pub grad_norm: f64,
    pub stability: Stability,
    pub eig_min: f64,
    pub direction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveSummary {
    pub count: usize,
    pub records: Vec<ArchiveEntry>,
    pub forward_runs: usize,
    pub forward_unconverged: usize,
    pub escape_attempts: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSource {
    /// Best archived minimum on the validation set.
    Archive,
    /// Forward end point with the lowest validation MSE; the archive was
    /// empty.
    Endpoint,
    /// Final iterate of a baseline trainer.
    Trainer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub source: SelectionSource,
    /// Index into the archive, or into the unarchived end points for an
    /// endpoint selection.
    pub archive_index: Option<usize>,
    pub validation_mse: Option<f64>,
    /// Status of the forward run that produced an endpoint selection.
    pub endpoint_status: Option<Status>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEcho {
    pub train: DatasetMeta,
    pub test: DatasetMeta,
    pub validation: Option<DatasetMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub method: TrainMethod,
    pub seed: u64,
    pub shape: ShapeEcho,
    pub config: TrainConfig,
    pub datasets: DatasetEcho,
    pub train_objective: f64,
    pub train_mse: f64,
    pub test_mse: f64,
    pub generalization_pct: f64,
    pub wall_seconds: f64,
    pub selection: Selection,
    pub archive: Option<ArchiveSummary>,
    /// Epochs for EBP, generations for GA.
    pub iterations: Option<usize>,
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: RunReport = serde_json::from_str(text)?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(QgsError::Config(format!(
                "unsupported report schema_version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Names of the metrics that differ in bit pattern from `other`. Wall time
    /// and artifact paths are not metrics.
    pub fn metric_differences(&self, other: &RunReport) -> Vec<&'static str> {
        let mut diffs = Vec::new();
        let pairs = [
            ("train_objective", self.train_objective, other.train_objective),
            ("train_mse", self.train_mse, other.train_mse),
            ("test_mse", self.test_mse, other.test_mse),
            ("generalization_pct", self.generalization_pct, other.generalization_pct),
        ];
        for (name, a, b) in pairs {
            if a.to_bits() != b.to_bits() {
                diffs.push(name);
            }
        }
        if self.selection != other.selection {
            diffs.push("selection");
        }
        if self.archive != other.archive {
            diffs.push("archive");
        }
        if self.iterations != other.iterations {
            diffs.push("iterations");
        }
        diffs
    }
}

/// A finished run: its report, the selected network and the trainer's
/// objective history when it has one.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub x: ParamVector,
    pub history: Option<Vec<f64>>,
}

/// Random start point of QGS and EBP runs, drawn from the master seed.
pub fn start_point(shape: NetworkShape, cfg: &TrainConfig) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ParamVector::random_normal(shape, cfg.init_sigma, &mut rng)
}

fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(QgsError::Numeric(format!("{name} is not finite")))
    }
}

/// Trains one network as configured and evaluates it on the test set.
pub fn run_train(config: &TrainConfig, data: &TrainData) -> Result<RunOutput> {
    let cfg = config.resolved();
    cfg.validate()?;
    let train = &data.train;
    let test = &data.test;
    if test.input_dim() != train.input_dim() || test.output_dim() != train.output_dim() {
        return Err(QgsError::Shape(format!(
            "test set is {}-in/{}-out, training set {}-in/{}-out",
            test.input_dim(),
            test.output_dim(),
            train.input_dim(),
            train.output_dim()
        )));
    }
    let validation = data.validation.as_ref().unwrap_or(test);
    if validation.input_dim() != train.input_dim() || validation.output_dim() != train.output_dim() {
        return Err(QgsError::Shape("validation set does not match the training set".into()));
    }
    let shape = NetworkShape::new(train.input_dim(), cfg.hidden, train.output_dim())?;
    let sys = ResidualSystem::new(train.clone(), shape, cfg.sensitivity)?;
    let started = Instant::now();

    let (x, selection, archive, iterations, history): (DVector<f64>, _, _, _, _) = match cfg.method {
        TrainMethod::Qgs => {
            let x0 = start_point(shape, &cfg);
            let mut out = search_minima(&sys, x0.values(), &cfg.search, &cfg.budget)?;
            if out.stop_reason == StopReason::WallClock {
                log::warn!("search stopped on the wall-clock budget; the result depends on timing");
            }
            let summary = ArchiveSummary {
                count: out.archive.len(),
                records: out
                    .archive
                    .records
                    .iter()
                    .map(|r| ArchiveEntry {
                        f_value: r.f_value,
                        grad_norm: r.grad_norm,
                        stability: r.stability,
                        eig_min: r.eig_min,
                        direction: r.found_at.direction.clone(),
                    })
                    .collect(),
                forward_runs: out.forward_runs,
                forward_unconverged: out.forward_unconverged,
                escape_attempts: out.escape_attempts,
                stop_reason: out.stop_reason,
            };
            if !out.archive.is_empty() {
                let (index, vmse) = best_by_validation(&out.archive, shape, validation)?;
                let selection = Selection {
                    source: SelectionSource::Archive,
                    archive_index: Some(index),
                    validation_mse: Some(vmse),
                    endpoint_status: None,
                };
                (out.archive.records[index].x.clone(), selection, Some(summary), None, None)
            } else {
                if !cfg.fallback_to_endpoint || out.unarchived.is_empty() {
                    return Err(QgsError::Domain(
                        "search archived no minimum and no fallback end point is available".into(),
                    ));
                }
                // Same rule as for archived minima: lowest validation MSE,
                // then lower f, then discovery order.
                let mut best: Option<(usize, f64)> = None;
                for (i, end) in out.unarchived.iter().enumerate() {
                    let xv = ParamVector::new(shape, end.x.clone())?;
                    let v = mse(&predict(&xv, validation)?, validation.targets())?;
                    let better = match best {
                        None => true,
                        Some((j, bv)) => v < bv || (v == bv && end.f_value < out.unarchived[j].f_value),
                    };
                    if better {
                        best = Some((i, v));
                    }
                }
                let (index, vmse) = best.expect("non-empty");
                let end = out.unarchived.swap_remove(index);
                log::warn!(
                    "no minimum archived; using forward end point {index} of {} (f = {:e}, |grad|_inf = {:e})",
                    out.unarchived.len() + 1,
                    end.f_value,
                    end.grad_norm
                );
                let selection = Selection {
                    source: SelectionSource::Endpoint,
                    archive_index: Some(index),
                    validation_mse: Some(vmse),
                    endpoint_status: Some(end.status),
                };
                (end.x, selection, Some(summary), None, None)
            }
        }
        TrainMethod::Ebp => {
            let x0 = start_point(shape, &cfg);
            let r = train_ebp(&sys, x0.values(), &cfg.ebp)?;
            (r.x, trainer_selection(), None, Some(r.epochs), Some(r.history))
        }
        TrainMethod::Ga => {
            let r = train_ga(&sys, &cfg.ga)?;
            let gens = r.history.len() - 1;
            (r.x_best, trainer_selection(), None, Some(gens), Some(r.history))
        }
    };
    let wall_seconds = started.elapsed().as_secs_f64();

    let xp = ParamVector::new(shape, x)?;
    let train_pred = predict(&xp, train)?;
    let test_pred = predict(&xp, test)?;
    let train_mse = check_finite("training MSE", mse(&train_pred, train.targets())?)?;
    let test_mse = check_finite("test MSE", mse(&test_pred, test.targets())?)?;
    let generalization_pct =
        check_finite("generalization error", generalization_error_pct(&test_pred, test.targets())?)?;
    let train_objective = check_finite("training objective", 0.5 * train_mse * (train.len() * train.output_dim()) as f64)?;

    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        method: cfg.method,
        seed: cfg.seed,
        shape: ShapeEcho { n: shape.n, m: shape.m, t: shape.t },
        config: cfg.clone(),
        datasets: DatasetEcho {
            train: train.meta().clone(),
            test: test.meta().clone(),
            validation: data.validation.as_ref().map(|d| d.meta().clone()),
        },
        train_objective,
        train_mse,
        test_mse,
        generalization_pct,
        wall_seconds,
        selection,
        archive,
        iterations,
        artifacts: Vec::new(),
    };
    Ok(RunOutput { report, x: xp, history })
}

fn trainer_selection() -> Selection {
    Selection {
        source: SelectionSource::Trainer,
        archive_index: None,
        validation_mse: None,
        endpoint_status: None,
    }
}

/// Re-runs a report's configuration on the same data.
pub fn replay(report: &RunReport, data: &TrainData) -> Result<RunOutput> {
    run_train(&report.config, data)
}

/// Tidy CSV of targets and predictions on `dataset`, one row per sample and
/// output: `k,output,target,prediction,abs_error`.
pub fn predictions_csv(x: &ParamVector, dataset: &Dataset) -> Result<Vec<u8>> {
    let preds = predict(x, dataset)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["k", "output", "target", "prediction", "abs_error"])?;
    for (k, (p, y)) in preds.iter().zip(dataset.targets()).enumerate() {
        for j in 0..y.len() {
            w.write_record([
                (k + 1).to_string(),
                j.to_string(),
                y[j].to_string(),
                p[j].to_string(),
                (p[j] - y[j]).abs().to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| QgsError::Io(e.into_error()))
}

/// Published test MSEs of the three trainers, for context in comparison
/// tables.
pub fn reference_mse(system: &str, method: TrainMethod) -> Option<f64> {
    let v = match (system, method) {
        ("example1", TrainMethod::Qgs) => 0.00797,
        ("example1", TrainMethod::Ga) => 0.0082,
        ("example1", TrainMethod::Ebp) => 0.0187,
        ("example2", TrainMethod::Qgs) => 0.0026,
        ("example2", TrainMethod::Ga) => 0.0038,
        ("example2", TrainMethod::Ebp) => 0.0087,
        _ => return None,
    };
    Some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub system: String,
    pub method: TrainMethod,
    pub runs: usize,
    pub test_mse_median: f64,
    pub test_mse_mean: f64,
    pub test_mse_min: f64,
    pub test_mse_max: f64,
    pub train_mse_median: f64,
    pub generalization_pct_median: f64,
    pub reference_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub schema_version: u32,
    pub rows: Vec<CompareRow>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One row per (system, method), sorted by system then method.
pub fn compare_reports(reports: &[RunReport]) -> Result<CompareTable> {
    if reports.is_empty() {
        return Err(QgsError::Domain("no run reports to compare".into()));
    }
    let mut groups: BTreeMap<(String, TrainMethod), Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.datasets.train.system.clone(), r.method)).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|((system, method), rs)| {
            let mut test: Vec<f64> = rs.iter().map(|r| r.test_mse).collect();
            let mut train: Vec<f64> = rs.iter().map(|r| r.train_mse).collect();
            let mut gen: Vec<f64> = rs.iter().map(|r| r.generalization_pct).collect();
            let mean = test.iter().sum::<f64>() / test.len() as f64;
            let reference_mse = reference_mse(&system, method);
            CompareRow {
                runs: rs.len(),
                test_mse_median: median(&mut test),
                test_mse_mean: mean,
                test_mse_min: test[0],
                test_mse_max: test[test.len() - 1],
                train_mse_median: median(&mut train),
                generalization_pct_median: median(&mut gen),
                reference_mse,
                system,
                method,
            }
        })
        .collect();
    Ok(CompareTable { schema_version: SCHEMA_VERSION, rows })
}

impl CompareTable {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "system",
            "method",
            "runs",
            "test_mse_median",
            "test_mse_mean",
            "test_mse_min",
            "test_mse_max",
            "train_mse_median",
            "generalization_pct_median",
            "reference_mse",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.system.clone(),
                r.method.as_str().to_string(),
                r.runs.to_string(),
                r.test_mse_median.to_string(),
                r.test_mse_mean.to_string(),
                r.test_mse_min.to_string(),
                r.test_mse_max.to_string(),
                r.train_mse_median.to_string(),
                r.generalization_pct_median.to_string(),
                r.reference_mse.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.into_inner().map_err(|e| QgsError::Io(e.into_error()))
    }
}

/// Reads every `*.json` file in `dir` that parses as a run report. Other
/// JSON files, such as dataset sidecars, are skipped.
pub fn load_reports(dir: &Path) -> Result<Vec<RunReport>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::new();
    for p in paths {
        match RunReport::read(&p) {
            Ok(r) => reports.push(r),
            Err(e) => log::debug!("skipping {}: {e}", p.display()),
        }
    }
    if reports.is_empty() {
        return Err(QgsError::Domain(format!("no run reports found in {}", dir.display())));
    }
    Ok(reports)
}
