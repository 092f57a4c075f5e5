//! Ordered input/target samples and their CSV + JSON sidecar format.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{QgsError, Result};
use crate::fsio::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Provenance carried alongside a dataset; this is the JSON sidecar schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub samples: usize,
    pub split: Split,
    pub n: usize,
    pub t: usize,
}

/// Samples `(u(k), y(k))`, `k = 1..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<DVector<f64>>,
    targets: Vec<DVector<f64>>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(
        inputs: Vec<DVector<f64>>,
        targets: Vec<DVector<f64>>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(QgsError::Shape(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.iter().any(|u| u.len() != meta.n) || targets.iter().any(|y| y.len() != meta.t) {
            return Err(QgsError::Shape(format!(
                "sample dimensions disagree with n = {}, t = {}",
                meta.n, meta.t
            )));
        }
        let finite = inputs
            .iter()
            .chain(targets.iter())
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(QgsError::Numeric("dataset contains non-finite values".into()));
        }
        let mut meta = meta;
        meta.samples = inputs.len();
        Ok(Self { inputs, targets, meta })
    }

    /// Builds a dataset from plain rows, tagging it as a custom training set.
    pub fn from_rows(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        let n = inputs.first().map_or(0, Vec::len);
        let t = targets.first().map_or(0, Vec::len);
        let meta = DatasetMeta {
            system: "custom".into(),
            seed: 0,
            samples: inputs.len(),
            split: Split::Train,
            n,
            t,
        };
        Self::new(
            inputs.into_iter().map(DVector::from_vec).collect(),
            targets.into_iter().map(DVector::from_vec).collect(),
            meta,
        )
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.meta.n
    }

    pub fn output_dim(&self) -> usize {
        self.meta.t
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[DVector<f64>] {
        &self.targets
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Largest Euclidean norm over the input vectors.
    pub fn max_input_norm(&self) -> f64 {
        self.inputs.iter().map(|u| u.norm()).fold(0.0, f64::max)
    }

    /// Largest Euclidean norm over the target vectors.
    pub fn max_target_norm(&self) -> f64 {
        self.targets.iter().map(|y| y.norm()).fold(0.0, f64::max)
    }

    /// Sidecar path for a dataset CSV: same stem, `.json` extension.
    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes the CSV (`u_1..u_n,y_1..y_t`) and the JSON sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> = (1..=self.meta.n)
            .map(|i| format!("u_{i}"))
            .chain((1..=self.meta.t).map(|i| format!("y_{i}")))
            .collect();
        wtr.write_record(&header)?;
        for (u, y) in self.inputs.iter().zip(&self.targets) {
            let row: Vec<String> = u.iter().chain(y.iter()).map(|v| v.to_string()).collect();
            wtr.write_record(&row)?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| QgsError::Io(std::io::Error::other(e.to_string())))?;
        write_atomic(path, &bytes)?;
        let meta = serde_json::to_vec_pretty(&self.meta)?;
        write_atomic(&Self::sidecar_path(path), &meta)
    }

    /// Reads a dataset CSV; the sidecar is used for metadata when present.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let n = headers.iter().filter(|h| h.starts_with("u_")).count();
        let t = headers.iter().filter(|h| h.starts_with("y_")).count();
        if n + t != headers.len() || n == 0 || t == 0 {
            return Err(QgsError::Shape(format!(
                "{}: expected header u_1..u_n,y_1..y_t",
                path.display()
            )));
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let values = record
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| QgsError::Numeric(format!("{}: {e}", path.display())))
                })
                .collect::<Result<Vec<f64>>>()?;
            inputs.push(DVector::from_column_slice(&values[..n]));
            targets.push(DVector::from_column_slice(&values[n..]));
        }
        let sidecar = Self::sidecar_path(path);
        let meta = if sidecar.exists() {
            let mut meta: DatasetMeta = serde_json::from_slice(&std::fs::read(&sidecar)?)?;
            if meta.n != n || meta.t != t {
                return Err(QgsError::Shape(format!(
                    "{}: sidecar says n = {}, t = {} but CSV has n = {n}, t = {t}",
                    sidecar.display(),
                    meta.n,
                    meta.t
                )));
            }
            meta.samples = inputs.len();
            meta
        } else {
            DatasetMeta {
                system: "custom".into(),
                seed: 0,
                samples: inputs.len(),
                split: Split::Train,
                n,
                t,
            }
        };
        Self::new(inputs, targets, meta)
    }
}
