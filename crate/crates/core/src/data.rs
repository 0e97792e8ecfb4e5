//! Clustered trial data: loading, validation and cluster partitioning.
//!
//! Rows are stored grouped by cluster (clusters in order of first
//! appearance, rows in file order within a cluster). Treatment is assigned
//! at the cluster level, so every row of a cluster carries the same
//! treatment indicator.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DataError {
    #[error("csv error: {0}")]
    Csv(String),
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("row {row}: column '{column}': {message}")]
    BadValue {
        row: usize,
        column: String,
        message: String,
    },
    #[error("mixed treatment in cluster {0}")]
    MixedTreatment(String),
    #[error("dataset has no rows")]
    Empty,
    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),
    #[error("covariate vector has length {got}, expected {expected}")]
    CovariateLength { got: usize, expected: usize },
}

/// Column-name mapping from an input file onto the trial variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub cluster: String,
    pub treat: String,
    pub receipt: String,
    pub outcome: String,
    /// Covariates for the outcome (WLS) model.
    #[serde(default)]
    pub wls: Vec<String>,
    /// Covariates for the treatment-arm receipt model.
    #[serde(default)]
    pub logit_t: Vec<String>,
    /// Covariates for the control-arm receipt model.
    #[serde(default)]
    pub logit_c: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl Schema {
    pub fn new(cluster: &str, treat: &str, receipt: &str, outcome: &str) -> Self {
        Self {
            cluster: cluster.into(),
            treat: treat.into(),
            receipt: receipt.into(),
            outcome: outcome.into(),
            wls: Vec::new(),
            logit_t: Vec::new(),
            logit_c: Vec::new(),
            delimiter: ',',
        }
    }

    pub fn with_covariates(mut self, wls: &[&str], logit_t: &[&str], logit_c: &[&str]) -> Self {
        self.wls = wls.iter().map(|s| s.to_string()).collect();
        self.logit_t = logit_t.iter().map(|s| s.to_string()).collect();
        self.logit_c = logit_c.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Union of the three covariate lists in first-seen order.
    pub fn covariate_union(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self.wls.iter().chain(&self.logit_t).chain(&self.logit_c) {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
        out
    }
}

/// One individual in the ITT sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub cluster_id: String,
    pub treat: bool,
    pub receipt: bool,
    pub outcome: f64,
    /// Values aligned with [`Dataset::covariate_names`].
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpan {
    pub id: String,
    pub treat: bool,
    pub rows: Range<usize>,
}

impl ClusterSpan {
    pub fn size(&self) -> usize {
        self.rows.len()
    }
}

/// Immutable clustered trial dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    rows: Vec<Observation>,
    clusters: Vec<ClusterSpan>,
    covariate_names: Vec<String>,
    pub covariate_names_wls: Vec<String>,
    pub covariate_names_logit_t: Vec<String>,
    pub covariate_names_logit_c: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from observations, grouping rows by cluster.
    ///
    /// Clusters keep their order of first appearance and rows keep their
    /// relative order inside a cluster.
    pub fn from_observations(
        observations: Vec<Observation>,
        covariate_names: Vec<String>,
        wls: Vec<String>,
        logit_t: Vec<String>,
        logit_c: Vec<String>,
    ) -> Result<Self, DataError> {
        if observations.is_empty() {
            return Err(DataError::Empty);
        }
        for name in wls.iter().chain(&logit_t).chain(&logit_c) {
            if !covariate_names.contains(name) {
                return Err(DataError::UnknownCovariate(name.clone()));
            }
        }
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<Observation>> = HashMap::new();
        for (i, obs) in observations.into_iter().enumerate() {
            if obs.covariates.len() != covariate_names.len() {
                return Err(DataError::CovariateLength {
                    got: obs.covariates.len(),
                    expected: covariate_names.len(),
                });
            }
            if !obs.outcome.is_finite() {
                return Err(DataError::BadValue {
                    row: i + 1,
                    column: "outcome".into(),
                    message: "non-finite outcome".into(),
                });
            }
            if let Some(k) = obs.covariates.iter().position(|v| !v.is_finite()) {
                return Err(DataError::BadValue {
                    row: i + 1,
                    column: covariate_names[k].clone(),
                    message: "non-finite covariate".into(),
                });
            }
            match groups.get_mut(&obs.cluster_id) {
                Some(g) => {
                    if g[0].treat != obs.treat {
                        return Err(DataError::MixedTreatment(obs.cluster_id));
                    }
                    g.push(obs);
                }
                None => {
                    order.push(obs.cluster_id.clone());
                    groups.insert(obs.cluster_id.clone(), vec![obs]);
                }
            }
        }
        let mut rows = Vec::new();
        let mut clusters = Vec::with_capacity(order.len());
        for id in order {
            let g = groups.remove(&id).expect("cluster recorded in order");
            let start = rows.len();
            let treat = g[0].treat;
            rows.extend(g);
            clusters.push(ClusterSpan {
                id,
                treat,
                rows: start..rows.len(),
            });
        }
        Ok(Self {
            rows,
            clusters,
            covariate_names,
            covariate_names_wls: wls,
            covariate_names_logit_t: logit_t,
            covariate_names_logit_c: logit_c,
        })
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn clusters(&self) -> &[ClusterSpan] {
        &self.clusters
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_clusters_arm(&self, treat: bool) -> usize {
        self.clusters.iter().filter(|c| c.treat == treat).count()
    }

    pub fn n_rows_arm(&self, treat: bool) -> usize {
        self.rows.iter().filter(|r| r.treat == treat).count()
    }

    /// Mean receipt in one arm (NaN for an empty arm).
    pub fn receipt_rate(&self, treat: bool) -> f64 {
        let (s, n) = self
            .rows
            .iter()
            .filter(|r| r.treat == treat)
            .fold((0.0, 0usize), |(s, n), r| {
                (s + f64::from(u8::from(r.receipt)), n + 1)
            });
        s / n as f64
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize, DataError> {
        self.covariate_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DataError::UnknownCovariate(name.to_string()))
    }

    pub fn covariate_indices(&self, names: &[String]) -> Result<Vec<usize>, DataError> {
        names.iter().map(|n| self.covariate_index(n)).collect()
    }

    /// Copy of the dataset with different model covariate lists.
    pub fn with_model_covariates(
        &self,
        wls: Vec<String>,
        logit_t: Vec<String>,
        logit_c: Vec<String>,
    ) -> Result<Self, DataError> {
        for name in wls.iter().chain(&logit_t).chain(&logit_c) {
            self.covariate_index(name)?;
        }
        let mut out = self.clone();
        out.covariate_names_wls = wls;
        out.covariate_names_logit_t = logit_t;
        out.covariate_names_logit_c = logit_c;
        Ok(out)
    }

    /// Copy with the outcome mapped through `f`.
    pub fn map_outcome(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.rows {
            r.outcome = f(r.outcome);
        }
        out
    }

    /// Copy with every row's receipt replaced.
    pub fn map_receipt(&self, f: impl Fn(&Observation) -> bool) -> Self {
        let mut out = self.clone();
        for r in &mut out.rows {
            r.receipt = f(r);
        }
        out
    }
}

/// Per-arm summary of a dataset. Never fails; problems become warnings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_clusters_t: usize,
    pub n_clusters_c: usize,
    pub receipt_rate_t: f64,
    pub receipt_rate_c: f64,
    pub warnings: Vec<String>,
}

pub fn validate(d: &Dataset) -> ValidationReport {
    let n_clusters_t = d.n_clusters_arm(true);
    let n_clusters_c = d.n_clusters_arm(false);
    let mut warnings = Vec::new();
    let rate = |t: bool| {
        if d.n_rows_arm(t) == 0 {
            0.0
        } else {
            d.receipt_rate(t)
        }
    };
    let receipt_rate_t = rate(true);
    let receipt_rate_c = rate(false);
    for (label, n) in [("treatment", n_clusters_t), ("control", n_clusters_c)] {
        if n < 2 {
            warnings.push(format!("fewer than 2 clusters in {label} group ({n})"));
        }
    }
    for (label, t, r) in [
        ("treatment", true, receipt_rate_t),
        ("control", false, receipt_rate_c),
    ] {
        if d.n_rows_arm(t) > 0 && (r == 0.0 || r == 1.0) {
            warnings.push(format!("degenerate receipt in {label} group"));
        }
    }
    ValidationReport {
        n_clusters_t,
        n_clusters_c,
        receipt_rate_t,
        receipt_rate_c,
        warnings,
    }
}

fn parse_binary(raw: &str, row: usize, column: &str) -> Result<bool, DataError> {
    match raw.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(DataError::BadValue {
            row,
            column: column.to_string(),
            message: format!("expected 0 or 1, found '{other}'"),
        }),
    }
}

fn parse_real(raw: &str, row: usize, column: &str) -> Result<f64, DataError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(DataError::BadValue {
            row,
            column: column.to_string(),
            message: "missing value".into(),
        });
    }
    let v: f64 = trimmed.parse().map_err(|_| DataError::BadValue {
        row,
        column: column.to_string(),
        message: format!("not a number: '{trimmed}'"),
    })?;
    if !v.is_finite() {
        return Err(DataError::BadValue {
            row,
            column: column.to_string(),
            message: "non-finite value".into(),
        });
    }
    Ok(v)
}

/// Reads delimited text with a header row. `row` numbers in errors are
/// 1-based data rows (the header is row 0).
pub fn load_dataset<R: Read>(source: R, schema: &Schema) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .from_reader(source);
    let header = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize, DataError> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let c_cluster = col(&schema.cluster)?;
    let c_treat = col(&schema.treat)?;
    let c_receipt = col(&schema.receipt)?;
    let c_outcome = col(&schema.outcome)?;
    let covariate_names = schema.covariate_union();
    let c_cov: Vec<usize> = covariate_names
        .iter()
        .map(|n| col(n))
        .collect::<Result<_, _>>()?;

    let mut observations = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Csv(format!("row {row}: {e}")))?;
        let field = |c: usize, name: &str| -> Result<&str, DataError> {
            record.get(c).ok_or_else(|| DataError::BadValue {
                row,
                column: name.to_string(),
                message: "missing field".into(),
            })
        };
        let cluster_id = field(c_cluster, &schema.cluster)?.trim().to_string();
        if cluster_id.is_empty() {
            return Err(DataError::BadValue {
                row,
                column: schema.cluster.clone(),
                message: "missing value".into(),
            });
        }
        let treat = parse_binary(field(c_treat, &schema.treat)?, row, &schema.treat)?;
        let receipt = parse_binary(field(c_receipt, &schema.receipt)?, row, &schema.receipt)?;
        let outcome = parse_real(field(c_outcome, &schema.outcome)?, row, &schema.outcome)?;
        let covariates = c_cov
            .iter()
            .zip(&covariate_names)
            .map(|(&c, name)| parse_real(field(c, name)?, row, name))
            .collect::<Result<Vec<_>, _>>()?;
        observations.push(Observation {
            cluster_id,
            treat,
            receipt,
            outcome,
            covariates,
        });
    }
    Dataset::from_observations(
        observations,
        covariate_names,
        schema.wls.clone(),
        schema.logit_t.clone(),
        schema.logit_c.clone(),
    )
}

/// Writes the dataset in the schema's column layout, optionally appending
/// extra named columns (one value per row, in dataset row order).
///
/// Floats use the shortest representation that parses back to the same
/// bits, so a reload is exact.
pub fn write_dataset<W: Write>(
    d: &Dataset,
    schema: &Schema,
    extra: &[(&str, &[f64])],
    sink: W,
) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(schema.delimiter as u8)
        .from_writer(sink);
    let csv_err = |e: csv::Error| DataError::Csv(e.to_string());
    let mut header: Vec<String> = vec![
        schema.cluster.clone(),
        schema.treat.clone(),
        schema.receipt.clone(),
        schema.outcome.clone(),
    ];
    header.extend(d.covariate_names().iter().cloned());
    header.extend(extra.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for (i, r) in d.rows().iter().enumerate() {
        let mut rec = vec![
            r.cluster_id.clone(),
            u8::from(r.treat).to_string(),
            u8::from(r.receipt).to_string(),
            r.outcome.to_string(),
        ];
        rec.extend(r.covariates.iter().map(|v| v.to_string()));
        rec.extend(extra.iter().map(|(_, col)| col[i].to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DataError::Csv(e.to_string()))?;
    Ok(())
}
