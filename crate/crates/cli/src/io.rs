//! File formats: headed numeric CSV, dense row-major matrices in JSON, and
//! the JSON documents written by each command.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use hetcggm::metrics::Metrics;
use hetcggm::model::{FitDiagnostics, FitResult, GroupParams, Hyperparams};
use hetcggm::simgen::SimSpec;
use nalgebra::DMatrix;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const FORMAT_VERSION: &str = "1";

/// Dense matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
            .collect();
        DenseMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            bail!(
                "matrix has {} entries, expected {} x {}",
                self.data.len(),
                self.rows,
                self.cols
            );
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFile {
    pub gamma: DenseMatrix,
    pub theta: DenseMatrix,
}

impl GroupFile {
    pub fn from_params(g: &GroupParams) -> Self {
        GroupFile {
            gamma: DenseMatrix::from_matrix(&g.gamma),
            theta: DenseMatrix::from_matrix(&g.theta),
        }
    }

    pub fn to_params(&self) -> Result<GroupParams> {
        Ok(GroupParams::new(self.gamma.to_matrix()?, self.theta.to_matrix()?)?)
    }
}

fn groups_to_params(groups: &[GroupFile]) -> Result<Vec<GroupParams>> {
    groups.iter().map(GroupFile::to_params).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub format_version: String,
    pub groups: Vec<GroupFile>,
}

impl TruthFile {
    pub fn params(&self) -> Result<Vec<GroupParams>> {
        groups_to_params(&self.groups)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub spec: SimSpec,
    pub seed: u64,
    pub n: usize,
}

/// `result.json`. Non-finite reals are stored as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub format_version: String,
    pub k_hat: usize,
    pub pi: Vec<f64>,
    pub groups: Vec<GroupFile>,
    pub assignment: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub hqc: Option<f64>,
    pub loglik: Option<f64>,
    pub df: usize,
    pub diagnostics: FitDiagnostics,
    pub warnings: Vec<String>,
    pub hyperparams: Hyperparams,
    pub seed: u64,
    pub wall_time_secs: f64,
}

pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl ResultFile {
    pub fn new(fr: &FitResult, hp: &Hyperparams, seed: u64, wall_time_secs: f64) -> Self {
        let mut warnings = Vec::new();
        if !fr.diagnostics.em_converged {
            warnings.push(format!(
                "EM stopped at the iteration cap ({}) before converging",
                fr.diagnostics.em_iterations
            ));
        }
        if fr.diagnostics.admm_capped_steps > 0 {
            warnings.push(format!(
                "{} precision steps hit the ADMM iteration cap",
                fr.diagnostics.admm_capped_steps
            ));
        }
        ResultFile {
            format_version: FORMAT_VERSION.into(),
            k_hat: fr.k_hat,
            pi: fr.merged_pi.clone(),
            groups: fr.merged_groups.iter().map(GroupFile::from_params).collect(),
            assignment: fr.assignment.clone(),
            objective_trace: fr.objective_trace.clone(),
            hqc: finite(fr.hqc),
            loglik: finite(fr.loglik),
            df: fr.df,
            diagnostics: fr.diagnostics.clone(),
            warnings,
            hyperparams: hp.clone(),
            seed,
            wall_time_secs,
        }
    }

    pub fn params(&self) -> Result<Vec<GroupParams>> {
        groups_to_params(&self.groups)
    }
}

/// `metrics.json`; undefined rates are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub format_version: String,
    pub rmse_theta: Option<f64>,
    pub rmse_gamma: Option<f64>,
    pub tpr_theta: Option<f64>,
    pub fpr_theta: Option<f64>,
    pub tpr_gamma: Option<f64>,
    pub fpr_gamma: Option<f64>,
    pub ari: Option<f64>,
    pub rand_index: Option<f64>,
    pub k_hat: usize,
}

impl From<&Metrics> for MetricsFile {
    fn from(m: &Metrics) -> Self {
        MetricsFile {
            format_version: FORMAT_VERSION.into(),
            rmse_theta: finite(m.rmse_theta),
            rmse_gamma: finite(m.rmse_gamma),
            tpr_theta: finite(m.tpr_theta),
            fpr_theta: finite(m.fpr_theta),
            tpr_gamma: finite(m.tpr_gamma),
            fpr_gamma: finite(m.fpr_gamma),
            ari: finite(m.ari),
            rand_index: finite(m.rand_index),
            k_hat: m.k_hat,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))
}

/// Reads a headed all-numeric CSV. Errors name the file and 1-based line.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let header: Vec<String> = rdr
        .headers()
        .with_context(|| format!("{}: cannot read header", path.display()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let cols = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            anyhow!("{}: line {}: {}", path.display(), line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != cols {
            bail!(
                "{}: line {}: expected {} fields, found {}",
                path.display(),
                line,
                cols,
                rec.len()
            );
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                anyhow!(
                    "{}: line {}: column {} is not a number: {:?}",
                    path.display(),
                    line,
                    header[c],
                    field
                )
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Ok((header, DMatrix::from_row_slice(rows, cols, &data)))
}

/// Writes a matrix under the given header. `{}` on f64 prints the shortest
/// string that parses back to the same value.
pub fn write_matrix_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(header)?;
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| m[(i, j)].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn numbered_header(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|j| format!("{prefix}{j}")).collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["label"])?;
    for l in labels {
        w.write_record([l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| anyhow!("{}: {}", path.display(), e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = rec.get(0).unwrap_or("");
        out.push(field.trim().parse().map_err(|_| {
            anyhow!("{}: line {}: bad label {:?}", path.display(), line, field)
        })?);
    }
    Ok(out)
}

/// `j,m,value` rows for the upper triangle (diagonal excluded) of a precision
/// matrix; indices are 1-based to match the `y1..yp` column names.
pub fn write_edges(path: &Path, theta: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["j", "m", "value"])?;
    for j in 0..theta.nrows() {
        for m in j + 1..theta.ncols() {
            if theta[(j, m)] != 0.0 {
                w.write_record([
                    (j + 1).to_string(),
                    (m + 1).to_string(),
                    theta[(j, m)].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `result.json` and one `edges_<k>.csv` per merged group (k from 1).
pub fn write_fit_outputs(dir: &Path, result: &ResultFile) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_json(&dir.join("result.json"), result)?;
    for (k, g) in result.groups.iter().enumerate() {
        write_edges(&dir.join(format!("edges_{}.csv", k + 1)), &g.theta.to_matrix()?)?;
    }
    Ok(())
}
