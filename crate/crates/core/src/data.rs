//! Datasets, CSV ingestion and residualization on exogenous covariates.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{R2iveError, Result};
use crate::linalg::ColumnSpace;

/// Raw observations: outcome, treatment, candidate instruments and optional
/// exogenous covariates. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    d: DVector<f64>,
    z: DMatrix<f64>,
    x: Option<DMatrix<f64>>,
    outcome_name: String,
    treatment_name: String,
    instrument_names: Vec<String>,
    exogenous_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with default column names (`y`, `d`, `z1..zL`, `x1..xp`).
    pub fn new(
        y: DVector<f64>,
        d: DVector<f64>,
        z: DMatrix<f64>,
        x: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let instrument_names = (1..=z.ncols()).map(|j| format!("z{j}")).collect();
        let exogenous_names = x
            .as_ref()
            .map(|x| (1..=x.ncols()).map(|j| format!("x{j}")).collect())
            .unwrap_or_default();
        Self::with_names(
            y,
            d,
            z,
            x,
            "y".into(),
            "d".into(),
            instrument_names,
            exogenous_names,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_names(
        y: DVector<f64>,
        d: DVector<f64>,
        z: DMatrix<f64>,
        x: Option<DMatrix<f64>>,
        outcome_name: String,
        treatment_name: String,
        instrument_names: Vec<String>,
        exogenous_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(R2iveError::Input(format!("need at least 2 observations, got {n}")));
        }
        if z.ncols() == 0 {
            return Err(R2iveError::Input("need at least one instrument".into()));
        }
        if d.len() != n || z.nrows() != n {
            return Err(R2iveError::Dimension(format!(
                "row counts differ: y has {n}, d has {}, Z has {}",
                d.len(),
                z.nrows()
            )));
        }
        if instrument_names.len() != z.ncols() {
            return Err(R2iveError::Dimension(format!(
                "{} instrument names for {} instrument columns",
                instrument_names.len(),
                z.ncols()
            )));
        }
        if let Some(x) = &x {
            if x.nrows() != n {
                return Err(R2iveError::Dimension(format!(
                    "exogenous matrix has {} rows, expected {n}",
                    x.nrows()
                )));
            }
            if exogenous_names.len() != x.ncols() {
                return Err(R2iveError::Dimension(format!(
                    "{} exogenous names for {} exogenous columns",
                    exogenous_names.len(),
                    x.ncols()
                )));
            }
        }
        let finite = y.iter().all(|v| v.is_finite())
            && d.iter().all(|v| v.is_finite())
            && z.iter().all(|v| v.is_finite())
            && x.as_ref().is_none_or(|x| x.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(R2iveError::Input("non-finite value in dataset".into()));
        }
        // A covariate block with zero columns is the same as no covariates.
        let x = x.filter(|x| x.ncols() > 0);
        Ok(Self {
            y,
            d,
            z,
            x,
            outcome_name,
            treatment_name,
            instrument_names,
            exogenous_names,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn num_instruments(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn x(&self) -> Option<&DMatrix<f64>> {
        self.x.as_ref()
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }

    pub fn instrument_names(&self) -> &[String] {
        &self.instrument_names
    }

    pub fn exogenous_names(&self) -> &[String] {
        &self.exogenous_names
    }
}

/// Which transform produced a [`CenteredDataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residualization {
    /// Column-wise mean centering.
    InterceptOnly,
    /// Residuals from regressing on an intercept plus `covariates` columns.
    Exogenous { covariates: usize },
}

/// Outcome, treatment and instruments after removing the intercept and any
/// exogenous covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredDataset {
    pub y: DVector<f64>,
    pub d: DVector<f64>,
    pub z: DMatrix<f64>,
    pub instrument_names: Vec<String>,
    pub residualization: Residualization,
}

impl CenteredDataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn num_instruments(&self) -> usize {
        self.z.ncols()
    }
}

/// Replaces Y, D and every column of Z by their residuals after regressing on
/// an intercept plus the exogenous covariates (if any).
pub fn residualize(ds: &Dataset) -> Result<CenteredDataset> {
    let n = ds.n();
    let Some(x) = ds.x() else {
        let center = |v: &DVector<f64>| {
            let m = v.mean();
            v.map(|e| e - m)
        };
        let mut z = ds.z().clone();
        for mut col in z.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        return Ok(CenteredDataset {
            y: center(ds.y()),
            d: center(ds.d()),
            z,
            instrument_names: ds.instrument_names().to_vec(),
            residualization: Residualization::InterceptOnly,
        });
    };

    let p = x.ncols();
    if p + 1 >= n {
        return Err(R2iveError::Dimension(format!(
            "{p} exogenous covariates plus intercept need more than {n} observations"
        )));
    }
    let mut aug = DMatrix::from_element(n, p + 1, 1.0);
    aug.columns_mut(1, p).copy_from(x);
    let space = ColumnSpace::new(&aug);
    if !space.is_full_rank() {
        let names: Vec<String> = space
            .dependent_columns()
            .iter()
            .map(|&j| {
                if j == 0 {
                    "intercept".to_string()
                } else {
                    ds.exogenous_names()[j - 1].clone()
                }
            })
            .collect();
        return Err(R2iveError::SingularDesign(format!(
            "exogenous covariates (with intercept) are rank deficient; dependent: {}",
            names.join(", ")
        )));
    }
    Ok(CenteredDataset {
        y: space.annihilate(ds.y().as_slice()),
        d: space.annihilate(ds.d().as_slice()),
        z: space.annihilate_columns(ds.z()),
        instrument_names: ds.instrument_names().to_vec(),
        residualization: Residualization::Exogenous { covariates: p },
    })
}

/// Column roles for CSV ingestion. Instrument and exogenous entries may be
/// exact header names or wildcard patterns such as `z*`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub outcome: String,
    pub treatment: String,
    pub instruments: Vec<String>,
    #[serde(default)]
    pub exogenous: Vec<String>,
}

fn is_pattern(s: &str) -> bool {
    s.contains(['*', '?', '['])
}

fn resolve_columns(
    headers: &[String],
    entries: &[String],
    taken: &[usize],
    path: &Path,
) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = Vec::new();
    for entry in entries {
        if is_pattern(entry) {
            let pattern = glob::Pattern::new(entry).map_err(|e| {
                R2iveError::Input(format!("invalid column pattern `{entry}`: {e}"))
            })?;
            let before = out.len();
            for (idx, h) in headers.iter().enumerate() {
                if pattern.matches(h) && !taken.contains(&idx) && !out.contains(&idx) {
                    out.push(idx);
                }
            }
            if out.len() == before {
                return Err(R2iveError::MissingColumn {
                    column: entry.clone(),
                    path: path.to_path_buf(),
                });
            }
        } else {
            let idx = headers.iter().position(|h| h == entry).ok_or_else(|| {
                R2iveError::MissingColumn {
                    column: entry.clone(),
                    path: path.to_path_buf(),
                }
            })?;
            if !out.contains(&idx) {
                out.push(idx);
            }
        }
    }
    Ok(out)
}

/// Reads a headed, comma-separated numeric file into a [`Dataset`], keeping
/// rows in file order.
pub fn load_csv(path: &Path, schema: &ColumnSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(|source| R2iveError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(R2iveError::Input(format!("{} is empty", path.display())));
    }
    if schema.instruments.is_empty() {
        return Err(R2iveError::Input("schema names no instrument columns".into()));
    }

    let outcome = resolve_columns(&headers, std::slice::from_ref(&schema.outcome), &[], path)?[0];
    let treatment =
        resolve_columns(&headers, std::slice::from_ref(&schema.treatment), &[], path)?[0];
    let exogenous = resolve_columns(&headers, &schema.exogenous, &[outcome, treatment], path)?;
    let mut taken = vec![outcome, treatment];
    taken.extend(&exogenous);
    let instruments = resolve_columns(&headers, &schema.instruments, &taken, path)?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = r + 1;
        let mut parsed = Vec::with_capacity(headers.len());
        for (c, header) in headers.iter().enumerate() {
            let cell = record.get(c).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| R2iveError::Parse {
                row: row_no,
                column: header.clone(),
                value: cell.to_string(),
            })?;
            parsed.push(v);
        }
        rows.push(parsed);
    }
    if rows.is_empty() {
        return Err(R2iveError::Input(format!("{} has no data rows", path.display())));
    }

    let n = rows.len();
    let column = |idx: usize| DVector::from_iterator(n, rows.iter().map(|row| row[idx]));
    let matrix = |cols: &[usize]| DMatrix::from_fn(n, cols.len(), |i, j| rows[i][cols[j]]);
    let x = (!exogenous.is_empty()).then(|| matrix(&exogenous));
    Dataset::with_names(
        column(outcome),
        column(treatment),
        matrix(&instruments),
        x,
        headers[outcome].clone(),
        headers[treatment].clone(),
        instruments.iter().map(|&i| headers[i].clone()).collect(),
        exogenous.iter().map(|&i| headers[i].clone()).collect(),
    )
}

/// Writes a dataset as CSV with shortest round-trip decimal formatting, so
/// [`load_csv`] recovers every value bit for bit.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let io_err = |source| R2iveError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    let mut header = vec![ds.outcome_name().to_string(), ds.treatment_name().to_string()];
    header.extend(ds.instrument_names().iter().cloned());
    header.extend(ds.exogenous_names().iter().cloned());
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for i in 0..ds.n() {
        let mut line = format!("{:?},{:?}", ds.y()[i], ds.d()[i]);
        for j in 0..ds.num_instruments() {
            line.push_str(&format!(",{:?}", ds.z()[(i, j)]));
        }
        if let Some(x) = ds.x() {
            for j in 0..x.ncols() {
                line.push_str(&format!(",{:?}", x[(i, j)]));
            }
        }
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Schema matching the layout produced by [`write_csv`] for a dataset.
pub fn schema_for(ds: &Dataset) -> ColumnSchema {
    ColumnSchema {
        outcome: ds.outcome_name().to_string(),
        treatment: ds.treatment_name().to_string(),
        instruments: ds.instrument_names().to_vec(),
        exogenous: ds.exogenous_names().to_vec(),
    }
}
