//! CSV ingestion and export of experiment datasets.
//!
//! Layout: a header row, a `unit_id` column, an `arm` column holding
//! `control` or `treatment`, an optional `date` column, and any number of
//! response and feature columns. Which columns are responses and which are
//! features is declared by the caller; undeclared columns are ignored.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{Arm, DatasetColumns, ExperimentDataset, FeatureColumn};

/// Columns to load from a CSV file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CsvSchema {
    pub responses: Vec<String>,
    pub features: Vec<String>,
}

impl CsvSchema {
    pub fn new<S: AsRef<str>>(responses: &[S], features: &[S]) -> Self {
        CsvSchema {
            responses: responses.iter().map(|s| s.as_ref().to_owned()).collect(),
            features: features.iter().map(|s| s.as_ref().to_owned()).collect(),
        }
    }
}

pub fn read_csv_path(path: &Path, schema: &CsvSchema) -> Result<ExperimentDataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(input: R, schema: &CsvSchema) -> Result<ExperimentDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let id_col = find("unit_id")?;
    let arm_col = find("arm")?;
    let date_col = header.iter().position(|h| h.trim() == "date");
    let response_cols = schema
        .responses
        .iter()
        .map(|r| find(r))
        .collect::<Result<Vec<_>>>()?;
    let feature_cols = schema
        .features
        .iter()
        .map(|f| find(f))
        .collect::<Result<Vec<_>>>()?;

    let mut cols = DatasetColumns::default();
    let mut responses: Vec<Vec<f64>> = vec![Vec::new(); response_cols.len()];
    let mut features: Vec<Vec<String>> = vec![Vec::new(); feature_cols.len()];
    let mut dates = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // Data rows are numbered from 2; row 1 is the header.
        let row = i + 2;
        let field = |c: usize| -> Result<&str> {
            match record.get(c).map(str::trim) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(Error::Schema(format!(
                    "row {row}: missing value in column `{}`",
                    &header[c]
                ))),
            }
        };
        cols.unit_ids.push(field(id_col)?.to_owned());
        let arm = field(arm_col)?;
        cols.arms.push(Arm::parse(arm).ok_or_else(|| {
            Error::Schema(format!(
                "row {row}: column `arm` has `{arm}`, expected `control` or `treatment`"
            ))
        })?);
        for (k, &c) in response_cols.iter().enumerate() {
            let raw = field(c)?;
            let v: f64 = raw.parse().map_err(|_| {
                Error::Schema(format!("row {row}: column `{}` has non-numeric `{raw}`", &header[c]))
            })?;
            if !v.is_finite() {
                return Err(Error::Schema(format!(
                    "row {row}: column `{}` is not finite",
                    &header[c]
                )));
            }
            responses[k].push(v);
        }
        for (k, &c) in feature_cols.iter().enumerate() {
            features[k].push(field(c)?.to_owned());
        }
        if let Some(c) = date_col {
            dates.push(record.get(c).map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned));
        }
    }
    cols.responses = schema.responses.iter().cloned().zip(responses).collect();
    cols.features = schema
        .features
        .iter()
        .zip(&features)
        .map(|(name, values)| FeatureColumn::from_values(name.clone(), values))
        .collect();
    if date_col.is_some() {
        cols.dates = Some(dates);
    }
    ExperimentDataset::from_columns(cols)
}

/// Writes every column of `data`. Floats use the shortest representation
/// that parses back to the same value.
pub fn write_csv<W: Write>(data: &ExperimentDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["unit_id".to_owned(), "arm".to_owned()];
    if data.dates().is_some() {
        header.push("date".into());
    }
    header.extend(data.response_names().iter().cloned());
    header.extend(data.features().iter().map(|f| f.name.clone()));
    w.write_record(&header)?;
    let responses = data
        .response_names()
        .iter()
        .map(|r| data.response(r))
        .collect::<Result<Vec<_>>>()?;
    for row in 0..data.len() {
        let mut rec: Vec<String> = vec![data.unit_ids()[row].clone(), data.arms()[row].label().to_owned()];
        if let Some(d) = data.dates() {
            rec.push(d[row].clone().unwrap_or_default());
        }
        rec.extend(responses.iter().map(|col| col[row].to_string()));
        rec.extend(
            data.features()
                .iter()
                .map(|f| f.levels[f.codes[row] as usize].clone()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
