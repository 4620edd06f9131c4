//! Dataset CSV and model JSON files.
//!
//! CSV: the first line declares each column's category count as `d=<count>`, every further
//! line holds one observation as 0-based category indices.
//!
//! Model JSON: `{k, p, alpha0?, alpha?, variables: [{index, d, theta}], weights?}` where
//! `theta` is a `d × k` array of rows. Floats are written in shortest round-trip form, so
//! loading returns bit-identical values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{Dataset, ModelParams};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(line, e.to_string())
}

pub fn read_dataset_csv(reader: impl Read) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = records.next().ok_or_else(|| parse_err(1, "empty file"))?.map_err(csv_err)?;
    let categories = header
        .iter()
        .map(|field| {
            field
                .strip_prefix("d=")
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|&d| d >= 1)
                .ok_or_else(|| parse_err(1, format!("header field {field:?} is not d=<positive integer>")))
        })
        .collect::<Result<Vec<_>>>()?;
    let p = categories.len();

    let mut values = Vec::new();
    for record in records {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |pos| pos.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != p {
            return Err(parse_err(line, format!("expected {p} columns, found {}", record.len())));
        }
        for (j, field) in record.iter().enumerate() {
            let v: u32 = field
                .parse()
                .map_err(|_| parse_err(line, format!("column {j}: {field:?} is not a category index")))?;
            if categories[j] > 1 && v as usize >= categories[j] {
                return Err(parse_err(
                    line,
                    format!("column {j}: category {v} out of range for d = {}", categories[j]),
                ));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(parse_err(2, "no observations"));
    }
    Dataset::new(categories, values)
}

pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    read_dataset_csv(BufReader::new(file))
}

pub fn write_dataset_csv(data: &Dataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    w.write_record(data.categories().iter().map(|d| format!("d={d}"))).map_err(wrap)?;
    for i in 0..data.n() {
        w.write_record(data.row(i).iter().map(u32::to_string)).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::Validation(format!("csv write failed: {e}")))
}

pub fn save_dataset_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut buf = BufWriter::new(file);
    write_dataset_csv(data, &mut buf)?;
    buf.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VariableFile {
    index: usize,
    d: usize,
    theta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    k: usize,
    p: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    alpha0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    alpha: Option<Vec<f64>>,
    variables: Vec<VariableFile>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weights: Option<Vec<Vec<f64>>>,
}

/// A model file's contents: parameters plus the optional per-partition CP weights of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDocument {
    pub params: ModelParams,
    pub weights: Option<Vec<DVector<f64>>>,
}

pub fn model_to_json(params: &ModelParams, weights: Option<&[DVector<f64>]>) -> String {
    let file = ModelFile {
        k: params.k(),
        p: params.p(),
        alpha0: params.alpha0(),
        alpha: params.alpha().map(|a| a.iter().copied().collect()),
        variables: params
            .thetas()
            .iter()
            .enumerate()
            .map(|(index, theta)| VariableFile {
                index,
                d: theta.nrows(),
                theta: theta.row_iter().map(|r| r.iter().copied().collect()).collect(),
            })
            .collect(),
        weights: weights.map(|w| w.iter().map(|v| v.iter().copied().collect()).collect()),
    };
    serde_json::to_string_pretty(&file).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<ModelDocument> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| parse_err(e.line() as u64, e.to_string()))?;
    if file.variables.len() != file.p {
        return Err(Error::Validation(format!(
            "p = {} but {} variables listed",
            file.p,
            file.variables.len()
        )));
    }
    let mut thetas = Vec::with_capacity(file.p);
    for (j, var) in file.variables.iter().enumerate() {
        if var.index != j {
            return Err(Error::Validation(format!("variable at position {j} has index {}", var.index)));
        }
        if var.theta.len() != var.d {
            return Err(Error::Validation(format!(
                "variable {j}: d = {} but theta has {} rows",
                var.d,
                var.theta.len()
            )));
        }
        if let Some(row) = var.theta.iter().position(|r| r.len() != file.k) {
            return Err(Error::Validation(format!(
                "variable {j}: theta row {row} has {} entries, k = {}",
                var.theta[row].len(),
                file.k
            )));
        }
        thetas.push(DMatrix::from_fn(var.d, file.k, |i, h| var.theta[i][h]));
    }
    let params = match file.alpha {
        Some(alpha) => {
            let params = ModelParams::new(thetas, DVector::from_vec(alpha))?;
            if let (Some(stored), Some(sum)) = (file.alpha0, params.alpha0()) {
                if (stored - sum).abs() > 1e-12 * sum.max(1.0) {
                    return Err(Error::Validation(format!("alpha0 = {stored} but alpha sums to {sum}")));
                }
            }
            params
        }
        None => ModelParams::from_thetas(thetas, file.alpha0)?,
    };
    if params.k() != file.k {
        return Err(Error::Validation(format!("k = {} but thetas have {} columns", file.k, params.k())));
    }
    let weights = file.weights.map(|ws| ws.into_iter().map(DVector::from_vec).collect());
    Ok(ModelDocument { params, weights })
}

pub fn save_model_json(
    params: &ModelParams,
    weights: Option<&[DVector<f64>]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_json(params, weights) + "\n").map_err(io_err(path))
}

pub fn load_model_json(path: impl AsRef<Path>) -> Result<ModelDocument> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    model_from_json(&text)
}
