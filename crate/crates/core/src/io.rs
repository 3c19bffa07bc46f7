//! Long-format CSV ingestion and export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ordinal::SubjectRecord;

/// Column names of a long table: one row per subject and occasion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSchema {
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default = "default_occasion")]
    pub occasion: String,
    #[serde(default = "default_response")]
    pub response: String,
    #[serde(default = "default_x")]
    pub x: String,
    #[serde(default)]
    pub z: Vec<String>,
    /// Number of response categories `J`.
    pub categories: usize,
}

fn default_id() -> String {
    "id".into()
}
fn default_occasion() -> String {
    "occasion".into()
}
fn default_response() -> String {
    "response".into()
}
fn default_x() -> String {
    "x".into()
}

impl DataSchema {
    pub fn new(categories: usize, z: &[&str]) -> Self {
        Self {
            id: default_id(),
            occasion: default_occasion(),
            response: default_response(),
            x: default_x(),
            z: z.iter().map(|s| s.to_string()).collect(),
            categories,
        }
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

fn parse_err(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Reads a long table. `NA` or an empty cell marks a missing response or `X`.
/// Each subject's occasions must run `1..=T_i` without gaps; records come out
/// sorted by subject id and occasion.
pub fn read_long_csv<R: std::io::Read>(reader: R, schema: &DataSchema) -> Result<Vec<SubjectRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column '{name}' not found; header has {:?}", headers.iter().collect::<Vec<_>>())))
    };
    let ic = col(&schema.id)?;
    let oc = col(&schema.occasion)?;
    let rc = col(&schema.response)?;
    let xc = col(&schema.x)?;
    let zc = schema.z.iter().map(|z| col(z)).collect::<Result<Vec<_>>>()?;

    type Row = (Option<usize>, Option<f64>, Vec<f64>);
    let mut by_subject: BTreeMap<String, BTreeMap<usize, Row>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // Header is line 1.
        let row = k + 2;
        let id = rec[ic].to_string();
        if id.is_empty() {
            return Err(parse_err(row, &schema.id, "empty subject id"));
        }
        let occ: usize = rec[oc]
            .parse()
            .map_err(|_| parse_err(row, &schema.occasion, format!("'{}' is not an occasion number", &rec[oc])))?;
        if occ < 1 {
            return Err(parse_err(row, &schema.occasion, "occasions are numbered from 1"));
        }
        let response = if is_missing(&rec[rc]) {
            None
        } else {
            let o: usize = rec[rc]
                .parse()
                .map_err(|_| parse_err(row, &schema.response, format!("'{}' is not a category", &rec[rc])))?;
            if o < 1 || o > schema.categories {
                return Err(parse_err(
                    row,
                    &schema.response,
                    format!("category {o} outside 1..={}", schema.categories),
                ));
            }
            Some(o)
        };
        let x = if is_missing(&rec[xc]) {
            None
        } else {
            let v: f64 = rec[xc]
                .parse()
                .map_err(|_| parse_err(row, &schema.x, format!("'{}' is not a number", &rec[xc])))?;
            if !v.is_finite() {
                return Err(parse_err(row, &schema.x, "value is not finite"));
            }
            Some(v)
        };
        let mut z = Vec::with_capacity(zc.len());
        for (name, &c) in schema.z.iter().zip(&zc) {
            let v: f64 = rec[c]
                .parse()
                .map_err(|_| parse_err(row, name, format!("'{}' is not a number (z columns cannot be missing)", &rec[c])))?;
            if !v.is_finite() {
                return Err(parse_err(row, name, "value is not finite"));
            }
            z.push(v);
        }
        let occasions = by_subject.entry(id.clone()).or_default();
        if occasions.insert(occ, (response, x, z)).is_some() {
            return Err(parse_err(row, &schema.occasion, format!("duplicate occasion {occ} for subject '{id}'")));
        }
    }
    if by_subject.is_empty() {
        return Err(Error::EmptyDataset);
    }
    by_subject
        .into_iter()
        .map(|(id, occ)| {
            if let Some((k, _)) = occ.keys().enumerate().find(|(k, o)| **o != k + 1) {
                return Err(Error::InvalidData(format!("subject '{id}' has no row for occasion {}", k + 1)));
            }
            let mut s = SubjectRecord {
                id,
                outcomes: Vec::new(),
                x: Vec::new(),
                z: Vec::new(),
            };
            for (_, (o, x, z)) in occ {
                s.outcomes.push(o);
                s.x.push(x);
                s.z.push(z);
            }
            Ok(s)
        })
        .collect()
}

pub fn read_long_csv_path(path: &Path, schema: &DataSchema) -> Result<Vec<SubjectRecord>> {
    let file = std::fs::File::open(path)?;
    read_long_csv(file, schema)
}

/// Writes records in the layout [`read_long_csv`] reads; missing cells are `NA`.
pub fn write_long_csv<W: std::io::Write>(writer: W, data: &[SubjectRecord], schema: &DataSchema) -> Result<()> {
    let mut wr = csv::Writer::from_writer(writer);
    let mut header = vec![schema.id.clone(), schema.occasion.clone(), schema.response.clone(), schema.x.clone()];
    header.extend(schema.z.iter().cloned());
    wr.write_record(&header)?;
    for s in data {
        for t in 0..s.n_occasions() {
            if s.z[t].len() != schema.z.len() {
                return Err(Error::DimensionMismatch(format!(
                    "subject '{}' has {} z values, schema names {}",
                    s.id,
                    s.z[t].len(),
                    schema.z.len()
                )));
            }
            let mut row = vec![
                s.id.clone(),
                (t + 1).to_string(),
                s.outcomes[t].map_or("NA".into(), |o| o.to_string()),
                s.x[t].map_or("NA".into(), |x| format!("{x:?}")),
            ];
            row.extend(s.z[t].iter().map(|v| format!("{v:?}")));
            wr.write_record(&row)?;
        }
    }
    wr.flush()?;
    Ok(())
}
