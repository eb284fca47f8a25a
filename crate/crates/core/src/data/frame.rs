use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Any gap in the cadence is an ingestion error.
    #[default]
    Reject,
    /// Missing rows are inserted with the previous row's values.
    ForwardFill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    Iso8601,
    EpochSeconds,
}

/// What `load_csv` expects to find.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    /// Name of the price column.
    pub target: String,
    /// Exact feature header (excluding `timestamp`); `None` accepts any.
    pub features: Option<Vec<String>>,
    /// Declared spacing in seconds; inferred as the smallest step if absent.
    pub cadence_seconds: Option<i64>,
    pub fill: FillPolicy,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            target: "price".into(),
            features: None,
            cadence_seconds: None,
            fill: FillPolicy::Reject,
        }
    }
}

/// A timestamped multivariate series with one designated target column.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    timestamps: Vec<i64>,
    cadence: i64,
    values: Vec<f64>,
    feature_names: Vec<String>,
    target_index: usize,
    timestamp_format: TimestampFormat,
}

impl SeriesFrame {
    /// Builds a frame from row-major values, validating every invariant.
    pub fn new(
        timestamps: Vec<i64>,
        cadence: i64,
        values: Vec<f64>,
        feature_names: Vec<String>,
        target_index: usize,
    ) -> Result<Self> {
        let d = feature_names.len();
        if d == 0 || target_index >= d {
            return Err(Error::usage(format!(
                "target index {target_index} out of range for {d} features"
            )));
        }
        if values.len() != timestamps.len() * d {
            return Err(Error::dimension(
                "series frame",
                &[timestamps.len(), d],
                &[values.len()],
            ));
        }
        if cadence <= 0 {
            return Err(Error::usage("cadence must be positive"));
        }
        if let Some(w) = timestamps.windows(2).position(|w| w[1] - w[0] != cadence) {
            return Err(Error::Ingestion {
                row: w + 1,
                message: format!("timestamps not spaced by cadence {cadence}s"),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Ingestion {
                row: i / d,
                message: "non-finite value".into(),
            });
        }
        Ok(SeriesFrame {
            timestamps,
            cadence,
            values,
            feature_names,
            target_index,
            timestamp_format: TimestampFormat::Iso8601,
        })
    }

    /// Hourly frame starting at the Unix epoch; convenient for tests.
    pub fn from_columns(names: &[&str], columns: &[Vec<f64>], target_index: usize) -> Result<Self> {
        let t = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != t) || columns.len() != names.len() {
            return Err(Error::usage("columns must have equal lengths and names"));
        }
        let mut values = Vec::with_capacity(t * columns.len());
        for i in 0..t {
            values.extend(columns.iter().map(|c| c[i]));
        }
        SeriesFrame::new(
            (0..t as i64).map(|i| i * 3600).collect(),
            3600,
            values,
            names.iter().map(|s| s.to_string()).collect(),
            target_index,
        )
    }

    pub fn with_timestamp_format(mut self, f: TimestampFormat) -> Self {
        self.timestamp_format = f;
        self
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn cadence(&self) -> i64 {
        self.cadence
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn timestamp_format(&self) -> TimestampFormat {
        self.timestamp_format
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.values[i * d..(i + 1) * d]
    }

    /// Row-major block of rows `range`.
    pub fn rows(&self, range: Range<usize>) -> &[f64] {
        let d = self.n_features();
        &self.values[range.start * d..range.end * d]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.chunks_exact(self.n_features()).map(|r| r[j]).collect()
    }

    pub fn target(&self) -> Vec<f64> {
        self.column(self.target_index)
    }

    pub fn slice(&self, range: Range<usize>) -> SeriesFrame {
        SeriesFrame {
            timestamps: self.timestamps[range.clone()].to_vec(),
            cadence: self.cadence,
            values: self.rows(range).to_vec(),
            feature_names: self.feature_names.clone(),
            target_index: self.target_index,
            timestamp_format: self.timestamp_format,
        }
    }

    /// Same timestamps and names with replaced values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<SeriesFrame> {
        if values.len() != self.values.len() {
            return Err(Error::dimension("with_values", &[self.values.len()], &[values.len()]));
        }
        Ok(SeriesFrame { values, ..self.clone() })
    }

    /// Concatenates frames that continue each other in time.
    pub fn concat(parts: &[SeriesFrame]) -> Result<SeriesFrame> {
        let non_empty: Vec<&SeriesFrame> = parts.iter().filter(|p| !p.is_empty()).collect();
        let first = non_empty
            .first()
            .ok_or_else(|| Error::usage("nothing to concatenate"))?;
        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        for p in &non_empty {
            timestamps.extend_from_slice(&p.timestamps);
            values.extend_from_slice(&p.values);
        }
        Ok(SeriesFrame::new(
            timestamps,
            first.cadence,
            values,
            first.feature_names.clone(),
            first.target_index,
        )?
        .with_timestamp_format(first.timestamp_format))
    }

    pub fn format_timestamp(&self, ts: i64) -> String {
        format_timestamp(ts, self.timestamp_format)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for i in 0..self.len() {
            let mut rec = vec![self.format_timestamp(self.timestamps[i])];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(format!("{}: {other:?}", path.display())),
    }
}

pub fn format_timestamp(ts: i64, format: TimestampFormat) -> String {
    match format {
        TimestampFormat::EpochSeconds => ts.to_string(),
        TimestampFormat::Iso8601 => DateTime::<Utc>::from_timestamp(ts, 0)
            .map(|d| d.to_rfc3339_opts(SecondsFormat::Secs, true))
            .unwrap_or_else(|| ts.to_string()),
    }
}

fn parse_timestamp(cell: &str, format: TimestampFormat) -> Option<i64> {
    let cell = cell.trim();
    match format {
        TimestampFormat::EpochSeconds => cell.parse().ok(),
        TimestampFormat::Iso8601 => DateTime::parse_from_rfc3339(cell)
            .map(|d| d.timestamp())
            .ok()
            .or_else(|| {
                [
                    "%Y-%m-%dT%H:%M:%S",
                    "%Y-%m-%d %H:%M:%S",
                    "%Y-%m-%dT%H:%M",
                    "%Y-%m-%d %H:%M",
                ]
                .iter()
                .find_map(|f| NaiveDateTime::parse_from_str(cell, f).ok())
                .map(|d| d.and_utc().timestamp())
            }),
    }
}

/// Reads a `timestamp,feature...` CSV and validates the cadence.
///
/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<SeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some("timestamp") {
        return Err(Error::Ingestion {
            row: 1,
            message: "first column must be `timestamp`".into(),
        });
    }
    let names: Vec<String> = header[1..].to_vec();
    if let Some(expected) = &schema.features {
        if expected != &names {
            return Err(Error::Ingestion {
                row: 1,
                message: format!("header {names:?} does not match expected {expected:?}"),
            });
        }
    }
    let target_index = names
        .iter()
        .position(|n| n == &schema.target)
        .ok_or_else(|| Error::Ingestion {
            row: 1,
            message: format!("missing target column `{}`", schema.target),
        })?;
    let d = names.len();

    let mut format = None;
    let mut rows: Vec<(usize, i64, Vec<f64>)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Ingestion {
            row: line,
            message: e.to_string(),
        })?;
        if rec.len() != d + 1 {
            return Err(Error::Ingestion {
                row: line,
                message: format!("expected {} cells, found {}", d + 1, rec.len()),
            });
        }
        let fmt = *format.get_or_insert_with(|| {
            if rec[0].trim().parse::<i64>().is_ok() {
                TimestampFormat::EpochSeconds
            } else {
                TimestampFormat::Iso8601
            }
        });
        let ts = parse_timestamp(&rec[0], fmt).ok_or_else(|| Error::Ingestion {
            row: line,
            message: format!("unparseable timestamp `{}`", &rec[0]),
        })?;
        let mut vals = Vec::with_capacity(d);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Ingestion {
                row: line,
                message: format!("non-numeric value `{cell}` in column `{}`", names[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row: line,
                    message: format!("non-finite value in column `{}`", names[j]),
                });
            }
            vals.push(v);
        }
        rows.push((line, ts, vals));
    }
    if rows.is_empty() {
        return Err(Error::usage(format!("{} contains no data rows", path.display())));
    }
    rows.sort_by_key(|r| r.1);
    if let Some(w) = rows.windows(2).find(|w| w[0].1 == w[1].1) {
        return Err(Error::Ingestion {
            row: w[1].0,
            message: "duplicate timestamp".into(),
        });
    }
    let cadence = match schema.cadence_seconds {
        Some(c) if c > 0 => c,
        Some(_) => return Err(Error::usage("declared cadence must be positive")),
        None => rows.windows(2).map(|w| w[1].1 - w[0].1).min().unwrap_or(3600),
    };

    let mut timestamps = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len() * d);
    for (k, (line, ts, vals)) in rows.iter().enumerate() {
        if k > 0 {
            let prev = *timestamps.last().expect("previous row");
            let step = ts - prev;
            if step != cadence {
                let fillable = step % cadence == 0 && schema.fill == FillPolicy::ForwardFill;
                if !fillable {
                    return Err(Error::Ingestion {
                        row: *line,
                        message: format!("gap of {step}s breaks cadence {cadence}s"),
                    });
                }
                let prev_row = values[values.len() - d..].to_vec();
                let mut t = prev + cadence;
                while t < *ts {
                    timestamps.push(t);
                    values.extend_from_slice(&prev_row);
                    t += cadence;
                }
            }
        }
        timestamps.push(*ts);
        values.extend_from_slice(vals);
    }
    Ok(SeriesFrame::new(timestamps, cadence, values, names, target_index)?
        .with_timestamp_format(format.expect("at least one row")))
}
