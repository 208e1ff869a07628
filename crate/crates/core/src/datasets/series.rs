use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 3] = ["user_id", "trial_id", "activity"];

/// One recording session of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub user_id: String,
    pub trial_id: String,
    pub rate_hz: f64,
    pub channels: Vec<String>,
    /// `[T x M]`.
    pub samples: Array2<f64>,
    /// Per-sample index into the activity label set.
    pub activity: Vec<usize>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }
}

/// Expected layout of an ingested CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub channels: Vec<String>,
    pub labels: Vec<String>,
    pub rate_hz: f64,
}

/// Reads `user_id,trial_id,activity,<channel...>` rows grouped by (user, trial).
///
/// Rows of one (user, trial) group must be contiguous. Lines starting with
/// `#` are comments.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<TimeSeries>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Vec<TimeSeries>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let fixed: Vec<usize> = FIXED_COLUMNS
        .iter()
        .map(|c| find(c).ok_or_else(|| Error::Schema(format!("missing column `{c}`"))))
        .collect::<Result<_>>()?;
    let chan_cols: Vec<usize> = schema
        .channels
        .iter()
        .map(|c| find(c).ok_or_else(|| Error::Schema(format!("missing channel column `{c}`"))))
        .collect::<Result<_>>()?;

    let m = schema.channels.len();
    let mut out: Vec<TimeSeries> = Vec::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut current: Option<(String, String)> = None;

    let flush = |key: Option<(String, String)>, values: &mut Vec<f64>, labels: &mut Vec<usize>, out: &mut Vec<TimeSeries>| {
        if let Some((user_id, trial_id)) = key {
            let t = labels.len();
            out.push(TimeSeries {
                user_id,
                trial_id,
                rate_hz: schema.rate_hz,
                channels: schema.channels.clone(),
                samples: Array2::from_shape_vec((t, m), std::mem::take(values)).expect("row widths checked"),
                activity: std::mem::take(labels),
            });
        }
    };

    for (i, rec) in rdr.records().enumerate() {
        // header is row 1; comment lines shift the physical line
        let rec = rec.map_err(|e| Error::Ingestion {
            row: i + 2,
            msg: e.to_string(),
        })?;
        let row = rec.position().map_or(i + 2, |p| p.line() as usize);
        let get = |c: usize| {
            rec.get(c).map(str::trim).ok_or_else(|| Error::Ingestion {
                row,
                msg: format!("missing field {c}"),
            })
        };
        let key = (get(fixed[0])?.to_string(), get(fixed[1])?.to_string());
        if current.as_ref() != Some(&key) {
            if !seen.insert(key.clone()) {
                return Err(Error::Ingestion {
                    row,
                    msg: format!("rows for user `{}` trial `{}` are not contiguous", key.0, key.1),
                });
            }
            flush(current.take(), &mut values, &mut labels, &mut out);
            current = Some(key);
        }
        let act = get(fixed[2])?;
        let label = schema.labels.iter().position(|l| l == act).ok_or_else(|| Error::Label(act.to_string()))?;
        labels.push(label);
        for &c in &chan_cols {
            let cell = get(c)?;
            let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                row,
                msg: format!("non-numeric value `{cell}` in column `{}`", &headers[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    row,
                    msg: format!("non-finite value in column `{}`", &headers[c]),
                });
            }
            values.push(v);
        }
    }
    flush(current.take(), &mut values, &mut labels, &mut out);
    Ok(out)
}

/// Writes series in the same schema `load_csv` reads.
pub fn write_csv<W: std::io::Write>(series: &[TimeSeries], labels: &[String], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let Some(first) = series.first() else {
        wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
        return Ok(());
    };
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(first.channels.iter().map(String::as_str));
    wtr.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for s in series {
        if s.channels != first.channels {
            return Err(Error::Schema("all series must share the same channels".into()));
        }
        for (t, row) in s.samples.axis_iter(Axis(0)).enumerate() {
            record.clear();
            record.push(s.user_id.clone());
            record.push(s.trial_id.clone());
            let label = labels.get(s.activity[t]).ok_or_else(|| Error::Label(format!("#{}", s.activity[t])))?;
            record.push(label.clone());
            record.extend(row.iter().map(|v| format!("{v}")));
            wtr.write_record(&record)?;
        }
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Like [`write_csv`], preceded by a `# provenance` comment line holding
/// `provenance` as compact JSON.
pub fn write_csv_with_provenance<W: std::io::Write>(series: &[TimeSeries], labels: &[String], provenance: &serde_json::Value, mut writer: W) -> Result<()> {
    writeln!(writer, "# provenance {}", serde_json::to_string(provenance)?).map_err(|e| Error::Format(e.to_string()))?;
    write_csv(series, labels, &mut writer)
}

/// Header names of a series CSV, skipping comment lines.
pub fn read_header<R: std::io::Read>(reader: R) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).from_reader(reader);
    Ok(rdr.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

/// Three channels collapsed into their Euclidean norm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MagnitudeGroup {
    pub name: String,
    pub axes: [String; 3],
}

/// Replaces each `(x, y, z)` group by `sqrt(x^2 + y^2 + z^2)` at the position
/// of its first axis; other channels keep their order.
pub fn magnitude(series: &TimeSeries, groups: &[MagnitudeGroup]) -> Result<TimeSeries> {
    let idx = |name: &str| {
        series
            .channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Schema(format!("missing channel `{name}` for magnitude")))
    };
    let resolved: Vec<[usize; 3]> = groups
        .iter()
        .map(|g| Ok([idx(&g.axes[0])?, idx(&g.axes[1])?, idx(&g.axes[2])?]))
        .collect::<Result<_>>()?;
    enum Col {
        Keep(usize),
        Mag(usize),
    }
    let mut cols = Vec::new();
    let mut names = Vec::new();
    for (c, name) in series.channels.iter().enumerate() {
        if let Some(gi) = resolved.iter().position(|r| r[0] == c) {
            cols.push(Col::Mag(gi));
            names.push(groups[gi].name.clone());
        } else if !resolved.iter().any(|r| r.contains(&c)) {
            cols.push(Col::Keep(c));
            names.push(name.clone());
        }
    }
    let t = series.len();
    let samples = Array2::from_shape_fn((t, cols.len()), |(i, j)| match cols[j] {
        Col::Keep(c) => series.samples[[i, c]],
        Col::Mag(g) => {
            let [a, b, c] = resolved[g];
            let (x, y, z) = (series.samples[[i, a]], series.samples[[i, b]], series.samples[[i, c]]);
            (x * x + y * y + z * z).sqrt()
        }
    });
    Ok(TimeSeries {
        channels: names,
        samples,
        ..series.clone()
    })
}
