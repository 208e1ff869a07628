//! File plumbing shared by the commands: manifests, windowed CSV data,
//! provenance records and atomic writes.

use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde_json::{json, Value};

use crate::datasets::{load_csv, read_header, split, write_csv_with_provenance, LabeledWindow, Manifest, Splits, Standardizer, TimeSeries};
use crate::error::{Error, Result};
use crate::neuralcore::serialize::write_atomic;

/// Base name of a path, used in provenance so records do not depend on
/// where a run happened.
pub fn file_name(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn provenance(command: &str, config: Value, inputs: &[&Path]) -> Value {
    json!({
        "tool": "sveil",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "inputs": inputs.iter().map(|p| file_name(p)).collect::<Vec<_>>(),
        "config": config,
    })
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Refuses to write over one of the command's inputs.
pub fn ensure_distinct(out: &Path, inputs: &[&Path]) -> Result<()> {
    let Ok(out_abs) = out.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        if input.canonicalize().is_ok_and(|p| p == out_abs) {
            return Err(Error::Config(format!("output {} would overwrite an input", out.display())));
        }
    }
    Ok(())
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, text.as_bytes())
}

pub fn write_series(path: &Path, series: &[TimeSeries], labels: &[String], provenance: &Value) -> Result<()> {
    ensure_parent(path)?;
    let mut buf = Vec::new();
    write_csv_with_provenance(series, labels, provenance, &mut buf)?;
    write_atomic(path, &buf)
}

/// Windows of a CSV file in either the raw channel layout of the manifest
/// or the model channel layout written by transforms.
pub fn load_windows(manifest: &Manifest, path: &Path, stride: usize) -> Result<Vec<LabeledWindow>> {
    let header = read_header(File::open(path).map_err(|e| Error::io(path, e))?)?;
    let has = |cols: &[String]| cols.iter().all(|c| header.contains(c));
    if has(&manifest.schema.channels) {
        return manifest.windows(&load_csv(path, &manifest.schema)?, stride);
    }
    let model = model_layout(manifest);
    if has(&model.schema.channels) {
        return model.windows(&load_csv(path, &model.schema)?, stride);
    }
    let missing: Vec<&str> = manifest.schema.channels.iter().filter(|c| !header.contains(c)).map(String::as_str).collect();
    Err(Error::Schema(format!("{} lacks channel columns {missing:?}", file_name(path))))
}

/// The manifest seen through its model channels, with magnitude groups
/// already applied.
pub fn model_layout(manifest: &Manifest) -> Manifest {
    let mut m = manifest.clone();
    m.schema.channels = manifest.model_channels();
    m.channel_groups.clear();
    m
}

/// Standardized splits plus the statistics used.
pub struct Prepared {
    pub splits: Splits,
    pub standardizer: Standardizer,
}

/// Splits with the manifest's strategy and seed, then standardizes with the
/// manifest's statistics or, when absent, statistics fitted on `train`.
pub fn prepare(manifest: &Manifest, windows: &[LabeledWindow]) -> Result<Prepared> {
    if windows.is_empty() {
        return Err(Error::Precondition("the data yields no windows".into()));
    }
    let s = split(windows, &manifest.split, manifest.seeds.split)?;
    let standardizer = match &manifest.standardization {
        Some(st) => st.clone(),
        None => Standardizer::fit(&s.train)?,
    };
    Ok(Prepared {
        splits: Splits {
            train: standardizer.apply_all(&s.train)?,
            validation: standardizer.apply_all(&s.validation)?,
            test: standardizer.apply_all(&s.test)?,
        },
        standardizer,
    })
}

/// Concatenates consecutive windows of one (user, trial) into a series,
/// labelling each sample with its window's activity.
pub fn windows_to_series(windows: &[LabeledWindow], channels: &[String], rate_hz: f64) -> Vec<TimeSeries> {
    let mut out: Vec<TimeSeries> = Vec::new();
    let mut start = 0;
    while start < windows.len() {
        let key = (&windows[start].user_id, &windows[start].trial_id);
        let end = start + windows[start..].iter().take_while(|w| (&w.user_id, &w.trial_id) == key).count();
        let group = &windows[start..end];
        let t: usize = group.iter().map(LabeledWindow::width).sum();
        let mut samples = Array2::zeros((t, channels.len()));
        let mut activity = Vec::with_capacity(t);
        let mut row = 0;
        for w in group {
            for (j, col) in w.x.columns().into_iter().enumerate() {
                samples.row_mut(row + j).assign(&col);
            }
            row += w.width();
            activity.extend(std::iter::repeat_n(w.activity, w.width()));
        }
        out.push(TimeSeries {
            user_id: key.0.clone(),
            trial_id: key.1.clone(),
            rate_hz,
            channels: channels.to_vec(),
            samples,
            activity,
        });
        start = end;
    }
    out
}

/// Resolves an output path against the output directory.
pub fn resolve(out_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        out_dir.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, Vocab};

    #[test]
    fn series_roundtrip_through_windows() {
        let d = generate_synthetic(2, 2, 3, 8, 2, 0).unwrap();
        let channels = vec!["a".to_string(), "b".to_string()];
        let mut sorted = d.windows.clone();
        sorted.sort_by(|a, b| (&a.user_id, &a.trial_id).cmp(&(&b.user_id, &b.trial_id)));
        let series = windows_to_series(&sorted, &channels, 50.0);
        assert_eq!(series.len(), 6);
        let vocab = Vocab {
            activities: d.vocab.activities.clone(),
            users: d.vocab.users.clone(),
        };
        let back: Vec<LabeledWindow> = series
            .iter()
            .flat_map(|s| crate::datasets::extract_windows(s, 8, 8, crate::datasets::LabelRule::Pure, &vocab).unwrap())
            .collect();
        assert_eq!(back, sorted);
    }

    #[test]
    fn relative_outputs_land_in_out_dir() {
        assert_eq!(resolve(Path::new("/runs"), Path::new("m.rae")), PathBuf::from("/runs/m.rae"));
        assert_eq!(resolve(Path::new("/runs"), Path::new("/abs/m.rae")), PathBuf::from("/abs/m.rae"));
    }
}
