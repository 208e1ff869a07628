use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::series::TimeSeries;
use crate::error::{Error, Result};

/// Activity labels and user ids that one-hot vectors index into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub activities: Vec<String>,
    pub users: Vec<String>,
}

impl Vocab {
    pub fn user_index(&self, user_id: &str) -> Result<usize> {
        self.users
            .iter()
            .position(|u| u == user_id)
            .ok_or_else(|| Error::Config(format!("unknown user `{user_id}`")))
    }

    pub fn activity_index(&self, label: &str) -> Result<usize> {
        self.activities.iter().position(|a| a == label).ok_or_else(|| Error::Label(label.to_string()))
    }
}

/// An `M x W` window with its activity and identity labels.
///
/// Labels are stored as class indices, so the one-hot vectors produced by
/// [`LabeledWindow::y`] and [`LabeledWindow::u`] always sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub x: Array2<f64>,
    pub activity: usize,
    pub n_activities: usize,
    pub user: usize,
    pub n_users: usize,
    pub user_id: String,
    pub trial_id: String,
}

pub fn one_hot(index: usize, len: usize) -> Array1<f64> {
    let mut v = Array1::zeros(len);
    v[index] = 1.0;
    v
}

impl LabeledWindow {
    pub fn channels(&self) -> usize {
        self.x.nrows()
    }

    pub fn width(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> Array1<f64> {
        one_hot(self.activity, self.n_activities)
    }

    pub fn u(&self) -> Array1<f64> {
        one_hot(self.user, self.n_users)
    }

    /// Channel-major flattening, length `M * W`.
    pub fn flat(&self) -> Vec<f64> {
        self.x.iter().copied().collect()
    }
}

/// Stacks flattened windows into an `[n x (M*W)]` batch.
pub fn stack_inputs(windows: &[LabeledWindow]) -> Array2<f64> {
    let d = windows.first().map_or(0, |w| w.x.len());
    let mut out = Array2::zeros((windows.len(), d));
    for (mut row, w) in out.axis_iter_mut(Axis(0)).zip(windows) {
        row.iter_mut().zip(w.x.iter()).for_each(|(o, v)| *o = *v);
    }
    out
}

pub fn stack_activity(windows: &[LabeledWindow]) -> Array2<f64> {
    let b = windows.first().map_or(0, |w| w.n_activities);
    Array2::from_shape_fn((windows.len(), b), |(i, j)| f64::from(u8::from(windows[i].activity == j)))
}

pub fn stack_users(windows: &[LabeledWindow]) -> Array2<f64> {
    let n = windows.first().map_or(0, |w| w.n_users);
    Array2::from_shape_fn((windows.len(), n), |(i, j)| f64::from(u8::from(windows[i].user == j)))
}

/// Replaces each window's identity label by a per-user class (e.g. gender),
/// so identity-oriented code paths work on attributes unchanged.
pub fn relabel_users(windows: &[LabeledWindow], class_of_user: &[usize], n_classes: usize) -> Result<Vec<LabeledWindow>> {
    windows
        .iter()
        .map(|w| {
            let class = *class_of_user
                .get(w.user)
                .ok_or_else(|| Error::Config(format!("no class for user `{}`", w.user_id)))?;
            if class >= n_classes {
                return Err(Error::Config(format!("class {class} out of range for {n_classes} classes")));
            }
            Ok(LabeledWindow {
                user: class,
                n_users: n_classes,
                ..w.clone()
            })
        })
        .collect()
}

/// Reshapes a flattened row back into `M x W`.
pub fn unflatten(row: &[f64], channels: usize) -> Result<Array2<f64>> {
    if channels == 0 || !row.len().is_multiple_of(channels) {
        return Err(Error::Shape(format!("cannot reshape {} values into {channels} channels", row.len())));
    }
    Array2::from_shape_vec((channels, row.len() / channels), row.to_vec()).map_err(|e| Error::Shape(e.to_string()))
}

/// Windows with a single activity only, or any window labelled by majority.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelRule {
    #[default]
    Pure,
    Majority,
}

/// Slices windows starting at `0, stride, 2*stride, ...`.
///
/// A series shorter than `width` yields no windows.
pub fn extract_windows(series: &TimeSeries, width: usize, stride: usize, rule: LabelRule, vocab: &Vocab) -> Result<Vec<LabeledWindow>> {
    if width == 0 || stride == 0 {
        return Err(Error::Parameter("window width and stride must be positive".into()));
    }
    let user = vocab.user_index(&series.user_id)?;
    let b = vocab.activities.len();
    if let Some(&bad) = series.activity.iter().find(|&&a| a >= b) {
        return Err(Error::Label(format!("#{bad}")));
    }
    let t = series.len();
    let mut out = Vec::new();
    let mut start = 0;
    while start + width <= t {
        let labels = &series.activity[start..start + width];
        let mut counts = vec![0usize; b];
        labels.iter().for_each(|&a| counts[a] += 1);
        // lowest label id wins ties
        let (activity, &top) = counts.iter().enumerate().rev().max_by_key(|(_, c)| **c).unwrap();
        if rule == LabelRule::Majority || top == width {
            out.push(LabeledWindow {
                x: series.samples.slice(s![start..start + width, ..]).t().to_owned(),
                activity,
                n_activities: b,
                user,
                n_users: vocab.users.len(),
                user_id: series.user_id.clone(),
                trial_id: series.trial_id.clone(),
            });
        }
        start += stride;
    }
    Ok(out)
}

/// Per-channel affine normalization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(windows: &[LabeledWindow]) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::Precondition("cannot standardize an empty split".into()))?;
        let m = first.channels();
        let mut sum = vec![0.0; m];
        let mut sq = vec![0.0; m];
        let mut n = 0.0;
        for w in windows {
            if w.channels() != m {
                return Err(Error::Shape("windows disagree on channel count".into()));
            }
            for (c, row) in w.x.axis_iter(Axis(0)).enumerate() {
                sum[c] += row.sum();
                sq[c] += row.iter().map(|v| v * v).sum::<f64>();
            }
            n += w.width() as f64;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| {
                let var = (q / n - mu * mu).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut out = x.to_owned();
        for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        Ok(out)
    }

    pub fn invert(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        let mut out = x.to_owned();
        for (c, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * self.std[c] + self.mean[c]);
        }
        Ok(out)
    }

    pub fn apply_all(&self, windows: &[LabeledWindow]) -> Result<Vec<LabeledWindow>> {
        windows
            .iter()
            .map(|w| {
                Ok(LabeledWindow {
                    x: self.apply(w.x.view())?,
                    ..w.clone()
                })
            })
            .collect()
    }

    fn check(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.nrows() != self.channels() {
            return Err(Error::Shape(format!("window has {} channels, standardizer {}", x.nrows(), self.channels())));
        }
        Ok(())
    }
}
