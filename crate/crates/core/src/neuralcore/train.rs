use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{compute_loss, LossKind};
use super::net::{DenseNet, Mode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub l2_lambda: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            dropout_rate: 0.0,
            l2_lambda: 0.0,
            rng_seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Config(format!("l2_lambda {} must be non-negative", self.l2_lambda)));
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        Mode::Train { dropout: self.dropout_rate }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

/// How the epoch whose parameters are returned is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Lowest validation loss.
    MinLoss,
    /// Highest validation argmax accuracy.
    MaxAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub validation_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

pub fn gather_rows(data: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    data.select(Axis(0), idx)
}

pub fn argmax_rows(p: ArrayView2<f64>) -> Vec<usize> {
    p.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn accuracy(pred: ArrayView2<f64>, targets: ArrayView2<f64>) -> f64 {
    let p = argmax_rows(pred);
    let t = argmax_rows(targets);
    if p.is_empty() {
        return 0.0;
    }
    p.iter().zip(&t).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
}

/// Shuffled minibatch index lists for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Minibatch Adam training with best-epoch selection on the validation set.
///
/// Without a validation set the final epoch is kept.
pub fn fit(
    net: &mut DenseNet,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    kind: LossKind,
    cfg: &TrainConfig,
    validation: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
    selection: Selection,
) -> Result<FitReport> {
    cfg.validate()?;
    if matches!(kind, LossKind::Composite(_)) {
        return Err(Error::Config("composite loss is trained by the anonymizer, not `fit`".into()));
    }
    if inputs.nrows() == 0 || inputs.nrows() != targets.nrows() {
        return Err(Error::Shape(format!("{} inputs vs {} targets", inputs.nrows(), targets.nrows())));
    }
    if targets.ncols() != net.output_dim() {
        return Err(Error::Shape(format!(
            "targets have {} columns, network outputs {}",
            targets.ncols(),
            net.output_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut state = AdamState::new(net, cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, DenseNet)> = None;

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(inputs.nrows(), cfg.batch_size, &mut rng);
        for (b, idx) in batches.iter().enumerate() {
            let x = gather_rows(inputs, idx);
            let y = gather_rows(targets, idx);
            let pass = net.forward(x.view(), cfg.mode(), &mut rng)?;
            let loss = compute_loss(kind, pass.outputs.view(), y.view(), None).map_err(|_| Error::TrainingDiverged { epoch, batch: b })?;
            let (grads, _) = net.backward(&pass.cache, loss.grad.view(), cfg.l2_lambda)?;
            if !grads.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: b });
            }
            adam_step(net, &grads, &mut state)?;
            if !net.is_finite() {
                return Err(Error::TrainingDiverged { epoch, batch: b });
            }
            total += loss.value * idx.len() as f64;
        }
        let train_loss = total / inputs.nrows() as f64 + net.l2_penalty(cfg.l2_lambda);
        let validation_score = match validation {
            Some((vx, vy)) if vx.nrows() > 0 => {
                let pred = net.predict(vx)?;
                let score = match selection {
                    // negate so that larger is always better
                    Selection::MinLoss => -compute_loss(kind, pred.view(), vy, None)?.value,
                    Selection::MaxAccuracy => accuracy(pred.view(), vy),
                };
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, epoch, net.clone()));
                }
                Some(score)
            }
            _ => None,
        };
        history.push(EpochStats { train_loss, validation_score });
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *net = params;
            epoch
        }
        None => cfg.epochs - 1,
    };
    Ok(FitReport { best_epoch, history })
}
