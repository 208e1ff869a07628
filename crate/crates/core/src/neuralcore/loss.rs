//! Losses and their analytic gradients.
//!
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before every log, so
//! the losses stay finite for a fully confident classifier. The clamp has zero
//! derivative outside that range.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    Mse,
    CategoricalCrossEntropy,
    IdentityPenalty,
    /// `beta_i * L_i - beta_a * L_a + beta_d * L_d`.
    Composite(CompositeWeights),
}

/// Privacy/utility trade-off weights of the anonymizer objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeWeights {
    pub beta_i: f64,
    pub beta_a: f64,
    pub beta_d: f64,
}

impl CompositeWeights {
    pub fn new(beta_i: f64, beta_a: f64, beta_d: f64) -> Result<Self> {
        let w = Self { beta_i, beta_a, beta_d };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta_i", self.beta_i), ("beta_a", self.beta_a), ("beta_d", self.beta_d)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, parts: &CompositeParts) -> f64 {
        self.beta_i * parts.identity - self.beta_a * parts.activity + self.beta_d * parts.distortion
    }
}

impl Default for CompositeWeights {
    fn default() -> Self {
        Self {
            beta_i: 1.0,
            beta_a: 1.0,
            beta_d: 1.0,
        }
    }
}

/// The three logged terms of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CompositeParts {
    /// Identity penalty summed over all identity adversaries.
    pub identity: f64,
    /// Activity log-likelihood `mean(Y . log Yhat)`; never positive.
    pub activity: f64,
    /// Mean squared distortion between input and output.
    pub distortion: f64,
}

/// Adversary outputs needed by the composite loss.
#[derive(Debug, Clone, Copy)]
pub struct CompositeAux<'a> {
    /// Softmax outputs of each identity recognizer.
    pub identity_preds: &'a [ArrayView2<'a, f64>],
    pub identity_labels: ArrayView2<'a, f64>,
    pub activity_preds: ArrayView2<'a, f64>,
    pub activity_labels: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// dLoss / dPredictions.
    pub grad: Array2<f64>,
    /// Composite only: dLoss / d(identity_preds[k]).
    pub identity_grads: Vec<Array2<f64>>,
    /// Composite only: dLoss / d(activity_preds).
    pub activity_grad: Option<Array2<f64>>,
    pub parts: Option<CompositeParts>,
}

impl LossOutput {
    fn simple(value: f64, grad: Array2<f64>) -> Self {
        Self {
            value,
            grad,
            identity_grads: Vec::new(),
            activity_grad: None,
            parts: None,
        }
    }
}

fn same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: predictions {:?} vs targets {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::Shape(format!("{what}: empty batch")));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, false)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, false)
    } else {
        (p, true)
    }
}

/// Mean over every entry of the squared error.
pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(pred, target, "mse")?;
    let n = pred.len() as f64;
    let diff = &pred - &target;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

/// Batch mean of `-sum(Y log Yhat)`.
pub fn cross_entropy(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(pred, target, "cross-entropy")?;
    let n = pred.nrows() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut value = 0.0;
    Zip::from(&mut grad).and(&pred).and(&target).for_each(|g, &p, &y| {
        if y != 0.0 {
            let (pc, live) = clamp_prob(p);
            value -= y * pc.ln();
            if live {
                *g = -y / (pc * n);
            }
        }
    });
    Ok((value / n, grad))
}

/// Batch mean of `-(U . log(1 - Uhat) + log(1 - max(Uhat)))`.
pub fn identity_penalty(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(pred, target, "identity penalty")?;
    let n = pred.nrows() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    let mut value = 0.0;
    for ((p_row, u_row), mut g_row) in pred.axis_iter(Axis(0)).zip(target.axis_iter(Axis(0))).zip(grad.axis_iter_mut(Axis(0))) {
        for ((&p, &u), g) in p_row.iter().zip(u_row.iter()).zip(g_row.iter_mut()) {
            if u != 0.0 {
                let (pc, live) = clamp_prob(p);
                value -= u * (1.0 - pc).ln();
                if live {
                    *g += u / ((1.0 - pc) * n);
                }
            }
        }
        // first index wins on ties
        let (arg, &pmax) = p_row
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, (i, p)| if *p > *best.1 { (i, p) } else { best });
        let (pc, live) = clamp_prob(pmax);
        value -= (1.0 - pc).ln();
        if live {
            g_row[arg] += 1.0 / ((1.0 - pc) * n);
        }
    }
    Ok((value / n, grad))
}

/// Evaluates a loss and its gradient.
///
/// For [`LossKind::Composite`], `predictions` is the transformed batch `X''`,
/// `targets` the original batch `X`, and `aux` carries the adversaries' outputs.
/// The activity term is the log-likelihood `Y . log(Yhat)` so that subtracting
/// it rewards confident, correct activity predictions.
pub fn compute_loss(kind: LossKind, predictions: ArrayView2<f64>, targets: ArrayView2<f64>, aux: Option<&CompositeAux<'_>>) -> Result<LossOutput> {
    let out = match kind {
        LossKind::Mse => {
            let (v, g) = mse(predictions, targets)?;
            LossOutput::simple(v, g)
        }
        LossKind::CategoricalCrossEntropy => {
            let (v, g) = cross_entropy(predictions, targets)?;
            LossOutput::simple(v, g)
        }
        LossKind::IdentityPenalty => {
            let (v, g) = identity_penalty(predictions, targets)?;
            LossOutput::simple(v, g)
        }
        LossKind::Composite(w) => {
            w.validate()?;
            let aux = aux.ok_or_else(|| Error::Config("composite loss needs adversary predictions".into()))?;
            let (distortion, d_grad) = mse(predictions, targets)?;
            let mut identity = 0.0;
            let mut identity_grads = Vec::with_capacity(aux.identity_preds.len());
            for preds in aux.identity_preds {
                let (v, g) = identity_penalty(*preds, aux.identity_labels)?;
                identity += v;
                identity_grads.push(g * w.beta_i);
            }
            let (ce, ce_grad) = cross_entropy(aux.activity_preds, aux.activity_labels)?;
            let parts = CompositeParts {
                identity,
                activity: -ce,
                distortion,
            };
            LossOutput {
                value: w.combine(&parts),
                grad: d_grad * w.beta_d,
                identity_grads,
                // d(-beta_a * (-ce)) = beta_a * d(ce)
                activity_grad: Some(ce_grad * w.beta_a),
                parts: Some(parts),
            }
        }
    };
    if !out.value.is_finite() {
        return Err(Error::Degenerate("loss is not finite".into()));
    }
    Ok(out)
}
