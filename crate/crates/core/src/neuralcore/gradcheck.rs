//! Finite-difference verification of the analytic gradients.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::activation::Activation;
use super::loss::{compute_loss, CompositeAux, CompositeWeights, LossKind};
use super::net::{DenseNet, Gradients, LayerSpec, Mode};
use crate::error::{Error, Result};

/// Central-difference step for 64-bit parameters.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst parameter.
    pub worst_index: usize,
    pub params_checked: usize,
    pub passed: bool,
}

/// What the network output is scored against.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Output compared directly to `targets` (MSE, cross-entropy, identity penalty).
    Supervised { kind: LossKind, targets: ArrayView2<'a, f64> },
    /// The network is a transformer `X -> X''`; frozen heads score its output.
    Composite {
        weights: CompositeWeights,
        identity_heads: &'a [DenseNet],
        identity_labels: ArrayView2<'a, f64>,
        activity_head: &'a DenseNet,
        activity_labels: ArrayView2<'a, f64>,
    },
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Loss (including the L2 penalty) and its gradient for `net` on `batch`.
pub fn objective_gradient(net: &DenseNet, batch: ArrayView2<f64>, objective: &Objective<'_>, l2: f64) -> Result<(f64, Gradients)> {
    // infer mode draws nothing from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = net.forward(batch, Mode::Infer, &mut rng)?;
    let (value, d_out) = match objective {
        Objective::Supervised { kind, targets } => {
            if matches!(kind, LossKind::Composite(_)) {
                return Err(Error::Config("composite loss needs Objective::Composite".into()));
            }
            let out = compute_loss(*kind, pass.outputs.view(), *targets, None)?;
            (out.value, out.grad)
        }
        Objective::Composite {
            weights,
            identity_heads,
            identity_labels,
            activity_head,
            activity_labels,
        } => {
            let head_passes = identity_heads
                .iter()
                .map(|h| h.forward(pass.outputs.view(), Mode::Infer, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let act_pass = activity_head.forward(pass.outputs.view(), Mode::Infer, &mut rng)?;
            let id_views: Vec<_> = head_passes.iter().map(|p| p.outputs.view()).collect();
            let aux = CompositeAux {
                identity_preds: &id_views,
                identity_labels: *identity_labels,
                activity_preds: act_pass.outputs.view(),
                activity_labels: *activity_labels,
            };
            let out = compute_loss(LossKind::Composite(*weights), pass.outputs.view(), batch, Some(&aux))?;
            let mut d_out = out.grad;
            for ((head, hp), g) in identity_heads.iter().zip(&head_passes).zip(&out.identity_grads) {
                let (_, dx) = head.backward(&hp.cache, g.view(), 0.0)?;
                d_out += &dx;
            }
            let ag = out.activity_grad.expect("composite loss yields an activity gradient");
            let (_, dx) = activity_head.backward(&act_pass.cache, ag.view(), 0.0)?;
            d_out += &dx;
            (out.value, d_out)
        }
    };
    let (grads, _) = net.backward(&pass.cache, d_out.view(), l2)?;
    Ok((value + net.l2_penalty(l2), grads))
}

/// Compares `analytic` with central differences of `loss` around `params`.
pub fn check_gradients<F>(params: &[f64], analytic: &[f64], mut loss: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!("{} parameters but {} gradient entries", params.len(), analytic.len())));
    }
    let mut probe = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + FD_STEP;
        let plus = loss(&probe)?;
        probe[i] = orig - FD_STEP;
        let minus = loss(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        params_checked: params.len(),
        passed: worst.0 < tolerance,
    })
}

/// Checks every parameter of `net` against central finite differences.
pub fn gradient_check(net: &DenseNet, batch: ArrayView2<f64>, objective: &Objective<'_>, l2: f64, tolerance: f64) -> Result<GradCheckReport> {
    let (_, grads) = objective_gradient(net, batch, objective, l2)?;
    let mut scratch = net.clone();
    check_gradients(
        &net.flatten(),
        &grads.flatten(),
        |p| {
            scratch.set_flat(p)?;
            Ok(objective_gradient(&scratch, batch, objective, l2)?.0)
        },
        tolerance,
    )
}

/// Outcome of [`random_suite`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub configs: usize,
    pub failures: usize,
    pub max_rel_error: f64,
    /// Description of the configuration with the largest error.
    pub worst: String,
    /// Configurations checked per loss kind.
    pub per_loss: Vec<(String, usize)>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

const HIDDEN_ACTIVATIONS: [Activation; 4] = [Activation::Selu, Activation::Tanh, Activation::Sigmoid, Activation::Linear];
const LOSS_NAMES: [&str; 4] = ["mse", "cross_entropy", "identity_penalty", "composite"];

fn random_net(rng: &mut ChaCha8Rng, input: usize, output: usize, out_act: Activation) -> Result<DenseNet> {
    let mut specs: Vec<LayerSpec> = (0..rng.random_range(0..=2))
        .map(|_| LayerSpec::new(rng.random_range(2..=6), HIDDEN_ACTIVATIONS[rng.random_range(0..HIDDEN_ACTIVATIONS.len())]))
        .collect();
    specs.push(LayerSpec::new(output, out_act));
    DenseNet::new(input, &specs, rng)
}

fn random_one_hot(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
    let mut y = Array2::zeros((n, k));
    for i in 0..n {
        y[[i, rng.random_range(0..k)]] = 1.0;
    }
    y
}

/// Gradient-checks `configs` random (architecture, loss) pairs, cycling
/// through MSE, cross-entropy, the identity penalty and the composite loss
/// with random weights.
pub fn random_suite(configs: usize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport {
        configs,
        failures: 0,
        max_rel_error: 0.0,
        worst: String::new(),
        per_loss: LOSS_NAMES.iter().map(|n| (n.to_string(), 0)).collect(),
    };
    for i in 0..configs {
        let kind = i % LOSS_NAMES.len();
        let d = rng.random_range(2..=6);
        let n = rng.random_range(2..=5);
        let l2 = [0.0, 1e-3, 1e-2][rng.random_range(0..3)];
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
        let (r, desc) = match kind {
            0 => {
                let k = rng.random_range(1..=4);
                let out_act = HIDDEN_ACTIVATIONS[rng.random_range(0..HIDDEN_ACTIVATIONS.len())];
                let net = random_net(&mut rng, d, k, out_act)?;
                let t = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
                let obj = Objective::Supervised {
                    kind: LossKind::Mse,
                    targets: t.view(),
                };
                (
                    gradient_check(&net, x.view(), &obj, l2, tolerance)?,
                    format!("mse {d}->{k} depth {}", net.layers().len()),
                )
            }
            1 | 2 => {
                let k = rng.random_range(2..=4);
                let net = random_net(&mut rng, d, k, Activation::Softmax)?;
                let y = random_one_hot(&mut rng, n, k);
                let loss = if kind == 1 {
                    LossKind::CategoricalCrossEntropy
                } else {
                    LossKind::IdentityPenalty
                };
                let obj = Objective::Supervised { kind: loss, targets: y.view() };
                (
                    gradient_check(&net, x.view(), &obj, l2, tolerance)?,
                    format!("{} {d}->{k} depth {}", LOSS_NAMES[kind], net.layers().len()),
                )
            }
            _ => {
                let net = random_net(&mut rng, d, d, Activation::Linear)?;
                let n_id = rng.random_range(2..=4);
                let n_act = rng.random_range(2..=4);
                let heads = (0..rng.random_range(1..=2))
                    .map(|_| random_net(&mut rng, d, n_id, Activation::Softmax))
                    .collect::<Result<Vec<_>>>()?;
                let act = random_net(&mut rng, d, n_act, Activation::Softmax)?;
                let u = random_one_hot(&mut rng, n, n_id);
                let y = random_one_hot(&mut rng, n, n_act);
                let weights = CompositeWeights::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0), rng.random_range(0.0..2.0))?;
                let obj = Objective::Composite {
                    weights,
                    identity_heads: &heads,
                    identity_labels: u.view(),
                    activity_head: &act,
                    activity_labels: y.view(),
                };
                let desc = format!(
                    "composite {d}->{d} depth {} heads {} betas ({:.3}, {:.3}, {:.3})",
                    net.layers().len(),
                    heads.len(),
                    weights.beta_i,
                    weights.beta_a,
                    weights.beta_d
                );
                (gradient_check(&net, x.view(), &obj, l2, tolerance)?, desc)
            }
        };
        report.per_loss[kind].1 += 1;
        if !r.passed {
            report.failures += 1;
        }
        if r.max_rel_error > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = r.max_rel_error;
            report.worst = format!("#{i} {desc} l2 {l2}");
        }
    }
    Ok(report)
}
