//! Feed-forward network engine: dense layers, losses with analytic gradients,
//! manual backpropagation, Adam, dropout, L2 and finite-difference checks.
//!
//! All arithmetic is `f64`.

mod activation;
mod adam;
pub mod gradcheck;
mod loss;
mod net;
pub mod serialize;
mod train;

pub use activation::{selu, softmax_rows, Activation, SELU_ALPHA, SELU_LAMBDA};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradient_check, random_suite, GradCheckReport, Objective, SuiteReport};
pub use loss::{compute_loss, cross_entropy, identity_penalty, mse, CompositeAux, CompositeParts, CompositeWeights, LossKind, LossOutput, PROB_EPS};
pub use net::{DenseNet, ForwardCache, ForwardPass, Gradients, Layer, LayerSpec, Mode};
pub use train::{accuracy, argmax_rows, epoch_batches, fit, gather_rows, EpochStats, FitReport, Selection, TrainConfig};
