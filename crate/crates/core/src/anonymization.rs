//! Anonymizing autoencoder: an encoder/decoder pair trained against two
//! identity recognizers (one on the latent code, one on the output) and with
//! an activity recognizer on the output, so released windows keep activity
//! information while user-identifying patterns are suppressed.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{stack_activity, stack_inputs, stack_users, unflatten, LabeledWindow, ManifestRef};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, train_classifier, Target};
use crate::neuralcore::gradcheck::check_gradients;
use crate::neuralcore::serialize::{read_bundle, write_atomic, write_bundle};
use crate::neuralcore::{
    adam_step, compute_loss, epoch_batches, gather_rows, Activation, AdamState, CompositeAux, CompositeParts, CompositeWeights, DenseNet, GradCheckReport,
    Gradients, LayerSpec, LossKind, Mode, TrainConfig,
};
use crate::replacement::RaeModel;

/// Layer widths of the encoder (mirrored by the decoder) and the size budget
/// of each regularizer network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaeArchitecture {
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    /// Approximate weight count of each regularizer's two hidden layers.
    pub regularizer_params: usize,
}

impl Default for AaeArchitecture {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![128, 64],
            latent_dim: 32,
            regularizer_params: 50_000,
        }
    }
}

/// Second hidden layer width of every regularizer.
const REG_SECOND: usize = 64;

impl AaeArchitecture {
    fn encoder_specs(&self) -> Vec<LayerSpec> {
        self.encoder_hidden
            .iter()
            .chain([&self.latent_dim])
            .map(|&u| LayerSpec::new(u, Activation::Selu))
            .collect()
    }

    fn decoder_specs(&self, output_dim: usize) -> Vec<LayerSpec> {
        self.encoder_hidden
            .iter()
            .rev()
            .map(|&u| LayerSpec::new(u, Activation::Selu))
            .chain([LayerSpec::new(output_dim, Activation::Linear)])
            .collect()
    }

    /// `in -> h -> 64 -> classes` with `h` chosen so the hidden weights total
    /// roughly `regularizer_params`.
    fn regularizer_specs(&self, input_dim: usize, classes: usize) -> Vec<LayerSpec> {
        let h = (self.regularizer_params / (input_dim + REG_SECOND)).clamp(16, 1024);
        vec![
            LayerSpec::new(h, Activation::Selu),
            LayerSpec::new(REG_SECOND, Activation::Selu),
            LayerSpec::new(classes, Activation::Softmax),
        ]
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim >= input_dim || self.encoder_hidden.contains(&0) {
            return Err(Error::Config(format!("latent size {} must be in 1..{input_dim}", self.latent_dim)));
        }
        Ok(())
    }
}

/// Alternation schedule. Each round is one pass over the training minibatches;
/// every minibatch first gets `adversary_steps_per_round` regularizer updates,
/// then `aae_steps_per_round` encoder/decoder updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSchedule {
    pub adversary_steps_per_round: usize,
    pub aae_steps_per_round: usize,
    pub rounds: usize,
    /// Epochs of plain reconstruction training of the encoder/decoder before
    /// the regularizers are pre-trained.
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Epochs of regularizer-only training before alternation starts.
    pub pretrain_epochs: usize,
    /// Rounds between validation scorings with fresh probes.
    pub eval_every: usize,
    /// Training epochs of each fresh validation probe.
    pub probe_epochs: usize,
}

/// Defaults start from a reconstruction warm-up and give the encoder/decoder
/// five updates per adversary update; a 1:1 alternation lets the adversaries
/// drag the output far from the input.
impl Default for AdversarialSchedule {
    fn default() -> Self {
        Self {
            adversary_steps_per_round: 1,
            aae_steps_per_round: 5,
            rounds: 30,
            warmup_epochs: 10,
            pretrain_epochs: 2,
            eval_every: 5,
            probe_epochs: 10,
        }
    }
}

impl AdversarialSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.adversary_steps_per_round == 0 || self.aae_steps_per_round == 0 || self.rounds == 0 || self.eval_every == 0 || self.probe_epochs == 0 {
            return Err(Error::Config("adversarial schedule counts must be positive".into()));
        }
        Ok(())
    }
}

/// The three regularizer networks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarySet {
    /// Identity recognizer on the latent code.
    pub enc_reg: DenseNet,
    /// Identity recognizer on the decoder output.
    pub dec_reg: DenseNet,
    /// Activity recognizer on the decoder output.
    pub act_reg: DenseNet,
}

#[derive(Debug, Clone)]
pub struct AaeModel {
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub weights: CompositeWeights,
    pub schedule: AdversarialSchedule,
    pub architecture: AaeArchitecture,
    /// Kept for audit; not used by the transform.
    pub adversaries: AdversarySet,
    pub reference: ManifestRef,
    /// Names of the identity classes the adversaries were trained on.
    pub identity_classes: Vec<String>,
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct AaeMeta {
    kind: String,
    weights: CompositeWeights,
    schedule: AdversarialSchedule,
    architecture: AaeArchitecture,
    reference: ManifestRef,
    identity_classes: Vec<String>,
    provenance: serde_json::Value,
}

const KIND: &str = "aae";

fn apply(encoder: &DenseNet, decoder: &DenseNet, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
    decoder.predict(encoder.predict(batch)?.view())
}

impl AaeModel {
    /// `X'' = decoder(encoder(X))` for one standardized `M x W` window.
    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let m = self.reference.channels.len();
        if x.dim() != (m, self.reference.window) {
            return Err(Error::Shape(format!("window is {:?}, model expects ({m}, {})", x.dim(), self.reference.window)));
        }
        let row = Array2::from_shape_vec((1, x.len()), x.iter().copied().collect()).expect("length matches");
        let out = apply(&self.encoder, &self.decoder, row.view())?;
        unflatten(out.as_slice().expect("contiguous"), m)
    }

    pub fn transform_windows(&self, windows: &[LabeledWindow]) -> Result<Vec<LabeledWindow>> {
        let m = self.reference.channels.len();
        if let Some(w) = windows.iter().find(|w| w.x.dim() != (m, self.reference.window)) {
            return Err(Error::Shape(format!(
                "window is {:?}, model expects ({m}, {})",
                w.x.dim(),
                self.reference.window
            )));
        }
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let out = apply(&self.encoder, &self.decoder, stack_inputs(windows).view())?;
        windows
            .iter()
            .zip(out.rows())
            .map(|(w, r)| {
                Ok(LabeledWindow {
                    x: unflatten(&r.to_vec(), m)?,
                    ..w.clone()
                })
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(AaeMeta {
            kind: KIND.into(),
            weights: self.weights,
            schedule: self.schedule,
            architecture: self.architecture.clone(),
            reference: self.reference.clone(),
            identity_classes: self.identity_classes.clone(),
            provenance: self.provenance.clone(),
        })?;
        let a = &self.adversaries;
        let mut buf = Vec::new();
        write_bundle(&meta, &[&self.encoder, &self.decoder, &a.enc_reg, &a.dec_reg, &a.act_reg], &mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, nets) = read_bundle(&mut &bytes[..])?;
        let meta: AaeMeta = serde_json::from_value(meta)?;
        let Ok([encoder, decoder, enc_reg, dec_reg, act_reg]) = <[DenseNet; 5]>::try_from(nets) else {
            return Err(Error::Format("an AAE bundle holds exactly five networks".into()));
        };
        if meta.kind != KIND {
            return Err(Error::Format(format!("expected an AAE bundle, found `{}`", meta.kind)));
        }
        if encoder.input_dim() != meta.reference.input_dim() || decoder.output_dim() != meta.reference.input_dim() {
            return Err(Error::Format("network size does not match its manifest reference".into()));
        }
        Ok(Self {
            encoder,
            decoder,
            weights: meta.weights,
            schedule: meta.schedule,
            architecture: meta.architecture,
            adversaries: AdversarySet { enc_reg, dec_reg, act_reg },
            reference: meta.reference,
            identity_classes: meta.identity_classes,
            provenance: meta.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// `X'' = A(R(X))`; both models must come from the same manifest.
pub fn compound_transform(rae: &RaeModel, aae: &AaeModel, x: &Array2<f64>) -> Result<Array2<f64>> {
    rae.reference.ensure_compatible(&aae.reference)?;
    aae.transform(&rae.transform(x)?)
}

/// Cross-entropy losses of the regularizers after one adversary step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversaryLosses {
    pub enc_reg: f64,
    pub dec_reg: f64,
    pub act_reg: f64,
}

/// Composite loss of one encoder/decoder step and its components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub loss: f64,
    pub parts: CompositeParts,
}

struct CompositeEval {
    value: f64,
    parts: CompositeParts,
    encoder_grads: Gradients,
    decoder_grads: Gradients,
}

/// Composite loss and encoder/decoder gradients for one batch, with the
/// regularizers held fixed. `x` doubles as the distortion target.
#[allow(clippy::too_many_arguments)]
fn composite_eval(
    encoder: &DenseNet,
    decoder: &DenseNet,
    adversaries: &AdversarySet,
    x: ArrayView2<f64>,
    u: ArrayView2<f64>,
    y: ArrayView2<f64>,
    weights: CompositeWeights,
    l2: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<CompositeEval> {
    let enc = encoder.forward(x, mode, rng)?;
    let dec = decoder.forward(enc.outputs.view(), mode, rng)?;
    let enc_reg = adversaries.enc_reg.forward(enc.outputs.view(), Mode::Infer, rng)?;
    let dec_reg = adversaries.dec_reg.forward(dec.outputs.view(), Mode::Infer, rng)?;
    let act_reg = adversaries.act_reg.forward(dec.outputs.view(), Mode::Infer, rng)?;
    let id_views = [enc_reg.outputs.view(), dec_reg.outputs.view()];
    let aux = CompositeAux {
        identity_preds: &id_views,
        identity_labels: u,
        activity_preds: act_reg.outputs.view(),
        activity_labels: y,
    };
    let out = compute_loss(LossKind::Composite(weights), dec.outputs.view(), x, Some(&aux))?;
    let parts = out.parts.expect("composite loss reports its parts");
    let mut d_out = out.grad;
    let (_, dx) = adversaries.dec_reg.backward(&dec_reg.cache, out.identity_grads[1].view(), 0.0)?;
    d_out += &dx;
    let act_grad = out.activity_grad.expect("composite loss yields an activity gradient");
    let (_, dx) = adversaries.act_reg.backward(&act_reg.cache, act_grad.view(), 0.0)?;
    d_out += &dx;
    let (decoder_grads, mut d_latent) = decoder.backward(&dec.cache, d_out.view(), l2)?;
    let (_, dz) = adversaries.enc_reg.backward(&enc_reg.cache, out.identity_grads[0].view(), 0.0)?;
    d_latent += &dz;
    let (encoder_grads, _) = encoder.backward(&enc.cache, d_latent.view(), l2)?;
    Ok(CompositeEval {
        value: out.value,
        parts,
        encoder_grads,
        decoder_grads,
    })
}

/// Finite-difference check of the composite-loss gradients with respect to
/// every encoder and decoder parameter (inference mode, no dropout).
#[allow(clippy::too_many_arguments)]
pub fn gradient_check_aae(
    encoder: &DenseNet,
    decoder: &DenseNet,
    adversaries: &AdversarySet,
    x: ArrayView2<f64>,
    u: ArrayView2<f64>,
    y: ArrayView2<f64>,
    weights: CompositeWeights,
    l2: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let total = |e: &DenseNet, d: &DenseNet, rng: &mut ChaCha8Rng| -> Result<(f64, CompositeEval)> {
        let ev = composite_eval(e, d, adversaries, x, u, y, weights, l2, Mode::Infer, rng)?;
        Ok((ev.value + e.l2_penalty(l2) + d.l2_penalty(l2), ev))
    };
    let (_, ev) = total(encoder, decoder, &mut rng)?;
    let n_enc = encoder.param_count();
    let params: Vec<f64> = encoder.flatten().into_iter().chain(decoder.flatten()).collect();
    let analytic: Vec<f64> = ev.encoder_grads.flatten().into_iter().chain(ev.decoder_grads.flatten()).collect();
    let (mut e, mut d) = (encoder.clone(), decoder.clone());
    check_gradients(
        &params,
        &analytic,
        |p| {
            e.set_flat(&p[..n_enc])?;
            d.set_flat(&p[n_enc..])?;
            Ok(total(&e, &d, &mut rng)?.0)
        },
        tolerance,
    )
}

/// Owns the five networks and their optimizer state during training.
pub struct AaeTrainer {
    encoder: DenseNet,
    decoder: DenseNet,
    adversaries: AdversarySet,
    encoder_state: AdamState,
    decoder_state: AdamState,
    adversary_states: [AdamState; 3],
    weights: CompositeWeights,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl AaeTrainer {
    pub fn new(
        input_dim: usize,
        n_identities: usize,
        n_activities: usize,
        arch: &AaeArchitecture,
        weights: CompositeWeights,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        arch.validate(input_dim)?;
        if n_identities < 2 {
            return Err(Error::Config("identity loss needs at least two identity classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let encoder = DenseNet::new(input_dim, &arch.encoder_specs(), &mut rng)?;
        let decoder = DenseNet::new(arch.latent_dim, &arch.decoder_specs(input_dim), &mut rng)?;
        let adversaries = AdversarySet {
            enc_reg: DenseNet::new(arch.latent_dim, &arch.regularizer_specs(arch.latent_dim, n_identities), &mut rng)?,
            dec_reg: DenseNet::new(input_dim, &arch.regularizer_specs(input_dim, n_identities), &mut rng)?,
            act_reg: DenseNet::new(input_dim, &arch.regularizer_specs(input_dim, n_activities), &mut rng)?,
        };
        Ok(Self {
            encoder_state: AdamState::new(&encoder, cfg.adam),
            decoder_state: AdamState::new(&decoder, cfg.adam),
            adversary_states: [
                AdamState::new(&adversaries.enc_reg, cfg.adam),
                AdamState::new(&adversaries.dec_reg, cfg.adam),
                AdamState::new(&adversaries.act_reg, cfg.adam),
            ],
            encoder,
            decoder,
            adversaries,
            weights,
            cfg: *cfg,
            rng,
        })
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    pub fn adversaries(&self) -> &AdversarySet {
        &self.adversaries
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        apply(&self.encoder, &self.decoder, x)
    }

    /// One cross-entropy update of each regularizer against the current,
    /// frozen encoder/decoder outputs.
    pub fn adversary_step(&mut self, x: ArrayView2<f64>, u: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<AdversaryLosses> {
        let z = self.encoder.predict(x)?;
        let x2 = self.decoder.predict(z.view())?;
        let mode = self.cfg.mode();
        let l2 = self.cfg.l2_lambda;
        let nets = [&mut self.adversaries.enc_reg, &mut self.adversaries.dec_reg, &mut self.adversaries.act_reg];
        let inputs = [z.view(), x2.view(), x2.view()];
        let targets = [u, u, y];
        let mut losses = [0.0; 3];
        for (k, net) in nets.into_iter().enumerate() {
            let pass = net.forward(inputs[k], mode, &mut self.rng)?;
            let out = compute_loss(LossKind::CategoricalCrossEntropy, pass.outputs.view(), targets[k], None)?;
            let (grads, _) = net.backward(&pass.cache, out.grad.view(), l2)?;
            if !grads.is_finite() {
                return Err(Error::Degenerate("non-finite regularizer gradient".into()));
            }
            adam_step(net, &grads, &mut self.adversary_states[k])?;
            losses[k] = out.value;
        }
        Ok(AdversaryLosses {
            enc_reg: losses[0],
            dec_reg: losses[1],
            act_reg: losses[2],
        })
    }

    /// One composite-loss update of the encoder and decoder with the
    /// regularizers frozen.
    pub fn aae_step(&mut self, x: ArrayView2<f64>, u: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<StepLog> {
        self.update(x, u, y, self.weights)
    }

    /// One reconstruction-only update of the encoder and decoder.
    pub fn warmup_step(&mut self, x: ArrayView2<f64>, u: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<StepLog> {
        self.update(
            x,
            u,
            y,
            CompositeWeights {
                beta_i: 0.0,
                beta_a: 0.0,
                beta_d: 1.0,
            },
        )
    }

    fn update(&mut self, x: ArrayView2<f64>, u: ArrayView2<f64>, y: ArrayView2<f64>, weights: CompositeWeights) -> Result<StepLog> {
        let mode = self.cfg.mode();
        let ev = composite_eval(
            &self.encoder,
            &self.decoder,
            &self.adversaries,
            x,
            u,
            y,
            weights,
            self.cfg.l2_lambda,
            mode,
            &mut self.rng,
        )?;
        if !ev.encoder_grads.is_finite() || !ev.decoder_grads.is_finite() {
            return Err(Error::Degenerate("non-finite autoencoder gradient".into()));
        }
        adam_step(&mut self.encoder, &ev.encoder_grads, &mut self.encoder_state)?;
        adam_step(&mut self.decoder, &ev.decoder_grads, &mut self.decoder_state)?;
        if !self.encoder.is_finite() || !self.decoder.is_finite() {
            return Err(Error::Degenerate("non-finite autoencoder parameters".into()));
        }
        Ok(StepLog {
            loss: ev.value,
            parts: ev.parts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub mean_loss: f64,
    pub mean_parts: CompositeParts,
    /// Activity macro-F1 minus identity accuracy of fresh probes on validation.
    pub validation_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaeReport {
    pub best_round: usize,
    pub history: Vec<RoundLog>,
}

struct Batch {
    x: Array2<f64>,
    u: Array2<f64>,
    y: Array2<f64>,
}

fn diverged(round: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Degenerate(_) => Error::TrainingDiverged { epoch: round, batch },
        other => other,
    }
}

/// Alternating adversarial training of the anonymizing autoencoder.
///
/// The windows' identity labels (users, or a relabeled attribute such as
/// gender) are what the identity regularizers learn to recognize. The
/// returned parameters come from the best-scoring validation check; with an
/// empty validation set the final round is kept.
#[allow(clippy::too_many_arguments)]
pub fn train_aae(
    train: &[LabeledWindow],
    validation: &[LabeledWindow],
    weights: CompositeWeights,
    schedule: &AdversarialSchedule,
    arch: &AaeArchitecture,
    cfg: &TrainConfig,
    reference: ManifestRef,
    identity_classes: Vec<String>,
) -> Result<(AaeModel, AaeReport)> {
    schedule.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Precondition("no training windows for the anonymizer".into()))?;
    if first.x.len() != reference.input_dim() {
        return Err(Error::Shape(format!(
            "windows have {} values, manifest expects {}",
            first.x.len(),
            reference.input_dim()
        )));
    }
    let (n_id, n_act) = (first.n_users, first.n_activities);
    if identity_classes.len() != n_id {
        return Err(Error::Config(format!("{} identity class names for {n_id} classes", identity_classes.len())));
    }
    if let Some(w) = train
        .iter()
        .chain(validation)
        .find(|w| w.n_users != n_id || w.n_activities != n_act || w.x.len() != first.x.len())
    {
        return Err(Error::Config(format!("window of `{}` disagrees on label or window sizes", w.user_id)));
    }
    let mut trainer = AaeTrainer::new(first.x.len(), n_id, n_act, arch, weights, cfg)?;
    let x_all = stack_inputs(train);
    let u_all = stack_users(train);
    let y_all = stack_activity(train);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5eed_0a11);
    let next_batches = |rng: &mut ChaCha8Rng| -> Vec<Batch> {
        epoch_batches(train.len(), cfg.batch_size, rng)
            .iter()
            .map(|idx| Batch {
                x: gather_rows(x_all.view(), idx),
                u: gather_rows(u_all.view(), idx),
                y: gather_rows(y_all.view(), idx),
            })
            .collect()
    };
    for _ in 0..schedule.warmup_epochs {
        for (b, batch) in next_batches(&mut order_rng).iter().enumerate() {
            trainer.warmup_step(batch.x.view(), batch.u.view(), batch.y.view()).map_err(diverged(0, b))?;
        }
    }
    for _ in 0..schedule.pretrain_epochs {
        for (b, batch) in next_batches(&mut order_rng).iter().enumerate() {
            trainer.adversary_step(batch.x.view(), batch.u.view(), batch.y.view()).map_err(diverged(0, b))?;
        }
    }
    let mut history = Vec::with_capacity(schedule.rounds);
    let mut best: Option<(f64, usize, DenseNet, DenseNet, AdversarySet)> = None;
    for round in 0..schedule.rounds {
        let batches = next_batches(&mut order_rng);
        let mut sum = (0.0, CompositeParts::default(), 0usize);
        for (b, batch) in batches.iter().enumerate() {
            for _ in 0..schedule.adversary_steps_per_round {
                trainer
                    .adversary_step(batch.x.view(), batch.u.view(), batch.y.view())
                    .map_err(diverged(round, b))?;
            }
            for _ in 0..schedule.aae_steps_per_round {
                let log = trainer.aae_step(batch.x.view(), batch.u.view(), batch.y.view()).map_err(diverged(round, b))?;
                let n = batch.x.nrows();
                sum.0 += log.loss * n as f64;
                sum.1.identity += log.parts.identity * n as f64;
                sum.1.activity += log.parts.activity * n as f64;
                sum.1.distortion += log.parts.distortion * n as f64;
                sum.2 += n;
            }
        }
        let n = sum.2 as f64;
        let last = round + 1 == schedule.rounds;
        let validation_score = if !validation.is_empty() && ((round + 1) % schedule.eval_every == 0 || last) {
            let score = probe_score(&trainer, train, validation, schedule, cfg, round)?;
            if best.as_ref().is_none_or(|(s, ..)| score > *s) {
                best = Some((score, round, trainer.encoder.clone(), trainer.decoder.clone(), trainer.adversaries.clone()));
            }
            Some(score)
        } else {
            None
        };
        history.push(RoundLog {
            mean_loss: sum.0 / n,
            mean_parts: CompositeParts {
                identity: sum.1.identity / n,
                activity: sum.1.activity / n,
                distortion: sum.1.distortion / n,
            },
            validation_score,
        });
    }
    let (best_round, encoder, decoder, adversaries) = match best {
        Some((_, r, e, d, a)) => (r, e, d, a),
        None => (schedule.rounds - 1, trainer.encoder, trainer.decoder, trainer.adversaries),
    };
    Ok((
        AaeModel {
            encoder,
            decoder,
            weights,
            schedule: *schedule,
            architecture: arch.clone(),
            adversaries,
            reference,
            identity_classes,
            provenance: serde_json::Value::Null,
        },
        AaeReport { best_round, history },
    ))
}

/// Trains fresh activity and identity probes on transformed training data and
/// scores them on transformed validation data.
fn probe_score(
    trainer: &AaeTrainer,
    train: &[LabeledWindow],
    validation: &[LabeledWindow],
    schedule: &AdversarialSchedule,
    cfg: &TrainConfig,
    round: usize,
) -> Result<f64> {
    let reshape = |windows: &[LabeledWindow]| -> Result<Vec<LabeledWindow>> {
        let out = trainer.transform(stack_inputs(windows).view())?;
        let m = windows[0].channels();
        windows
            .iter()
            .zip(out.rows())
            .map(|(w, r)| {
                Ok(LabeledWindow {
                    x: unflatten(&r.to_vec(), m)?,
                    ..w.clone()
                })
            })
            .collect()
    };
    let tr = reshape(train)?;
    let va = reshape(validation)?;
    let probe_cfg = TrainConfig {
        epochs: schedule.probe_epochs,
        dropout_rate: 0.0,
        ..cfg.with_seed(cfg.rng_seed.wrapping_add(1000 + round as u64))
    };
    let names = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
    let act = train_classifier(&tr, &[], Target::Activity, &probe_cfg)?;
    let act_f1 = evaluate(&act, &va, Target::Activity, &names(act.output_dim()), None)?.macro_f1;
    let id = train_classifier(&tr, &[], Target::Identity, &probe_cfg)?;
    let id_acc = evaluate(&id, &va, Target::Identity, &names(id.output_dim()), None)?.accuracy;
    Ok(act_f1 - id_acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, NamedPartition, Standardizer};
    use crate::neuralcore::AdamConfig;

    fn reference(m: usize, w: usize) -> ManifestRef {
        ManifestRef {
            window: w,
            channels: (0..m).map(|c| format!("c{c}")).collect(),
            activities: vec![],
            users: vec![],
            partition: NamedPartition::default(),
            standardization: Standardizer::identity(m),
        }
    }

    fn small_arch() -> AaeArchitecture {
        AaeArchitecture {
            encoder_hidden: vec![12, 8],
            latent_dim: 4,
            regularizer_params: 400,
        }
    }

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        }
        .with_seed(seed)
    }

    fn batch(n_users: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let d = generate_synthetic(n_users, 2, 3, 8, 2, 3).unwrap();
        (stack_inputs(&d.windows), stack_users(&d.windows), stack_activity(&d.windows))
    }

    #[test]
    fn single_identity_rejected() {
        assert!(matches!(
            AaeTrainer::new(16, 1, 2, &small_arch(), CompositeWeights::default(), &cfg(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parameter_isolation() {
        let (x, u, y) = batch(3);
        let mut t = AaeTrainer::new(16, 3, 2, &small_arch(), CompositeWeights::default(), &cfg(1)).unwrap();
        let (enc, dec) = (t.encoder().clone(), t.decoder().clone());
        t.adversary_step(x.view(), u.view(), y.view()).unwrap();
        assert_eq!(t.encoder(), &enc);
        assert_eq!(t.decoder(), &dec);
        let adv = t.adversaries().clone();
        t.aae_step(x.view(), u.view(), y.view()).unwrap();
        assert_eq!(t.adversaries(), &adv);
        assert_ne!(t.encoder(), &enc);
    }

    #[test]
    fn reported_loss_matches_components() {
        let (x, u, y) = batch(3);
        let w = CompositeWeights::new(0.7, 1.3, 2.0).unwrap();
        let mut t = AaeTrainer::new(16, 3, 2, &small_arch(), w, &cfg(2)).unwrap();
        for _ in 0..5 {
            t.adversary_step(x.view(), u.view(), y.view()).unwrap();
            let log = t.aae_step(x.view(), u.view(), y.view()).unwrap();
            let recomputed = 0.7 * log.parts.identity - 1.3 * log.parts.activity + 2.0 * log.parts.distortion;
            assert!((log.loss - recomputed).abs() < 1e-9);
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let (x, u, y) = batch(3);
        let t = AaeTrainer::new(16, 3, 2, &small_arch(), CompositeWeights::new(0.5, 1.5, 1.0).unwrap(), &cfg(3)).unwrap();
        let r = gradient_check_aae(
            t.encoder(),
            t.decoder(),
            t.adversaries(),
            x.view(),
            u.view(),
            y.view(),
            CompositeWeights::new(0.5, 1.5, 1.0).unwrap(),
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "max relative error {}", r.max_rel_error);
    }

    fn tiny_run(seed: u64) -> AaeModel {
        let d = generate_synthetic(3, 2, 4, 8, 2, seed).unwrap();
        let schedule = AdversarialSchedule {
            rounds: 3,
            eval_every: 2,
            probe_epochs: 2,
            ..AdversarialSchedule::default()
        };
        let cfg = TrainConfig {
            adam: AdamConfig::default(),
            ..cfg(seed)
        };
        train_aae(
            &d.windows[..18],
            &d.windows[18..],
            CompositeWeights::default(),
            &schedule,
            &small_arch(),
            &cfg,
            reference(2, 8),
            d.vocab.users.clone(),
        )
        .unwrap()
        .0
    }

    #[test]
    fn training_is_deterministic() {
        let a = tiny_run(4);
        let b = tiny_run(4);
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.decoder, b.decoder);
    }

    #[test]
    fn transform_shape_and_bundle_round_trip() {
        let m = tiny_run(5);
        let out = m.transform(&Array2::ones((2, 8))).unwrap();
        assert_eq!(out.dim(), (2, 8));
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(matches!(m.transform(&Array2::ones((2, 9))), Err(Error::Shape(_))));
        let back = AaeModel::from_bytes(&m.to_bytes().unwrap()).unwrap();
        assert_eq!(back.encoder, m.encoder);
        assert_eq!(back.adversaries, m.adversaries);
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.schedule, m.schedule);
    }

    #[test]
    fn compound_requires_matching_manifests() {
        let aae = tiny_run(6);
        let rae = RaeModel {
            net: DenseNet::new(
                16,
                &[LayerSpec::new(4, Activation::Selu), LayerSpec::new(16, Activation::Linear)],
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap(),
            reference: reference(2, 8),
            provenance: serde_json::Value::Null,
        };
        let x = Array2::zeros((2, 8));
        assert_eq!(compound_transform(&rae, &aae, &x).unwrap().dim(), (2, 8));
        let mut other = rae.clone();
        other.reference.standardization.mean[0] = 1.0;
        assert!(matches!(compound_transform(&other, &aae, &x), Err(Error::Config(_))));
    }
}
