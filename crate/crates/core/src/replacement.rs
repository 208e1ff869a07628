//! Replacement autoencoder: a dense autoencoder trained on pairs whose
//! sensitive inputs are mapped to neutral targets, so that at inference
//! sensitive windows come out looking neutral and everything else passes
//! through with little distortion.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{unflatten, LabeledWindow, ManifestRef, ReplacementPair};
use crate::error::{Error, Result};
use crate::neuralcore::serialize::{read_bundle, write_atomic, write_bundle};
use crate::neuralcore::{fit, mse, Activation, DenseNet, FitReport, LayerSpec, LossKind, Selection, TrainConfig};

/// Smallest width of any hidden layer.
pub const MIN_HIDDEN: usize = 4;

/// Layer widths of the autoencoder, including the final `M*W` output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaeArchitecture {
    pub layers: Vec<usize>,
}

impl RaeArchitecture {
    /// `inp, inp/2, inp/8, inp/16, inp/8, inp/2, inp`, hidden widths clamped to [`MIN_HIDDEN`].
    pub fn standard(input_dim: usize) -> Self {
        let h = |d: usize| (input_dim / d).max(MIN_HIDDEN);
        Self {
            layers: vec![input_dim.max(MIN_HIDDEN), h(2), h(8), h(16), h(8), h(2), input_dim],
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.layers.iter().copied().min().unwrap_or(0)
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.layers.last() != Some(&input_dim) {
            return Err(Error::Config(format!("last layer must have {input_dim} units")));
        }
        if self.layers[..self.layers.len() - 1].iter().min().is_none_or(|&b| b >= input_dim) {
            return Err(Error::Config(format!("no bottleneck narrower than the {input_dim}-wide input")));
        }
        Ok(())
    }

    fn specs(&self) -> Vec<LayerSpec> {
        let n = self.layers.len();
        self.layers
            .iter()
            .enumerate()
            .map(|(k, &u)| LayerSpec::new(u, if k + 1 == n { Activation::Linear } else { Activation::Selu }))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RaeModel {
    pub net: DenseNet,
    pub reference: ManifestRef,
    /// Free-form record of the run that produced the model.
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct RaeMeta {
    kind: String,
    reference: ManifestRef,
    provenance: serde_json::Value,
}

const KIND: &str = "rae";

fn stack_pairs(pairs: &[ReplacementPair]) -> (Array2<f64>, Array2<f64>) {
    let d = pairs[0].target.len();
    let mut x = Array2::zeros((pairs.len(), d));
    let mut y = Array2::zeros((pairs.len(), d));
    for (i, p) in pairs.iter().enumerate() {
        x.row_mut(i).iter_mut().zip(p.input.x.iter()).for_each(|(o, v)| *o = *v);
        y.row_mut(i).iter_mut().zip(p.target.iter()).for_each(|(o, v)| *o = *v);
    }
    (x, y)
}

/// Fits the autoencoder by MSE between its output and each pair's target,
/// keeping the epoch with the lowest validation MSE (the last epoch when
/// `validation` is empty).
pub fn train_rae(
    pairs: &[ReplacementPair],
    validation: &[ReplacementPair],
    arch: &RaeArchitecture,
    cfg: &TrainConfig,
    reference: ManifestRef,
) -> Result<(RaeModel, FitReport)> {
    let first = pairs.first().ok_or_else(|| Error::Precondition("no replacement pairs to train on".into()))?;
    let d = first.input.x.len();
    if d != reference.input_dim() {
        return Err(Error::Shape(format!("windows have {d} values, manifest expects {}", reference.input_dim())));
    }
    if pairs.iter().chain(validation).any(|p| p.input.x.len() != d || p.target.len() != d) {
        return Err(Error::Shape("replacement pairs disagree on window size".into()));
    }
    arch.validate(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut net = DenseNet::new(d, &arch.specs(), &mut rng)?;
    let (x, y) = stack_pairs(pairs);
    let val = (!validation.is_empty()).then(|| stack_pairs(validation));
    let report = fit(
        &mut net,
        x.view(),
        y.view(),
        LossKind::Mse,
        cfg,
        val.as_ref().map(|(vx, vy)| (vx.view(), vy.view())),
        Selection::MinLoss,
    )?;
    Ok((
        RaeModel {
            net,
            reference,
            provenance: serde_json::Value::Null,
        },
        report,
    ))
}

impl RaeModel {
    /// `X' = R(X)` for one standardized `M x W` window.
    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let m = self.reference.channels.len();
        if x.dim() != (m, self.reference.window) {
            return Err(Error::Shape(format!("window is {:?}, model expects ({m}, {})", x.dim(), self.reference.window)));
        }
        let row = Array2::from_shape_vec((1, x.len()), x.iter().copied().collect()).expect("length matches");
        let out = self.net.predict(row.view())?;
        unflatten(out.as_slice().expect("contiguous"), m)
    }

    /// Transforms a batch of windows, keeping their labels.
    pub fn transform_windows(&self, windows: &[LabeledWindow]) -> Result<Vec<LabeledWindow>> {
        transform_batch(&self.net, &self.reference, windows)
    }

    /// Mean per-window MSE between inputs and their reconstructions.
    pub fn reconstruction_errors(&self, windows: &[LabeledWindow]) -> Result<Vec<f64>> {
        let out = self.transform_windows(windows)?;
        windows.iter().zip(&out).map(|(a, b)| Ok(mse(a.x.view(), b.x.view())?.0)).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_value(RaeMeta {
            kind: KIND.into(),
            reference: self.reference.clone(),
            provenance: self.provenance.clone(),
        })?;
        let mut buf = Vec::new();
        write_bundle(&meta, &[&self.net], &mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, mut nets) = read_bundle(&mut &bytes[..])?;
        let meta: RaeMeta = serde_json::from_value(meta)?;
        if meta.kind != KIND || nets.len() != 1 {
            return Err(Error::Format(format!(
                "expected an RAE bundle, found `{}` with {} networks",
                meta.kind,
                nets.len()
            )));
        }
        let net = nets.pop().expect("one network");
        if net.input_dim() != meta.reference.input_dim() || net.output_dim() != meta.reference.input_dim() {
            return Err(Error::Format("network size does not match its manifest reference".into()));
        }
        Ok(Self {
            net,
            reference: meta.reference,
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

/// Applies `net` to every window (flattened channel-major) and reshapes back.
pub(crate) fn transform_batch(net: &DenseNet, reference: &ManifestRef, windows: &[LabeledWindow]) -> Result<Vec<LabeledWindow>> {
    let m = reference.channels.len();
    let expected = (m, reference.window);
    if let Some(w) = windows.iter().find(|w| w.x.dim() != expected) {
        return Err(Error::Shape(format!("window is {:?}, model expects {expected:?}", w.x.dim())));
    }
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let x = crate::datasets::stack_inputs(windows);
    let out = net.predict(x.view())?;
    windows
        .iter()
        .zip(out.axis_iter(Axis(0)))
        .map(|(w, row)| {
            Ok(LabeledWindow {
                x: unflatten(&row.to_vec(), m)?,
                ..w.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{build_replacement_pairs, generate_synthetic, InferencePartition, NamedPartition, Standardizer};

    fn reference(m: usize, w: usize) -> ManifestRef {
        ManifestRef {
            window: w,
            channels: (0..m).map(|c| format!("c{c}")).collect(),
            activities: vec!["a".into()],
            users: vec!["u".into()],
            partition: NamedPartition::default(),
            standardization: Standardizer::identity(m),
        }
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        }
        .with_seed(seed)
    }

    fn identity_pairs(seed: u64) -> Vec<ReplacementPair> {
        let d = generate_synthetic(2, 3, 4, 16, 2, seed).unwrap();
        let all_neutral = InferencePartition {
            neutral: (0..3).collect(),
            ..Default::default()
        };
        build_replacement_pairs(&d.windows, &all_neutral, 0).unwrap()
    }

    #[test]
    fn standard_schedule() {
        assert_eq!(RaeArchitecture::standard(192).layers, vec![192, 96, 24, 12, 24, 96, 192]);
        assert_eq!(RaeArchitecture::standard(16).layers, vec![16, 8, 4, 4, 4, 8, 16]);
        assert_eq!(RaeArchitecture::standard(192).bottleneck(), 12);
    }

    #[test]
    fn no_bottleneck_rejected() {
        let pairs = identity_pairs(0);
        let arch = RaeArchitecture { layers: vec![32, 40, 32] };
        assert!(matches!(train_rae(&pairs, &[], &arch, &quick_cfg(0), reference(2, 16)), Err(Error::Config(_))));
    }

    #[test]
    fn empty_pairs_is_precondition_error() {
        let r = train_rae(&[], &[], &RaeArchitecture::standard(32), &quick_cfg(0), reference(2, 16));
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = identity_pairs(1);
        let arch = RaeArchitecture::standard(32);
        let (a, _) = train_rae(&pairs, &[], &arch, &quick_cfg(4), reference(2, 16)).unwrap();
        let (b, _) = train_rae(&pairs, &[], &arch, &quick_cfg(4), reference(2, 16)).unwrap();
        assert_eq!(a.net.flatten(), b.net.flatten());
    }

    #[test]
    fn zero_window_gives_finite_output() {
        let (model, _) = train_rae(&identity_pairs(2), &[], &RaeArchitecture::standard(32), &quick_cfg(0), reference(2, 16)).unwrap();
        let out = model.transform(&Array2::zeros((2, 16))).unwrap();
        assert_eq!(out.dim(), (2, 16));
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(matches!(model.transform(&Array2::zeros((3, 16))), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_and_single_transform_agree() {
        let pairs = identity_pairs(3);
        let (model, _) = train_rae(&pairs, &[], &RaeArchitecture::standard(32), &quick_cfg(0), reference(2, 16)).unwrap();
        let windows: Vec<LabeledWindow> = pairs.iter().take(5).map(|p| p.input.clone()).collect();
        let batch = model.transform_windows(&windows).unwrap();
        for (w, b) in windows.iter().zip(&batch) {
            let single = model.transform(&w.x).unwrap();
            assert!(single.iter().zip(b.x.iter()).all(|(p, q)| (p - q).abs() < 1e-12));
            assert_eq!(b.activity, w.activity);
        }
    }

    #[test]
    fn bundle_round_trip() {
        let (mut model, _) = train_rae(&identity_pairs(0), &[], &RaeArchitecture::standard(32), &quick_cfg(0), reference(2, 16)).unwrap();
        model.provenance = serde_json::json!({"seed": 0});
        let back = RaeModel::from_bytes(&model.to_bytes().unwrap()).unwrap();
        assert_eq!(back.net, model.net);
        assert_eq!(back.reference, model.reference);
        assert_eq!(back.provenance, model.provenance);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rae");
        model.save(&path).unwrap();
        assert_eq!(RaeModel::load(&path).unwrap().net, model.net);
    }
}
