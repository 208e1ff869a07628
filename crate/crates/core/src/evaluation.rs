//! Probe classifiers and the measurements reported on raw and transformed
//! data: per-class precision/recall/F1, confusion matrices, grouped macro-F1
//! over required/sensitive/neutral classes, and re-identification accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anonymization::AaeModel;
use crate::datasets::{stack_inputs, InferencePartition, LabeledWindow};
use crate::error::{Error, Result};
use crate::neuralcore::{argmax_rows, fit, Activation, DenseNet, LayerSpec, LossKind, Selection, TrainConfig};
use crate::replacement::RaeModel;

/// Hidden widths of every probe classifier.
pub const PROBE_HIDDEN: [usize; 2] = [256, 128];

/// Which label of a window a classifier predicts. Attributes such as gender
/// are handled as [`Target::Identity`] after relabeling users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Activity,
    Identity,
}

impl Target {
    pub fn class_of(self, w: &LabeledWindow) -> usize {
        match self {
            Target::Activity => w.activity,
            Target::Identity => w.user,
        }
    }

    pub fn n_classes(self, w: &LabeledWindow) -> usize {
        match self {
            Target::Activity => w.n_activities,
            Target::Identity => w.n_users,
        }
    }

    fn one_hot(self, windows: &[LabeledWindow]) -> ndarray::Array2<f64> {
        match self {
            Target::Activity => crate::datasets::stack_activity(windows),
            Target::Identity => crate::datasets::stack_users(windows),
        }
    }
}

/// Rows are true labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self { counts: vec![vec![0; n]; n] }
    }

    pub fn from_pairs(n: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        let mut m = Self::new(n);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n || p >= n {
                return Err(Error::Config(format!("label {} outside {n} classes", t.max(p))));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.n_classes()).map(|c| self.counts[c][c]).sum()
    }

    /// Fraction of windows of `from` classes predicted as any `to` class.
    pub fn mass_moved(&self, from: &[usize], to: &[usize]) -> f64 {
        let support: u64 = from.iter().map(|&c| self.support(c)).sum();
        let moved: u64 = from.iter().flat_map(|&f| to.iter().map(move |&t| (f, t))).map(|(f, t)| self.counts[f][t]).sum();
        ratio(moved, support)
    }

    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for l in labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in labels.iter().zip(&self.counts) {
            out.push_str(l);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Unweighted mean F1 over each group of the inference partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupF1 {
    pub required: Option<f64>,
    pub sensitive: Option<f64>,
    pub neutral: Option<f64>,
    /// Fraction of sensitive windows predicted as a neutral class.
    pub sensitive_to_neutral: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: Target,
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub groups: Option<GroupF1>,
    pub confusion: ConfusionMatrix,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_confusion(target: Target, confusion: ConfusionMatrix, labels: &[String], partition: Option<&InferencePartition>) -> Result<Self> {
        let n = confusion.n_classes();
        if labels.len() != n {
            return Err(Error::Config(format!("{} labels for {n} classes", labels.len())));
        }
        let classes: Vec<ClassMetrics> = (0..n)
            .map(|c| {
                let tp = confusion.counts[c][c];
                let precision = ratio(tp, confusion.predicted(c));
                let recall = ratio(tp, confusion.support(c));
                ClassMetrics {
                    label: labels[c].clone(),
                    precision,
                    recall,
                    f1: f1_score(precision, recall),
                    support: confusion.support(c),
                }
            })
            .collect();
        let mean_f1 = |ids: &mut dyn Iterator<Item = usize>| {
            let v: Vec<f64> = ids.map(|c| classes[c].f1).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let groups = match partition {
            Some(p) => {
                p.validate(n)?;
                let sensitive: Vec<usize> = p.sensitive.iter().copied().collect();
                let neutral: Vec<usize> = p.neutral.iter().copied().collect();
                let s_support: u64 = sensitive.iter().map(|&c| confusion.support(c)).sum();
                Some(GroupF1 {
                    required: mean_f1(&mut p.required.iter().copied()),
                    sensitive: mean_f1(&mut sensitive.iter().copied()),
                    neutral: mean_f1(&mut neutral.iter().copied()),
                    sensitive_to_neutral: (s_support > 0).then(|| confusion.mass_moved(&sensitive, &neutral)),
                })
            }
            None => None,
        };
        Ok(Self {
            target,
            accuracy: ratio(confusion.correct(), confusion.total()),
            macro_f1: mean_f1(&mut (0..n)).unwrap_or(0.0),
            classes,
            groups,
            confusion,
            metadata: BTreeMap::new(),
        })
    }

    pub fn recall_of(&self, label: &str) -> Option<f64> {
        self.classes.iter().find(|c| c.label == label).map(|c| c.recall)
    }

    /// Flat `metric -> value` view with stable key names.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("accuracy".into(), self.accuracy);
        m.insert("macro_f1".into(), self.macro_f1);
        for c in &self.classes {
            m.insert(format!("precision/{}", c.label), c.precision);
            m.insert(format!("recall/{}", c.label), c.recall);
            m.insert(format!("f1/{}", c.label), c.f1);
        }
        if let Some(g) = &self.groups {
            for (k, v) in [
                ("macro_f1/required", g.required),
                ("macro_f1/sensitive", g.sensitive),
                ("macro_f1/neutral", g.neutral),
                ("sensitive_to_neutral", g.sensitive_to_neutral),
            ] {
                if let Some(v) = v {
                    m.insert(k.into(), v);
                }
            }
        }
        m
    }
}

fn check_labels(windows: &[LabeledWindow], target: Target, n: usize) -> Result<()> {
    for w in windows {
        if target.n_classes(w) != n || target.class_of(w) >= n {
            return Err(Error::Config(format!(
                "window of user `{}` has {:?} label {} of {}, classifier has {n} classes",
                w.user_id,
                target,
                target.class_of(w),
                target.n_classes(w)
            )));
        }
    }
    Ok(())
}

/// Dense softmax probe `M*W -> 256 -> 128 -> C` trained by cross-entropy,
/// keeping the epoch with the best validation accuracy.
pub fn train_classifier(train: &[LabeledWindow], validation: &[LabeledWindow], target: Target, cfg: &TrainConfig) -> Result<DenseNet> {
    let first = train
        .first()
        .ok_or_else(|| Error::Precondition("no training windows for the classifier".into()))?;
    let n = target.n_classes(first);
    check_labels(train, target, n)?;
    check_labels(validation, target, n)?;
    let distinct: std::collections::BTreeSet<usize> = train.iter().map(|w| target.class_of(w)).collect();
    if distinct.len() < 2 {
        return Err(Error::Config(format!("{target:?} classifier needs at least two classes in the training data")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let specs = [
        LayerSpec::new(PROBE_HIDDEN[0], Activation::Selu),
        LayerSpec::new(PROBE_HIDDEN[1], Activation::Selu),
        LayerSpec::new(n, Activation::Softmax),
    ];
    let mut net = DenseNet::new(first.x.len(), &specs, &mut rng)?;
    let x = stack_inputs(train);
    let y = target.one_hot(train);
    let val = (!validation.is_empty()).then(|| (stack_inputs(validation), target.one_hot(validation)));
    fit(
        &mut net,
        x.view(),
        y.view(),
        LossKind::CategoricalCrossEntropy,
        cfg,
        val.as_ref().map(|(a, b)| (a.view(), b.view())),
        Selection::MaxAccuracy,
    )?;
    Ok(net)
}

pub fn predict_classes(classifier: &DenseNet, windows: &[LabeledWindow]) -> Result<Vec<usize>> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    Ok(argmax_rows(classifier.predict(stack_inputs(windows).view())?.view()))
}

/// Scores `classifier` on `windows`; `labels` name the classifier's outputs.
pub fn evaluate(
    classifier: &DenseNet,
    windows: &[LabeledWindow],
    target: Target,
    labels: &[String],
    partition: Option<&InferencePartition>,
) -> Result<EvalReport> {
    let n = classifier.output_dim();
    if labels.len() != n {
        return Err(Error::Config(format!("classifier has {n} outputs but {} labels were given", labels.len())));
    }
    check_labels(windows, target, n)?;
    let pred = predict_classes(classifier, windows)?;
    let truth: Vec<usize> = windows.iter().map(|w| target.class_of(w)).collect();
    EvalReport::from_confusion(target, ConfusionMatrix::from_pairs(n, &truth, &pred)?, labels, partition)
}

/// Identity accuracy of a classifier trained on raw data when fed transformed windows.
pub fn reidentification_attack(classifier: &DenseNet, windows: &[LabeledWindow], users: &[String]) -> Result<EvalReport> {
    if let Some(w) = windows
        .iter()
        .find(|w| !users.contains(&w.user_id) || w.user >= users.len() || users[w.user] != w.user_id)
    {
        return Err(Error::Config(format!("user `{}` is unknown to the identity classifier", w.user_id)));
    }
    evaluate(classifier, windows, Target::Identity, users, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub activity: EvalReport,
    pub attribute: EvalReport,
}

/// Reports on raw `X`, replaced `X'` and anonymized `X''`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompoundReport {
    pub stages: Vec<StageReport>,
}

impl CompoundReport {
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for s in &self.stages {
            for (k, v) in s.activity.metrics() {
                m.insert(format!("{}/activity/{k}", s.stage), v);
            }
            for (k, v) in s.attribute.metrics() {
                m.insert(format!("{}/attribute/{k}", s.stage), v);
            }
        }
        m
    }
}

/// Runs `X -> RAE -> AAE` on `windows` and evaluates every stage with fixed
/// classifiers. The windows' identity labels must already carry the classes
/// the attribute classifier predicts (e.g. relabeled to gender).
#[allow(clippy::too_many_arguments)]
pub fn compound_report(
    rae: &RaeModel,
    aae: &AaeModel,
    windows: &[LabeledWindow],
    activity_classifier: &DenseNet,
    attribute_classifier: &DenseNet,
    activity_labels: &[String],
    attribute_labels: &[String],
    partition: &InferencePartition,
) -> Result<CompoundReport> {
    rae.reference.ensure_compatible(&aae.reference)?;
    let x1 = rae.transform_windows(windows)?;
    let x2 = aae.transform_windows(&x1)?;
    let stages = [("X", windows), ("X'", &x1[..]), ("X''", &x2[..])]
        .into_iter()
        .map(|(stage, data)| {
            Ok(StageReport {
                stage: stage.to_string(),
                activity: evaluate(activity_classifier, data, Target::Activity, activity_labels, Some(partition))?,
                attribute: evaluate(attribute_classifier, data, Target::Identity, attribute_labels, None)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompoundReport { stages })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, split, SplitStrategy, Standardizer};
    use crate::neuralcore::AdamConfig;
    use proptest::prelude::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    /// Recomputes per-class F1 from raw (truth, prediction) pairs without the matrix.
    fn f1_by_counting(truth: &[usize], pred: &[usize], c: usize) -> f64 {
        let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
        let fneg = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        }
    }

    #[test]
    fn perfect_predictions() {
        let t = [0, 1, 2, 1, 0];
        let r = EvalReport::from_confusion(Target::Activity, ConfusionMatrix::from_pairs(3, &t, &t).unwrap(), &labels(3), None).unwrap();
        assert!(r.classes.iter().all(|c| c.f1 == 1.0));
        assert_eq!(r.accuracy, 1.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r.confusion.counts[i][j] > 0, i == j);
            }
        }
    }

    #[test]
    fn constant_predictor_on_balanced_pair() {
        let t = [0, 0, 1, 1];
        let p = [0, 0, 0, 0];
        let r = EvalReport::from_confusion(Target::Activity, ConfusionMatrix::from_pairs(2, &t, &p).unwrap(), &labels(2), None).unwrap();
        assert_eq!(r.classes[0].recall, 1.0);
        assert_eq!(r.classes[1].recall, 0.0);
        assert_eq!(r.classes[1].f1, 0.0);
        assert_eq!(r.accuracy, 0.5);
        // precision 0.5, recall 1
        assert!((r.classes[0].f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn grouped_scores_and_redirection() {
        let partition = InferencePartition {
            required: [0].into(),
            sensitive: [1].into(),
            neutral: [2].into(),
        };
        let t = [0, 0, 1, 1, 1, 1, 2, 2];
        let p = [0, 0, 2, 2, 2, 0, 2, 2];
        let r = EvalReport::from_confusion(Target::Activity, ConfusionMatrix::from_pairs(3, &t, &p).unwrap(), &labels(3), Some(&partition)).unwrap();
        let g = r.groups.clone().unwrap();
        assert_eq!(g.sensitive, Some(0.0));
        assert_eq!(g.sensitive_to_neutral, Some(0.75));
        assert!(r.metrics().contains_key("macro_f1/required"));
    }

    #[test]
    fn confusion_csv_layout() {
        let m = ConfusionMatrix::from_pairs(2, &[0, 1, 1], &[0, 0, 1]).unwrap();
        assert_eq!(m.to_csv(&labels(2)), "true\\pred,c0,c1\nc0,1,0\nc1,1,1\n");
    }

    proptest! {
        #[test]
        fn confusion_totals_and_f1_recompute(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80)) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = ConfusionMatrix::from_pairs(4, &t, &p).unwrap();
            prop_assert_eq!(m.total() as usize, t.len());
            for c in 0..4 {
                prop_assert_eq!(m.support(c) as usize, t.iter().filter(|&&x| x == c).count());
            }
            let r = EvalReport::from_confusion(Target::Activity, m, &labels(4), None).unwrap();
            for c in 0..4 {
                prop_assert!((r.classes[c].f1 - f1_by_counting(&t, &p, c)).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&r.classes[c].f1));
            }
        }
    }

    fn probe_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            adam: AdamConfig::default(),
            ..TrainConfig::default()
        }
        .with_seed(seed)
    }

    #[test]
    fn separable_activities_are_learned() {
        let d = generate_synthetic(3, 4, 20, 32, 2, 5).unwrap();
        let s = split(&d.windows, &SplitStrategy::trial(["u1", "u2", "u3"], "t3", 0.2), 0).unwrap();
        let st = Standardizer::fit(&s.train).unwrap();
        let (train, validation, test) = (
            st.apply_all(&s.train).unwrap(),
            st.apply_all(&s.validation).unwrap(),
            st.apply_all(&s.test).unwrap(),
        );
        let cfg = TrainConfig { epochs: 30, ..probe_cfg(1) };
        let clf = train_classifier(&train, &validation, Target::Activity, &cfg).unwrap();
        let r = evaluate(&clf, &test, Target::Activity, &d.vocab.activities, None).unwrap();
        assert!(r.accuracy >= 0.95, "accuracy {}", r.accuracy);
        let again = train_classifier(&train, &validation, Target::Activity, &cfg).unwrap();
        assert_eq!(clf, again);
    }

    #[test]
    fn single_class_rejected() {
        let d = generate_synthetic(2, 1, 4, 8, 1, 0).unwrap();
        assert!(matches!(
            train_classifier(&d.windows, &[], Target::Activity, &probe_cfg(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attack_rejects_unknown_user() {
        let d = generate_synthetic(2, 2, 4, 8, 1, 0).unwrap();
        let clf = train_classifier(&d.windows, &[], Target::Identity, &probe_cfg(0)).unwrap();
        let mut stranger = d.windows[0].clone();
        stranger.user_id = "u9".into();
        assert!(matches!(reidentification_attack(&clf, &[stranger], &d.vocab.users), Err(Error::Config(_))));
        let raw = reidentification_attack(&clf, &d.windows, &d.vocab.users).unwrap();
        let direct = evaluate(&clf, &d.windows, Target::Identity, &d.vocab.users, None).unwrap();
        assert_eq!(raw.accuracy, direct.accuracy);
    }

    #[test]
    fn label_count_mismatch_is_config_error() {
        let d = generate_synthetic(2, 2, 4, 8, 1, 0).unwrap();
        let clf = train_classifier(&d.windows, &[], Target::Activity, &probe_cfg(0)).unwrap();
        assert!(matches!(evaluate(&clf, &d.windows, Target::Activity, &labels(3), None), Err(Error::Config(_))));
    }
}
