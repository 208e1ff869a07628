//! End-to-end behaviour of the trained transforms on synthetic data.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sveil::anonymization::{train_aae, AaeArchitecture, AaeModel, AdversarialSchedule};
use sveil::baselines::knn_ranks;
use sveil::datasets::{
    build_replacement_pairs, generate, split, InferencePartition, LabeledWindow, ManifestRef, NamedPartition, SplitStrategy, Splits, Standardizer,
    SyntheticConfig,
};
use sveil::evaluation::{evaluate, train_classifier, Target};
use sveil::neuralcore::{CompositeWeights, TrainConfig};
use sveil::replacement::{train_rae, RaeArchitecture, RaeModel};

struct Setup {
    splits: Splits,
    reference: ManifestRef,
    activities: Vec<String>,
    users: Vec<String>,
    cfg: TrainConfig,
}

fn setup(users: usize, activities: usize, windows_per_pair: usize, width: usize, seed: u64) -> Setup {
    let d = generate(&SyntheticConfig {
        n_users: users,
        n_activities: activities,
        windows_per_pair,
        width,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let s = split(&d.windows, &SplitStrategy::trial(&d.vocab.users, "t3", 0.2), seed).unwrap();
    let st = Standardizer::fit(&s.train).unwrap();
    let reference = ManifestRef {
        window: width,
        channels: (1..=d.windows[0].channels()).map(|c| format!("c{c}")).collect(),
        activities: d.vocab.activities.clone(),
        users: d.vocab.users.clone(),
        partition: NamedPartition::default(),
        standardization: st.clone(),
    };
    Setup {
        splits: Splits {
            train: st.apply_all(&s.train).unwrap(),
            validation: st.apply_all(&s.validation).unwrap(),
            test: st.apply_all(&s.test).unwrap(),
        },
        reference,
        activities: d.vocab.activities,
        users: d.vocab.users,
        cfg: TrainConfig {
            epochs: 30,
            batch_size: 32,
            ..TrainConfig::default()
        }
        .with_seed(seed),
    }
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap()
}

fn mean_mse(before: &[LabeledWindow], after: &[LabeledWindow]) -> f64 {
    before.iter().zip(after).map(|(a, b)| mse(&a.x, &b.x)).sum::<f64>() / before.len() as f64
}

fn train_rae_with(s: &Setup, part: &InferencePartition) -> RaeModel {
    let pairs = build_replacement_pairs(&s.splits.train, part, 1).unwrap();
    let vpairs = build_replacement_pairs(&s.splits.validation, part, 2).unwrap();
    train_rae(&pairs, &vpairs, &RaeArchitecture::standard(s.reference.input_dim()), &s.cfg, s.reference.clone())
        .unwrap()
        .0
}

fn four_way() -> InferencePartition {
    InferencePartition {
        required: [0, 1].into(),
        sensitive: [2].into(),
        neutral: [3].into(),
    }
}

#[test]
fn rae_on_identity_pairs_reconstructs() {
    let mut s = setup(4, 4, 40, 64, 11);
    s.cfg.epochs = 60;
    let all_kept = InferencePartition {
        required: [0, 1, 2].into(),
        sensitive: Default::default(),
        neutral: [3].into(),
    };
    let rae = train_rae_with(&s, &all_kept);
    let val = &s.splits.validation;
    let out = rae.transform_windows(val).unwrap();
    let n = (val.len() * val[0].x.len()) as f64;
    let mean = val.iter().map(|w| w.x.sum()).sum::<f64>() / n;
    let variance = val.iter().map(|w| w.x.mapv(|v| (v - mean).powi(2)).sum()).sum::<f64>() / n;
    let err = mean_mse(val, &out);
    assert!(err < 0.1 * variance, "validation MSE {err} vs variance {variance}");
}

#[test]
fn rae_passes_neutral_and_replaces_sensitive() {
    let s = setup(6, 4, 20, 64, 12);
    let part = four_way();
    let rae = train_rae_with(&s, &part);
    let neutral = |w: &[LabeledWindow]| w.iter().filter(|w| part.neutral.contains(&w.activity)).cloned().collect::<Vec<_>>();

    let val = neutral(&s.splits.validation);
    let val_out = rae.transform_windows(&val).unwrap();
    let mut errs: Vec<f64> = val.iter().zip(&val_out).map(|(a, b)| mse(&a.x, &b.x)).collect();
    errs.sort_by(f64::total_cmp);
    let p95 = errs[((errs.len() as f64 * 0.95).ceil() as usize).min(errs.len()) - 1];
    let test = neutral(&s.splits.test);
    let test_out = rae.transform_windows(&test).unwrap();
    let below = test.iter().zip(&test_out).filter(|(a, b)| mse(&a.x, &b.x) <= p95).count() as f64 / test.len() as f64;
    assert!(below >= 0.8, "only {below:.2} of neutral test windows within the validation p95");

    let probe = train_classifier(&s.splits.train, &s.splits.validation, Target::Activity, &s.cfg).unwrap();
    let replaced = rae.transform_windows(&s.splits.test).unwrap();
    let r = evaluate(&probe, &replaced, Target::Activity, &s.activities, Some(&part)).unwrap();
    let g = r.groups.unwrap();
    assert!(g.sensitive.unwrap() <= 0.05, "sensitive macro-F1 {:?}", g.sensitive);
    assert!(g.sensitive_to_neutral.unwrap() >= 0.9, "redirection {:?}", g.sensitive_to_neutral);
    let sensitive: Vec<&LabeledWindow> = replaced.iter().filter(|w| part.sensitive.contains(&w.activity)).collect();
    assert!(!sensitive.is_empty());
}

fn aae(s: &Setup, weights: CompositeWeights) -> AaeModel {
    train_aae(
        &s.splits.train,
        &s.splits.validation,
        weights,
        &AdversarialSchedule::default(),
        &AaeArchitecture::default(),
        &s.cfg,
        s.reference.clone(),
        s.users.clone(),
    )
    .unwrap()
    .0
}

#[test]
fn aae_weight_ablations() {
    let s = setup(6, 4, 20, 64, 13);
    let val = &s.splits.validation;

    // distortion only: a plain autoencoder, comparable to the RAE on identity pairs
    let plain = aae(&s, CompositeWeights::new(0.0, 0.0, 1.0).unwrap());
    let plain_mse = mean_mse(val, &plain.transform_windows(val).unwrap());
    let all_kept = InferencePartition {
        required: [0, 1, 2].into(),
        sensitive: Default::default(),
        neutral: [3].into(),
    };
    let rae = train_rae_with(&s, &all_kept);
    let rae_mse = mean_mse(val, &rae.transform_windows(val).unwrap());
    assert!(plain_mse <= 2.0 * rae_mse.max(0.05), "plain AAE MSE {plain_mse} vs RAE {rae_mse}");

    // distortion-dominant weights keep the output closer than identity-dominant ones
    let close = aae(&s, CompositeWeights::new(0.1, 1.0, 10.0).unwrap());
    let far = aae(&s, CompositeWeights::new(10.0, 1.0, 0.1).unwrap());
    let (close_mse, far_mse) = (mean_mse(val, &close.transform_windows(val).unwrap()), mean_mse(val, &far.transform_windows(val).unwrap()));
    assert!(close_mse < far_mse, "beta_d dominant {close_mse} vs beta_i dominant {far_mse}");
}

#[test]
fn random_noise_ranks_at_chance() {
    let mut means = Vec::new();
    for seed in 0..5 {
        let s = setup(10, 4, 10, 32, 100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<LabeledWindow> = s
            .splits
            .test
            .iter()
            .map(|w| LabeledWindow {
                x: Array2::from_shape_simple_fn(w.x.dim(), || StandardNormal.sample(&mut rng)),
                ..w.clone()
            })
            .collect();
        let ranks = knn_ranks(&noise, &s.splits.test, 10, 1).unwrap();
        means.push(ranks.iter().map(|&(_, r)| r as f64).sum::<f64>() / ranks.len() as f64);
    }
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    assert!((mean - 4.5).abs() <= 1.0, "mean rank {mean} ({means:?})");
}

#[test]
fn utility_weighting_keeps_activity_f1() {
    let (mut biased, mut balanced) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let s = setup(6, 4, 20, 64, 200 + seed);
        let (tr, te) = (&s.splits.train, &s.splits.test);
        let f1 = |m: &AaeModel| {
            let probe = train_classifier(&m.transform_windows(tr).unwrap(), &[], Target::Activity, &s.cfg).unwrap();
            evaluate(&probe, &m.transform_windows(te).unwrap(), Target::Activity, &s.activities, None)
                .unwrap()
                .macro_f1
        };
        biased.push(f1(&aae(&s, CompositeWeights::new(1.0, 2.0, 1.0).unwrap())));
        balanced.push(f1(&aae(&s, CompositeWeights::new(1.0, 1.0, 1.0).unwrap())));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&biased) >= mean(&balanced) - 1e-12, "utility-biased {biased:?} vs balanced {balanced:?}");
}
