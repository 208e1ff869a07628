use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::window::LabeledWindow;
use crate::error::{Error, Result};

/// How windows are divided into train and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SplitKind {
    /// Every window of the listed users goes to test.
    Subject { held_out_users: Vec<String> },
    /// For each user, the named trial goes to test.
    Trial { held_out_trial_per_user: BTreeMap<String, String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStrategy {
    #[serde(flatten)]
    pub kind: SplitKind,
    pub validation_fraction: f64,
}

impl SplitStrategy {
    pub fn subject<S: Into<String>>(users: impl IntoIterator<Item = S>, validation_fraction: f64) -> Self {
        Self {
            kind: SplitKind::Subject {
                held_out_users: users.into_iter().map(Into::into).collect(),
            },
            validation_fraction,
        }
    }

    /// Holds out the same trial id for each listed user.
    pub fn trial<S: AsRef<str>>(users: impl IntoIterator<Item = S>, trial: &str, validation_fraction: f64) -> Self {
        Self {
            kind: SplitKind::Trial {
                held_out_trial_per_user: users.into_iter().map(|u| (u.as_ref().to_string(), trial.to_string())).collect(),
            },
            validation_fraction,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<LabeledWindow>,
    pub validation: Vec<LabeledWindow>,
    pub test: Vec<LabeledWindow>,
}

/// Index-level split: positions into the input slice.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(windows: &[LabeledWindow], strategy: &SplitStrategy, seed: u64) -> Result<SplitIndices> {
    if !(0.0..1.0).contains(&strategy.validation_fraction) {
        return Err(Error::Config(format!("validation fraction {} not in [0, 1)", strategy.validation_fraction)));
    }
    let users: BTreeSet<&str> = windows.iter().map(|w| w.user_id.as_str()).collect();
    let is_test: Box<dyn Fn(&LabeledWindow) -> bool> = match &strategy.kind {
        SplitKind::Subject { held_out_users } => {
            for u in held_out_users {
                if !users.contains(u.as_str()) {
                    return Err(Error::Config(format!("held-out user `{u}` has no windows")));
                }
            }
            Box::new(move |w| held_out_users.contains(&w.user_id))
        }
        SplitKind::Trial { held_out_trial_per_user } => {
            for (u, t) in held_out_trial_per_user {
                if !windows.iter().any(|w| w.user_id == *u && w.trial_id == *t) {
                    return Err(Error::Config(format!("user `{u}` has no trial `{t}`")));
                }
            }
            Box::new(move |w| held_out_trial_per_user.get(&w.user_id).is_some_and(|t| *t == w.trial_id))
        }
    };
    let mut out = SplitIndices::default();
    let mut pool = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        if is_test(w) {
            out.test.push(i);
        } else {
            pool.push(i);
        }
    }
    let n_val = (strategy.validation_fraction * pool.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = pool.clone();
    shuffled.shuffle(&mut rng);
    let val: BTreeSet<usize> = shuffled[..n_val].iter().copied().collect();
    for i in pool {
        if val.contains(&i) {
            out.validation.push(i);
        } else {
            out.train.push(i);
        }
    }
    Ok(out)
}

/// Partitions windows into train, validation and test.
pub fn split(windows: &[LabeledWindow], strategy: &SplitStrategy, seed: u64) -> Result<Splits> {
    let idx = split_indices(windows, strategy, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| windows[i].clone()).collect();
    Ok(Splits {
        train: pick(&idx.train),
        validation: pick(&idx.validation),
        test: pick(&idx.test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn windows(users: usize, trials: usize, per: usize) -> Vec<LabeledWindow> {
        let mut out = Vec::new();
        for u in 0..users {
            for t in 0..trials {
                for k in 0..per {
                    out.push(LabeledWindow {
                        x: Array2::from_elem((1, 2), (u * 100 + t * 10 + k) as f64),
                        activity: k % 2,
                        n_activities: 2,
                        user: u,
                        n_users: users,
                        user_id: format!("u{}", u + 1),
                        trial_id: format!("t{}", t + 1),
                    });
                }
            }
        }
        out
    }

    #[test]
    fn subject_split_isolates_user() {
        let w = windows(4, 2, 5);
        let s = split(&w, &SplitStrategy::subject(["u3"], 0.2), 1).unwrap();
        assert!(s.train.iter().chain(&s.validation).all(|w| w.user_id != "u3"));
        assert!(s.test.iter().all(|w| w.user_id == "u3"));
        assert_eq!(s.test.len(), 10);
    }

    #[test]
    fn trial_split_keeps_every_user_in_test() {
        let w = windows(3, 3, 4);
        let s = split(&w, &SplitStrategy::trial(["u1", "u2", "u3"], "t2", 0.2), 1).unwrap();
        for u in ["u1", "u2", "u3"] {
            assert!(s.test.iter().any(|w| w.user_id == u));
            assert!(s.train.iter().any(|w| w.user_id == u));
        }
        assert!(s.test.iter().all(|w| w.trial_id == "t2"));
        assert!(s.train.iter().chain(&s.validation).all(|w| w.trial_id != "t2"));
    }

    #[test]
    fn unknown_user_or_trial_is_config_error() {
        let w = windows(2, 2, 2);
        assert!(matches!(split(&w, &SplitStrategy::subject(["u9"], 0.2), 0), Err(Error::Config(_))));
        assert!(matches!(split(&w, &SplitStrategy::trial(["u1"], "t7", 0.2), 0), Err(Error::Config(_))));
    }

    #[test]
    fn validation_is_seeded() {
        let w = windows(3, 2, 10);
        let st = SplitStrategy::subject(["u1"], 0.2);
        assert_eq!(split_indices(&w, &st, 5).unwrap(), split_indices(&w, &st, 5).unwrap());
        assert_ne!(split_indices(&w, &st, 5).unwrap(), split_indices(&w, &st, 6).unwrap());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(users in 2usize..5, trials in 1usize..4, per in 1usize..8, frac in 0.0f64..0.9, seed in any::<u64>()) {
            let w = windows(users, trials, per);
            let idx = split_indices(&w, &SplitStrategy::subject(["u1"], frac), seed).unwrap();
            let mut all: Vec<usize> = idx.train.iter().chain(&idx.validation).chain(&idx.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..w.len()).collect::<Vec<_>>());
            let pool = idx.train.len() + idx.validation.len();
            let expected = (frac * pool as f64).round() as i64;
            prop_assert!((idx.validation.len() as i64 - expected).abs() <= 1);
        }
    }
}
