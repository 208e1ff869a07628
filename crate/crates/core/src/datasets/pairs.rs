use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::window::{LabeledWindow, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Required,
    Sensitive,
    Neutral,
}

/// Required / sensitive / neutral assignment of activity ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InferencePartition {
    pub required: BTreeSet<usize>,
    pub sensitive: BTreeSet<usize>,
    pub neutral: BTreeSet<usize>,
}

/// The same partition written with label names, as stored in manifests.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NamedPartition {
    pub required: Vec<String>,
    pub sensitive: Vec<String>,
    pub neutral: Vec<String>,
}

impl NamedPartition {
    /// Resolves names against the vocabulary; every activity must be assigned.
    pub fn resolve(&self, vocab: &Vocab) -> Result<InferencePartition> {
        let ids = |names: &[String]| names.iter().map(|n| vocab.activity_index(n)).collect::<Result<BTreeSet<_>>>();
        let p = InferencePartition {
            required: ids(&self.required)?,
            sensitive: ids(&self.sensitive)?,
            neutral: ids(&self.neutral)?,
        };
        p.validate(vocab.activities.len())?;
        if let Some(missing) = (0..vocab.activities.len()).find(|a| p.category(*a).is_none()) {
            return Err(Error::Config(format!(
                "activity `{}` is not assigned to required, sensitive or neutral",
                vocab.activities[missing]
            )));
        }
        Ok(p)
    }
}

impl InferencePartition {
    pub fn validate(&self, n_activities: usize) -> Result<()> {
        let sets = [&self.required, &self.sensitive, &self.neutral];
        for (i, a) in sets.iter().enumerate() {
            if let Some(bad) = a.iter().find(|&&x| x >= n_activities) {
                return Err(Error::Config(format!("activity id {bad} out of range")));
            }
            for b in &sets[i + 1..] {
                if let Some(x) = a.intersection(b).next() {
                    return Err(Error::Config(format!("activity id {x} assigned to more than one category")));
                }
            }
        }
        Ok(())
    }

    pub fn category(&self, activity: usize) -> Option<Category> {
        if self.required.contains(&activity) {
            Some(Category::Required)
        } else if self.sensitive.contains(&activity) {
            Some(Category::Sensitive)
        } else if self.neutral.contains(&activity) {
            Some(Category::Neutral)
        } else {
            None
        }
    }
}

/// Training pair for the replacement autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementPair {
    pub input: LabeledWindow,
    pub target: Array2<f64>,
    /// Index (into the input slice) of the neutral window whose data became the target.
    pub donor: Option<usize>,
}

/// Copies every window as its own target, except sensitive ones, whose target
/// is a uniformly drawn neutral window (same user when the user has one).
pub fn build_replacement_pairs(windows: &[LabeledWindow], partition: &InferencePartition, seed: u64) -> Result<Vec<ReplacementPair>> {
    let mut neutral_all = Vec::new();
    let mut any_sensitive = false;
    for (i, w) in windows.iter().enumerate() {
        match partition.category(w.activity) {
            Some(Category::Neutral) => neutral_all.push(i),
            Some(Category::Sensitive) => any_sensitive = true,
            Some(Category::Required) => {}
            None => return Err(Error::Config(format!("activity id {} is not in the partition", w.activity))),
        }
    }
    if any_sensitive && neutral_all.is_empty() {
        return Err(Error::Config("sensitive windows present but no neutral window to replace them with".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    windows
        .iter()
        .map(|w| {
            if partition.category(w.activity) != Some(Category::Sensitive) {
                return Ok(ReplacementPair {
                    input: w.clone(),
                    target: w.x.clone(),
                    donor: None,
                });
            }
            let same_user: Vec<usize> = neutral_all.iter().copied().filter(|&i| windows[i].user_id == w.user_id).collect();
            let pool = if same_user.is_empty() { &neutral_all } else { &same_user };
            let donor = pool[rng.random_range(0..pool.len())];
            if windows[donor].x.dim() != w.x.dim() {
                return Err(Error::Shape("neutral donor has a different window shape".into()));
            }
            Ok(ReplacementPair {
                input: w.clone(),
                target: windows[donor].x.clone(),
                donor: Some(donor),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win(activity: usize, user: &str, v: f64) -> LabeledWindow {
        LabeledWindow {
            x: Array2::from_elem((2, 3), v),
            activity,
            n_activities: 3,
            user: 0,
            n_users: 2,
            user_id: user.into(),
            trial_id: "t1".into(),
        }
    }

    fn partition() -> InferencePartition {
        InferencePartition {
            required: [0].into(),
            sensitive: [1].into(),
            neutral: [2].into(),
        }
    }

    #[test]
    fn all_neutral_is_identity() {
        let w: Vec<_> = (0..4).map(|i| win(2, "u1", i as f64)).collect();
        let pairs = build_replacement_pairs(&w, &partition(), 0).unwrap();
        assert!(pairs.iter().zip(&w).all(|(p, w)| p.target == w.x && p.donor.is_none()));
    }

    #[test]
    fn single_neutral_is_forced() {
        let w = vec![win(1, "u1", 5.0), win(2, "u1", 9.0)];
        let pairs = build_replacement_pairs(&w, &partition(), 3).unwrap();
        assert_eq!(pairs[0].target, w[1].x);
        assert_eq!(pairs[0].donor, Some(1));
        assert_eq!(pairs[1].target, w[1].x);
    }

    #[test]
    fn prefers_same_user_donor() {
        let w = vec![win(1, "u1", 1.0), win(2, "u2", 2.0), win(2, "u1", 3.0), win(2, "u2", 4.0)];
        for seed in 0..20 {
            let pairs = build_replacement_pairs(&w, &partition(), seed).unwrap();
            assert_eq!(pairs[0].donor, Some(2));
        }
        let w = vec![win(1, "u3", 1.0), win(2, "u2", 2.0), win(2, "u1", 3.0)];
        let donors: BTreeSet<_> = (0..30)
            .map(|s| build_replacement_pairs(&w, &partition(), s).unwrap()[0].donor.unwrap())
            .collect();
        assert_eq!(donors, [1, 2].into());
    }

    #[test]
    fn deterministic_for_seed() {
        let w: Vec<_> = (0..20).map(|i| win(1 + (i % 2), "u1", i as f64)).collect();
        assert_eq!(
            build_replacement_pairs(&w, &partition(), 8).unwrap(),
            build_replacement_pairs(&w, &partition(), 8).unwrap()
        );
    }

    #[test]
    fn sensitive_without_neutral_fails() {
        let w = vec![win(1, "u1", 0.0), win(0, "u1", 1.0)];
        assert!(matches!(build_replacement_pairs(&w, &partition(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn targets_never_come_from_sensitive_windows() {
        let w: Vec<_> = (0..30).map(|i| win(i % 3, if i % 2 == 0 { "u1" } else { "u2" }, i as f64)).collect();
        let pairs = build_replacement_pairs(&w, &partition(), 1).unwrap();
        for p in &pairs {
            if let Some(d) = p.donor {
                assert_eq!(partition().category(w[d].activity), Some(Category::Neutral));
            } else {
                assert_ne!(partition().category(p.input.activity), Some(Category::Sensitive));
            }
        }
    }

    #[test]
    fn overlapping_partition_rejected() {
        let p = InferencePartition {
            required: [0, 1].into(),
            sensitive: [1].into(),
            neutral: [2].into(),
        };
        assert!(p.validate(3).is_err());
    }

    #[test]
    fn named_partition_requires_full_assignment() {
        let vocab = Vocab {
            activities: vec!["walk".into(), "jog".into(), "stand".into()],
            users: vec![],
        };
        let named = NamedPartition {
            required: vec!["walk".into()],
            sensitive: vec!["jog".into()],
            neutral: vec![],
        };
        assert!(matches!(named.resolve(&vocab), Err(Error::Config(_))));
        let named = NamedPartition {
            neutral: vec!["stand".into()],
            ..named
        };
        assert_eq!(named.resolve(&vocab).unwrap(), partition());
        let bad = NamedPartition {
            sensitive: vec!["swim".into()],
            ..named
        };
        assert!(matches!(bad.resolve(&vocab), Err(Error::Label(_))));
    }
}
