use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pairs::{InferencePartition, NamedPartition};
use super::series::{magnitude, CsvSchema, MagnitudeGroup, TimeSeries};
use super::split::SplitStrategy;
use super::window::{extract_windows, LabelRule, LabeledWindow, Standardizer, Vocab};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub pairs: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { split: 1, pairs: 2, train: 3 }
    }
}

/// Everything downstream commands need to interpret a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Raw CSV layout: channel columns, activity label set, sampling rate.
    pub schema: CsvSchema,
    pub users: Vec<String>,
    #[serde(default)]
    pub channel_groups: Vec<MagnitudeGroup>,
    pub partition: NamedPartition,
    pub window: usize,
    pub stride: usize,
    pub eval_stride: usize,
    #[serde(default)]
    pub label_rule: LabelRule,
    pub split: SplitStrategy,
    #[serde(default)]
    pub seeds: Seeds,
    /// Fitted on the training split; `None` until a training command fills it in.
    #[serde(default)]
    pub standardization: Option<Standardizer>,
    /// Optional binary (or multi-class) attribute per user, e.g. gender.
    #[serde(default)]
    pub user_attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub attribute_labels: Vec<String>,
    /// Command, configuration and seeds that produced this manifest.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub provenance: serde_json::Value,
}

/// The subset of a manifest that trained models must agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRef {
    pub window: usize,
    pub channels: Vec<String>,
    pub activities: Vec<String>,
    pub users: Vec<String>,
    pub partition: NamedPartition,
    pub standardization: Standardizer,
}

impl ManifestRef {
    pub fn input_dim(&self) -> usize {
        self.window * self.channels.len()
    }

    /// Fails with a configuration error naming the first differing field.
    pub fn ensure_compatible(&self, other: &ManifestRef) -> Result<()> {
        let field = if self.window != other.window {
            "window"
        } else if self.channels != other.channels {
            "channels"
        } else if self.activities != other.activities {
            "activities"
        } else if self.partition != other.partition {
            "partition"
        } else if self.standardization != other.standardization {
            "standardization"
        } else {
            return Ok(());
        };
        Err(Error::Config(format!("models were built from different manifests ({field} differs)")))
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.eval_stride == 0 {
            return Err(Error::Config("window, stride and eval_stride must be positive".into()));
        }
        if self.schema.labels.is_empty() || self.users.is_empty() {
            return Err(Error::Config("manifest needs at least one label and one user".into()));
        }
        self.partition.resolve(&self.vocab())?;
        for (user, attr) in &self.user_attributes {
            if !self.users.contains(user) {
                return Err(Error::Config(format!("attribute given for unknown user `{user}`")));
            }
            if !self.attribute_labels.contains(attr) {
                return Err(Error::Config(format!("attribute `{attr}` is not in attribute_labels")));
            }
        }
        if let Some(st) = &self.standardization {
            if st.channels() != self.model_channels().len() {
                return Err(Error::Config("standardization channel count does not match the model channels".into()));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            activities: self.schema.labels.clone(),
            users: self.users.clone(),
        }
    }

    pub fn inference_partition(&self) -> Result<InferencePartition> {
        self.partition.resolve(&self.vocab())
    }

    /// Channel names after magnitude groups are collapsed.
    pub fn model_channels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.schema.channels {
            match self.channel_groups.iter().find(|g| g.axes.contains(c)) {
                Some(g) if g.axes[0] == *c => out.push(g.name.clone()),
                Some(_) => {}
                None => out.push(c.clone()),
            }
        }
        out
    }

    pub fn reference(&self) -> Result<ManifestRef> {
        let standardization = self
            .standardization
            .clone()
            .ok_or_else(|| Error::Config("manifest has no standardization statistics".into()))?;
        Ok(ManifestRef {
            window: self.window,
            channels: self.model_channels(),
            activities: self.schema.labels.clone(),
            users: self.users.clone(),
            partition: self.partition.clone(),
            standardization,
        })
    }

    /// Applies magnitude groups and slices windows with the given stride.
    pub fn windows(&self, series: &[TimeSeries], stride: usize) -> Result<Vec<LabeledWindow>> {
        let vocab = self.vocab();
        let mut out = Vec::new();
        for s in series {
            let s = if self.channel_groups.is_empty() {
                s.clone()
            } else {
                magnitude(s, &self.channel_groups)?
            };
            out.extend(extract_windows(&s, self.window, stride, self.label_rule, &vocab)?);
        }
        Ok(out)
    }

    /// Attribute class index for each user index.
    pub fn attribute_per_user(&self) -> Result<Vec<usize>> {
        if self.attribute_labels.len() < 2 {
            return Err(Error::Config("manifest declares no user attribute".into()));
        }
        self.users
            .iter()
            .map(|u| {
                let a = self
                    .user_attributes
                    .get(u)
                    .ok_or_else(|| Error::Config(format!("user `{u}` has no attribute")))?;
                Ok(self.attribute_labels.iter().position(|l| l == a).expect("validated"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        Manifest {
            schema: CsvSchema {
                channels: vec!["ax".into(), "ay".into(), "az".into(), "p".into()],
                labels: vec!["walk".into(), "jog".into(), "sit".into()],
                rate_hz: 50.0,
            },
            users: vec!["u1".into(), "u2".into()],
            channel_groups: vec![MagnitudeGroup {
                name: "acc".into(),
                axes: ["ax".into(), "ay".into(), "az".into()],
            }],
            partition: NamedPartition {
                required: vec!["walk".into()],
                sensitive: vec!["jog".into()],
                neutral: vec!["sit".into()],
            },
            window: 4,
            stride: 2,
            eval_stride: 4,
            label_rule: LabelRule::Pure,
            split: SplitStrategy::subject(["u2"], 0.2),
            seeds: Seeds::default(),
            standardization: None,
            user_attributes: [("u1".to_string(), "f".to_string()), ("u2".to_string(), "m".to_string())].into(),
            attribute_labels: vec!["f".into(), "m".into()],
            provenance: serde_json::Value::Null,
        }
    }

    #[test]
    fn json_round_trip() {
        let m = manifest();
        let back: Manifest = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn model_channels_collapse_groups() {
        assert_eq!(manifest().model_channels(), vec!["acc", "p"]);
    }

    #[test]
    fn unknown_partition_label_rejected() {
        let mut m = manifest();
        m.partition.sensitive = vec!["swim".into()];
        assert!(matches!(m.validate(), Err(Error::Label(l)) if l == "swim"));
    }

    #[test]
    fn reference_requires_standardization() {
        let mut m = manifest();
        assert!(m.reference().is_err());
        m.standardization = Some(Standardizer::identity(2));
        let r = m.reference().unwrap();
        assert_eq!(r.input_dim(), 8);
        let mut other = r.clone();
        other.window = 8;
        assert!(matches!(r.ensure_compatible(&other), Err(Error::Config(_))));
        assert!(r.ensure_compatible(&r.clone()).is_ok());
    }

    #[test]
    fn attributes_resolve_per_user() {
        assert_eq!(manifest().attribute_per_user().unwrap(), vec![0, 1]);
    }
}
