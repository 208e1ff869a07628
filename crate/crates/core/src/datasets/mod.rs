//! Sensor data plumbing: CSV ingestion, magnitudes, windowing, splits,
//! replacement pairs and a synthetic multi-user generator.

mod manifest;
mod pairs;
mod series;
mod split;
mod synthetic;
mod window;

pub use manifest::{Manifest, ManifestRef, Seeds};
pub use pairs::{build_replacement_pairs, Category, InferencePartition, NamedPartition, ReplacementPair};
pub use series::{load_csv, magnitude, read_csv, read_header, write_csv, write_csv_with_provenance, CsvSchema, MagnitudeGroup, TimeSeries};
pub use split::{split, split_indices, SplitIndices, SplitKind, SplitStrategy, Splits};
pub use synthetic::{generate, generate_synthetic, SyntheticConfig, SyntheticData};
pub use window::{
    extract_windows, one_hot, relabel_users, stack_activity, stack_inputs, stack_users, unflatten, LabelRule, LabeledWindow, Standardizer, Vocab,
};
