//! Synthetic image-like datasets and the three stream generators: disjoint
//! class-incremental (CIL), and repetition streams with uniform (EFCIR-U) or
//! Beta-distributed (EFCIR-B) per-class repetition probabilities.

mod dataset;
mod manifest;
mod scenario;

pub use dataset::{gen_synthetic_dataset, split_holdout, ClassPools, DataSplit, DatasetSpec, LabeledDataset};
pub use manifest::{format_probability, parse_probability, Manifest, ScenarioSummary};
pub use scenario::{
    gen_cil, gen_efcir, sample_beta_probs, uniform_probs, BetaParams, EfcirParams, Scenario,
    ScenarioKind, StreamTask,
};
