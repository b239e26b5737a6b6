//! Hierarchy-aware multi-label classification for chest radiograph labels.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`hierarchy`]: the label forest (parents, root paths) loaded from a
//!   plain-text config. The CheXpert default ships with the crate.
//! - [`policy`]: uncertainty-label handling (U-Ignore, U-Zeros, U-Ones and
//!   the label-smoothed variants).
//! - [`data`]: CheXpert-style CSV ingestion, the conditional training subset
//!   and a synthetic generator with a known Bayes-optimal scorer.
//! - [`model`]: a small MLP with sigmoid heads, masked binary cross-entropy,
//!   Adam, and the conditional-then-frozen two-phase training procedure.
//! - [`infer`]: conditional to unconditional probabilities, test-time
//!   augmentation and ensembling.
//! - [`eval`]: ROC/AUC, mean AUC over a label subset, reader operating-point
//!   comparison and the ablation harness.
//! - [`preprocess`]: rescale, template-matching crop, intensity normalization.
//! - [`cli`]: the `hiercxr` command line front end.

pub mod cli;
pub mod data;
pub mod eval;
pub mod hierarchy;
pub mod infer;
pub mod model;
pub mod policy;
pub mod preprocess;
pub mod seed;

pub use data::{Dataset, GroundTruthModel, Sample, SampleInput};
pub use eval::{AucReport, RocCurve};
pub use hierarchy::LabelHierarchy;
pub use infer::UnconditionalPrediction;
pub use model::{ModelParams, Prediction, TrainConfig};
pub use policy::{LabelPolicy, MappedTargets, PolicyKind, RawLabel};
pub use preprocess::{GrayImage, PreprocessConfig};

/// The five labels scored by the CheXpert competition.
pub const COMPETITION_LABELS: [&str; 5] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Pleural Effusion",
];
