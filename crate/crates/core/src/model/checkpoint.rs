//! Checkpoint files.
//!
//! A checkpoint is a UTF-8 JSON document. Weights are stored as flat arrays
//! per layer (row-major `outputs x inputs`, then bias) in forward order.
//! Every float is written as the shortest decimal that parses back to the
//! identical `f64`, so save/load is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ArchConfig, ModelError, ModelParams, TrainConfig};
use crate::hierarchy::LabelHierarchy;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("invalid checkpoint weights: {0}")]
    Weights(#[from] ModelError),
    #[error("checkpoint labels do not match the hierarchy")]
    Labels,
}

/// How the model was trained, which decides how its outputs are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    /// Outputs are conditional on the parent being positive.
    TwoPhase,
    /// Outputs are direct per-label probabilities.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub toolkit_version: String,
    pub training: TrainingMode,
    pub input_dim: usize,
    pub architecture: ArchConfig,
    pub labels: Vec<String>,
    pub hierarchy_digest: String,
    pub policy: String,
    pub seed: u64,
    pub train_config: TrainConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        training: TrainingMode,
        arch: &ArchConfig,
        h: &LabelHierarchy,
        policy: String,
        cfg: &TrainConfig,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            training,
            input_dim: params.input_dim(),
            architecture: arch.clone(),
            labels: h.labels().to_vec(),
            hierarchy_digest: h.digest(),
            policy,
            seed: cfg.seed,
            train_config: cfg.clone(),
            params,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(ck.format_version));
        }
        ck.params.validate()?;
        if ck.params.output_dim() != ck.labels.len() {
            return Err(CheckpointError::Labels);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Errors unless the checkpoint was trained on this hierarchy.
    pub fn check_hierarchy(&self, h: &LabelHierarchy) -> Result<(), CheckpointError> {
        if self.labels.as_slice() != h.labels() {
            return Err(CheckpointError::Labels);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use proptest::prelude::*;

    fn ck_with(weights: Vec<f64>) -> Checkpoint {
        let n = weights.len();
        let params = ModelParams {
            layers: vec![Layer {
                inputs: n,
                outputs: 1,
                activation: crate::model::Activation::Identity,
                weights,
                bias: vec![0.125],
            }],
        };
        let h = LabelHierarchy::flat(&["only"]).unwrap();
        Checkpoint::new(
            params,
            TrainingMode::Flat,
            &ArchConfig { hidden: vec![] },
            &h,
            "u-ones".into(),
            &TrainConfig::default(),
        )
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u64>(), 1..40)) {
            let weights: Vec<f64> = bits
                .iter()
                .map(|&b| f64::from_bits(b))
                .map(|v| if v.is_finite() { v } else { 1.5 })
                .collect();
            let ck = ck_with(weights.clone());
            let back = Checkpoint::from_json(&ck.to_json()).unwrap();
            let got: Vec<u64> = back.params.layers[0].weights.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = weights.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn rejects_future_version() {
        let mut ck = ck_with(vec![1.0]);
        ck.format_version = 99;
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json()),
            Err(CheckpointError::Version(99))
        ));
    }

    #[test]
    fn rejects_inconsistent_layers() {
        let mut ck = ck_with(vec![1.0, 2.0]);
        ck.params.layers[0].weights.pop();
        assert!(matches!(
            Checkpoint::from_json(&ck.to_json()),
            Err(CheckpointError::Weights(_))
        ));
    }
}
