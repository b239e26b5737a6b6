//! Uncertainty-label policies.
//!
//! Raw CheXpert labels are positive (`1`), negative (`0`), uncertain (`-1`)
//! or missing (blank). A [`LabelPolicy`] turns a raw vector into soft
//! training targets plus a per-label loss mask:
//!
//! | policy        | uncertain `-1` becomes            |
//! |---------------|-----------------------------------|
//! | `u-ignore`    | masked out of the loss            |
//! | `u-zeros`     | 0                                 |
//! | `u-ones`      | 1                                 |
//! | `u-zeros-lsr` | `u ~ U(lsr_low, lsr_high)`, near 0 |
//! | `u-ones-lsr`  | `u ~ U(lsr_low, lsr_high)`, near 1 |
//!
//! Certain labels always pass through unchanged with mask 1. Missing labels
//! become negatives with mask 1 unless [`MissingMode::Ignore`] is selected.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::indexed_rng;

/// Target value written for masked entries. Never reaches the loss.
pub const MASKED_SENTINEL: f64 = 0.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid raw label '{0}' (expected 1, 0, -1 or blank)")]
    InvalidRaw(String),
    #[error("unknown policy '{0}' (expected u-ignore, u-zeros, u-ones, u-zeros-lsr, u-ones-lsr)")]
    UnknownPolicy(String),
    #[error("invalid smoothing interval [{low}, {high}]: need 0 <= low <= high <= 1")]
    InvalidInterval { low: f64, high: f64 },
    #[error("unknown missing-label mode '{0}' (expected negative or ignore)")]
    UnknownMissingMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RawLabel {
    Positive,
    Negative,
    Uncertain,
    Missing,
}

impl RawLabel {
    /// Parses a CSV cell: `1.0`, `0.0`, `-1.0` (any numeric spelling of those
    /// values) or an empty cell.
    pub fn parse(cell: &str) -> Result<Self, PolicyError> {
        let cell = cell.trim();
        if cell.is_empty() {
            return Ok(RawLabel::Missing);
        }
        let value: f64 = cell
            .parse()
            .map_err(|_| PolicyError::InvalidRaw(cell.to_string()))?;
        Self::from_value(value).ok_or_else(|| PolicyError::InvalidRaw(cell.to_string()))
    }

    pub fn from_value(value: f64) -> Option<Self> {
        if value == 1.0 {
            Some(RawLabel::Positive)
        } else if value == 0.0 {
            Some(RawLabel::Negative)
        } else if value == -1.0 {
            Some(RawLabel::Uncertain)
        } else {
            None
        }
    }

    /// CheXpert CSV spelling.
    pub fn as_cell(self) -> &'static str {
        match self {
            RawLabel::Positive => "1.0",
            RawLabel::Negative => "0.0",
            RawLabel::Uncertain => "-1.0",
            RawLabel::Missing => "",
        }
    }

    /// `Some(true|false)` for certain labels.
    pub fn certain(self) -> Option<bool> {
        match self {
            RawLabel::Positive => Some(true),
            RawLabel::Negative => Some(false),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "u-ignore")]
    UIgnore,
    #[serde(rename = "u-zeros")]
    UZeros,
    #[serde(rename = "u-ones")]
    UOnes,
    #[serde(rename = "u-zeros-lsr")]
    UZerosLsr,
    #[serde(rename = "u-ones-lsr")]
    UOnesLsr,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::UIgnore,
        PolicyKind::UZeros,
        PolicyKind::UOnes,
        PolicyKind::UZerosLsr,
        PolicyKind::UOnesLsr,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            PolicyKind::UIgnore => "u-ignore",
            PolicyKind::UZeros => "u-zeros",
            PolicyKind::UOnes => "u-ones",
            PolicyKind::UZerosLsr => "u-zeros-lsr",
            PolicyKind::UOnesLsr => "u-ones-lsr",
        }
    }

    /// Display name as used in result tables (`U-Ones+LSR`).
    pub fn display_name(self) -> &'static str {
        match self {
            PolicyKind::UIgnore => "U-Ignore",
            PolicyKind::UZeros => "U-Zeros",
            PolicyKind::UOnes => "U-Ones",
            PolicyKind::UZerosLsr => "U-Zeros+LSR",
            PolicyKind::UOnesLsr => "U-Ones+LSR",
        }
    }

    pub fn is_lsr(self) -> bool {
        matches!(self, PolicyKind::UZerosLsr | PolicyKind::UOnesLsr)
    }

    /// Default smoothing interval; `(0, 0)` for the non-smoothing kinds.
    pub fn default_interval(self) -> (f64, f64) {
        match self {
            PolicyKind::UZerosLsr => (0.0, 0.3),
            PolicyKind::UOnesLsr => (0.55, 0.85),
            _ => (0.0, 0.0),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for PolicyKind {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('+', "-");
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.cli_name() == norm)
            .ok_or_else(|| PolicyError::UnknownPolicy(s.to_string()))
    }
}

/// What a blank cell means for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingMode {
    /// Not mentioned in the report: a negative, included in the loss.
    #[default]
    Negative,
    /// Masked out of the loss.
    Ignore,
}

impl FromStr for MissingMode {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "negative" | "zero" | "zeros" => Ok(MissingMode::Negative),
            "ignore" => Ok(MissingMode::Ignore),
            other => Err(PolicyError::UnknownMissingMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelPolicy {
    pub kind: PolicyKind,
    pub lsr_low: f64,
    pub lsr_high: f64,
    #[serde(default)]
    pub missing: MissingMode,
}

impl LabelPolicy {
    /// Policy with the default smoothing interval for `kind`.
    pub fn new(kind: PolicyKind) -> Self {
        let (lsr_low, lsr_high) = kind.default_interval();
        Self {
            kind,
            lsr_low,
            lsr_high,
            missing: MissingMode::Negative,
        }
    }

    pub fn with_interval(mut self, low: f64, high: f64) -> Result<Self, PolicyError> {
        if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low > high {
            return Err(PolicyError::InvalidInterval { low, high });
        }
        self.lsr_low = low;
        self.lsr_high = high;
        Ok(self)
    }

    pub fn with_missing(mut self, missing: MissingMode) -> Self {
        self.missing = missing;
        self
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let (low, high) = (self.lsr_low, self.lsr_high);
        if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low > high {
            return Err(PolicyError::InvalidInterval { low, high });
        }
        Ok(())
    }

    /// Maps one raw label vector. The rng is consumed once per uncertain
    /// entry and only by the smoothing kinds.
    pub fn map_labels<R: Rng + ?Sized>(&self, raw: &[RawLabel], rng: &mut R) -> MappedTargets {
        let mut targets = Vec::with_capacity(raw.len());
        let mut mask = Vec::with_capacity(raw.len());
        for &label in raw {
            let (t, m) = match label {
                RawLabel::Positive => (1.0, true),
                RawLabel::Negative => (0.0, true),
                RawLabel::Missing => match self.missing {
                    MissingMode::Negative => (0.0, true),
                    MissingMode::Ignore => (MASKED_SENTINEL, false),
                },
                RawLabel::Uncertain => match self.kind {
                    PolicyKind::UIgnore => (MASKED_SENTINEL, false),
                    PolicyKind::UZeros => (0.0, true),
                    PolicyKind::UOnes => (1.0, true),
                    PolicyKind::UZerosLsr | PolicyKind::UOnesLsr => (self.draw_smoothed(rng), true),
                },
            };
            targets.push(t);
            mask.push(m);
        }
        MappedTargets { targets, mask }
    }

    fn draw_smoothed<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lsr_low == self.lsr_high {
            return self.lsr_low;
        }
        let u: f64 = rng.random();
        (self.lsr_low + u * (self.lsr_high - self.lsr_low)).clamp(self.lsr_low, self.lsr_high)
    }

    /// Maps every row with a per-row stream derived from `seed`, so the
    /// result for a row does not depend on the other rows.
    pub fn map_rows(&self, rows: &[&[RawLabel]], seed: u64) -> Vec<MappedTargets> {
        rows.iter()
            .enumerate()
            .map(|(i, raw)| {
                let mut rng = indexed_rng(seed, "policy", i as u64);
                self.map_labels(raw, &mut rng)
            })
            .collect()
    }

    /// Short descriptor recorded in checkpoints and manifests.
    pub fn descriptor(&self) -> String {
        let mut s = self.kind.cli_name().to_string();
        if self.kind.is_lsr() {
            s.push_str(&format!("[{},{}]", self.lsr_low, self.lsr_high));
        }
        if self.missing == MissingMode::Ignore {
            s.push_str(";missing=ignore");
        }
        s
    }
}

/// Soft targets and loss-inclusion flags for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedTargets {
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

impl MappedTargets {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Restricts the mask to `scope` (label indices); other labels are masked.
    pub fn restricted(&self, scope: &[bool]) -> MappedTargets {
        MappedTargets {
            targets: self.targets.clone(),
            mask: self.mask.iter().zip(scope).map(|(&m, &s)| m && s).collect(),
        }
    }
}
