//! Inference: unconditional probabilities, test-time augmentation and
//! ensembling.
//!
//! A two-phase model outputs `p(label | parent positive, x)`. Because a
//! positive child implies a positive parent, the unconditional probability
//! of a label is the product of the conditional outputs along its root
//! path, which also guarantees `p(child) <= p(parent)`.
//!
//! Means (over TTA copies and over ensemble members) are taken in
//! conditional-probability space, left to right, and the unconditional
//! conversion is applied once at the end.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::LabelHierarchy;
use crate::model::{ModelError, ModelParams, Prediction};
use crate::preprocess::{preprocess_image, GrayImage, PreprocessConfig, PreprocessError};
use crate::seed::component_rng;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("prediction has {got} labels, hierarchy has {expected}")]
    Length { expected: usize, got: usize },
    #[error("conditional probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("test-time augmentation needs an image input, got a feature vector")]
    TtaOnFeatures,
    #[error("image input needs a preprocess config")]
    NoPreprocess,
    #[error("ensemble has no models")]
    EmptyEnsemble,
    #[error("TTA count must be at least 1")]
    ZeroTta,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_ids: Vec<String>,
    pub tta_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnconditionalPrediction {
    pub probs: Vec<f64>,
    pub provenance: Provenance,
}

/// Multiplies conditional probabilities along each root path.
pub fn to_unconditional(
    cond: &[f64],
    h: &LabelHierarchy,
) -> Result<UnconditionalPrediction, InferError> {
    if cond.len() != h.len() {
        return Err(InferError::Length {
            expected: h.len(),
            got: cond.len(),
        });
    }
    if let Some(&bad) = cond.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(InferError::OutOfRange(bad));
    }
    let probs = (0..h.len())
        .map(|k| {
            h.root_path_indices(k)
                .iter()
                .fold(1.0, |acc, &j| acc * cond[j])
        })
        .collect();
    Ok(UnconditionalPrediction {
        probs,
        provenance: Provenance::default(),
    })
}

/// TTA settings. Each enabled component is drawn independently per copy:
/// flip with probability 1/2, rotation in `±rotation_deg`, isotropic scale
/// in `1 ± scale`, horizontal shear moving the top and bottom rows by up to
/// `±shear_px`. They are composed in that order about the image center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub count: usize,
    pub flip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_px: f64,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            count: 10,
            flip: true,
            rotation_deg: 7.0,
            scale: 0.02,
            shear_px: 5.0,
            seed: 0,
        }
    }
}

impl TtaConfig {
    /// No geometric change at all; each copy is the input itself.
    pub fn identity(count: usize) -> Self {
        Self {
            count,
            flip: false,
            rotation_deg: 0.0,
            scale: 0.0,
            shear_px: 0.0,
            seed: 0,
        }
    }

    pub fn rng(&self) -> rand_chacha::ChaCha8Rng {
        component_rng(self.seed, "tta")
    }
}

/// One sampled augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtaTransform {
    pub flip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_px: f64,
}

impl TtaTransform {
    pub const IDENTITY: TtaTransform = TtaTransform {
        flip: false,
        rotation_deg: 0.0,
        scale: 1.0,
        shear_px: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &TtaConfig, rng: &mut R) -> Self {
        let sym = |rng: &mut R, r: f64| {
            if r > 0.0 {
                rng.random_range(-r..=r)
            } else {
                0.0
            }
        };
        let flip = cfg.flip && rng.random_bool(0.5);
        let rotation_deg = sym(rng, cfg.rotation_deg);
        let scale = 1.0 + sym(rng, cfg.scale);
        let shear_px = sym(rng, cfg.shear_px);
        Self {
            flip,
            rotation_deg,
            scale,
            shear_px,
        }
    }

    fn is_geometric_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && self.shear_px == 0.0
    }

    /// Applies the transform with bilinear resampling and edge padding.
    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        let base = if self.flip {
            img.flip_horizontal()
        } else {
            img.clone()
        };
        if self.is_geometric_identity() {
            return base;
        }
        let cx = (img.width as f64 - 1.0) / 2.0;
        let cy = (img.height as f64 - 1.0) / 2.0;
        let theta = self.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let k = if img.height > 1 {
            self.shear_px / (img.height as f64 / 2.0)
        } else {
            0.0
        };
        // forward map A = shear * scale * rotation
        let a = [
            [self.scale * (cos + k * sin), self.scale * (-sin + k * cos)],
            [self.scale * sin, self.scale * cos],
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [
            [a[1][1] / det, -a[0][1] / det],
            [-a[1][0] / det, a[0][0] / det],
        ];
        GrayImage::from_fn(img.width, img.height, |r, c| {
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            let sx = cx + inv[0][0] * dx + inv[0][1] * dy;
            let sy = cy + inv[1][0] * dx + inv[1][1] * dy;
            base.sample_bilinear(sy, sx)
        })
    }
}

/// What a model is evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    Features(&'a [f64]),
    /// Raw image; routed through the preprocess pipeline and flattened.
    Image(&'a GrayImage),
}

fn image_features(img: &GrayImage, pre: &PreprocessConfig) -> Result<Vec<f64>, InferError> {
    Ok(preprocess_image(img, pre)?.image.data)
}

/// Plain forward pass (no augmentation).
pub fn predict(
    m: &ModelParams,
    input: ModelInput<'_>,
    pre: Option<&PreprocessConfig>,
) -> Result<Prediction, InferError> {
    match input {
        ModelInput::Features(x) => Ok(m.forward(x)?),
        ModelInput::Image(img) => {
            let pre = pre.ok_or(InferError::NoPreprocess)?;
            Ok(m.forward(&image_features(img, pre)?)?)
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut acc = vec![0.0; rows[0].len()];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / n).collect()
}

/// Mean of the conditional probabilities over `tta.count` augmented copies
/// drawn from `rng`. The returned logits are the log-odds of those means.
pub fn predict_tta<R: Rng + ?Sized>(
    m: &ModelParams,
    input: ModelInput<'_>,
    pre: &PreprocessConfig,
    tta: &TtaConfig,
    rng: &mut R,
) -> Result<Prediction, InferError> {
    let img = match input {
        ModelInput::Image(img) => img,
        ModelInput::Features(_) => return Err(InferError::TtaOnFeatures),
    };
    if tta.count == 0 {
        return Err(InferError::ZeroTta);
    }
    let mut rows = Vec::with_capacity(tta.count);
    for _ in 0..tta.count {
        let t = TtaTransform::sample(tta, rng);
        let x = image_features(&t.apply(img), pre)?;
        rows.push(m.forward(&x)?.cond_probs);
    }
    let cond_probs = mean_rows(&rows);
    Ok(Prediction {
        logits: cond_probs.iter().map(|&p| logit(p)).collect(),
        cond_probs,
    })
}

/// Where the unconditional conversion happens relative to averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AverageOrder {
    #[default]
    AverageThenConvert,
    ConvertThenAverage,
}

#[derive(Debug, Clone, Default)]
pub struct EnsembleOptions {
    pub preprocess: Option<PreprocessConfig>,
    pub tta: Option<TtaConfig>,
    pub order: AverageOrder,
    pub model_ids: Vec<String>,
}

/// Averages the members' conditional outputs (with TTA per member when
/// configured) and converts the mean to unconditional probabilities.
///
/// Every member sees the same sequence of TTA transforms.
pub fn ensemble_predict(
    models: &[ModelParams],
    input: ModelInput<'_>,
    h: &LabelHierarchy,
    opts: &EnsembleOptions,
) -> Result<UnconditionalPrediction, InferError> {
    if models.is_empty() {
        return Err(InferError::EmptyEnsemble);
    }
    let mut rows = Vec::with_capacity(models.len());
    for m in models {
        let p = match &opts.tta {
            Some(tta) => {
                let pre = opts.preprocess.as_ref().ok_or(InferError::NoPreprocess)?;
                predict_tta(m, input, pre, tta, &mut tta.rng())?
            }
            None => predict(m, input, opts.preprocess.as_ref())?,
        };
        if p.cond_probs.len() != h.len() {
            return Err(InferError::Length {
                expected: h.len(),
                got: p.cond_probs.len(),
            });
        }
        rows.push(p.cond_probs);
    }
    let probs = match opts.order {
        AverageOrder::AverageThenConvert => to_unconditional(&mean_rows(&rows), h)?.probs,
        AverageOrder::ConvertThenAverage => {
            let converted = rows
                .iter()
                .map(|r| to_unconditional(r, h).map(|u| u.probs))
                .collect::<Result<Vec<_>, _>>()?;
            mean_rows(&converted)
        }
    };
    Ok(UnconditionalPrediction {
        probs,
        provenance: Provenance {
            model_ids: opts.model_ids.clone(),
            tta_count: opts.tta.as_ref().map_or(0, |t| t.count),
        },
    })
}

/// Writes `Id` plus one probability column per label, 6 decimal places.
pub fn write_predictions<W: Write>(
    writer: W,
    labels: &[String],
    rows: &[(String, Vec<f64>)],
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["Id".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (id, probs) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(probs.iter().map(|p| format!("{p:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
