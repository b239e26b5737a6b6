//! Image cleaning: bilinear rescale, template-matching crop and intensity
//! normalization.
//!
//! Images are single-channel. Intensities are kept as `f64` on the 0..=255
//! scale until normalization maps them to `(x / 255 - mean) / std`.
//!
//! Template matching uses zero-mean normalized cross-correlation (Pearson
//! form) over every offset where the template fits. Ties go to the smallest
//! `(row, col)`. When the template or every window has zero variance the
//! score is undefined and the crop falls back to the image center.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Channel means of the ImageNet training set (R, G, B).
pub const IMAGENET_MEAN_RGB: [f64; 3] = [0.485, 0.456, 0.406];
/// Channel standard deviations of the ImageNet training set (R, G, B).
pub const IMAGENET_STD_RGB: [f64; 3] = [0.229, 0.224, 0.225];
/// Grayscale mean: average of the three channel means.
pub const GRAY_MEAN: f64 = 0.449;
/// Grayscale std: average of the three channel stds.
pub const GRAY_STD: f64 = 0.226;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("image is empty")]
    EmptyImage,
    #[error("pixel buffer has {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("non-finite pixel value")]
    NonFinite,
    #[error("template is {width}x{height}, expected {crop}x{crop}")]
    TemplateSize {
        width: usize,
        height: usize,
        crop: usize,
    },
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
    #[error("PGM: {0}")]
    Pgm(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("tensor file: {0}")]
    Tensor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities.
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, PreprocessError> {
        if width == 0 || height == 0 {
            return Err(PreprocessError::EmptyImage);
        }
        if data.len() != width * height {
            return Err(PreprocessError::BufferSize {
                expected: width * height,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(PreprocessError::NonFinite);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Sample with coordinates clamped to the border.
    #[inline]
    fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    /// Bilinear sample at continuous `(y, x)` pixel-center coordinates, with
    /// edge padding.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let (r, c) = (y0 as isize, x0 as isize);
        let top = lerp(self.get_clamped(r, c), self.get_clamped(r, c + 1), fx);
        let bottom = lerp(
            self.get_clamped(r + 1, c),
            self.get_clamped(r + 1, c + 1),
            fx,
        );
        lerp(top, bottom, fy)
    }

    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> GrayImage {
        assert!(
            row + height <= self.height && col + width <= self.width,
            "crop out of bounds"
        );
        let mut data = Vec::with_capacity(width * height);
        for r in row..row + height {
            let start = r * self.width + col;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    /// Copies `patch` into this image with its top-left corner at `(row, col)`.
    pub fn paste(&mut self, patch: &GrayImage, row: usize, col: usize) {
        assert!(row + patch.height <= self.height && col + patch.width <= self.width);
        for r in 0..patch.height {
            let dst = (row + r) * self.width + col;
            self.data[dst..dst + patch.width]
                .copy_from_slice(&patch.data[r * patch.width..(r + 1) * patch.width]);
        }
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |r, c| {
            self.get(r, self.width - 1 - c)
        })
    }

    /// Decodes a binary PGM (`P5`). 16-bit files are rescaled to 0..=255.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, PreprocessError> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(PreprocessError::Pgm("truncated header".into()));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| PreprocessError::Pgm("header is not ASCII".into()))?,
            );
        }
        if fields[0] != "P5" {
            return Err(PreprocessError::Pgm(format!(
                "unsupported magic '{}' (need P5)",
                fields[0]
            )));
        }
        let num = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| PreprocessError::Pgm(format!("bad {what} '{s}'")))
        };
        let width = num(fields[1], "width")?;
        let height = num(fields[2], "height")?;
        let maxval = num(fields[3], "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(PreprocessError::Pgm(format!(
                "maxval {maxval} out of range"
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let bpp = if maxval < 256 { 1 } else { 2 };
        let need = width * height * bpp;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| PreprocessError::Pgm("truncated raster".into()))?;
        let scale = 255.0 / maxval as f64;
        let data = if bpp == 1 {
            raster.iter().map(|&b| b as f64 * scale).collect()
        } else {
            raster
                .chunks_exact(2)
                .map(|p| u16::from_be_bytes([p[0], p[1]]) as f64 * scale)
                .collect()
        };
        GrayImage::new(width, height, data)
    }

    /// Encodes as 8-bit binary PGM, rounding and clamping to 0..=255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
        out
    }

    pub fn load_pgm(path: &Path) -> Result<Self, PreprocessError> {
        let bytes = std::fs::read(path).map_err(|source| PreprocessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_pgm(&bytes)
    }

    /// JSON tensor in the checkpoint float encoding.
    pub fn to_tensor_json(&self) -> String {
        let mut s = serde_json::to_string(&TensorFile {
            format_version: 1,
            width: self.width,
            height: self.height,
            data: self.data.clone(),
        })
        .expect("tensor serializes");
        s.push('\n');
        s
    }

    pub fn from_tensor_json(text: &str) -> Result<Self, PreprocessError> {
        let t: TensorFile =
            serde_json::from_str(text).map_err(|e| PreprocessError::Tensor(e.to_string()))?;
        if t.format_version != 1 {
            return Err(PreprocessError::Tensor(format!(
                "unsupported version {}",
                t.format_version
            )));
        }
        GrayImage::new(t.width, t.height, t.data)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorFile {
    format_version: u32,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    GrayImage::from_fn(width, height, |r, c| {
        let y = ((r as f64 + 0.5) * sy - 0.5).max(0.0);
        let x = ((c as f64 + 0.5) * sx - 0.5).max(0.0);
        img.sample_bilinear(y, x)
    })
}

/// Best template position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateMatch {
    pub row: usize,
    pub col: usize,
    /// NCC at the chosen offset; `None` when undefined (zero variance) and
    /// the position is the center fallback.
    pub score: Option<f64>,
}

impl TemplateMatch {
    pub fn is_fallback(&self) -> bool {
        self.score.is_none()
    }
}

fn center_offset(img: &GrayImage, tpl_w: usize, tpl_h: usize) -> (usize, usize) {
    ((img.height - tpl_h) / 2, (img.width - tpl_w) / 2)
}

/// Zero-mean NCC of `template` at every valid offset; returns the argmax.
pub fn match_template(
    img: &GrayImage,
    template: &GrayImage,
) -> Result<TemplateMatch, PreprocessError> {
    if template.width > img.width || template.height > img.height {
        return Err(PreprocessError::InvalidConfig(format!(
            "template {}x{} larger than image {}x{}",
            template.width, template.height, img.width, img.height
        )));
    }
    let n = (template.width * template.height) as f64;
    let tpl_mean = template.data.iter().sum::<f64>() / n;
    let centered: Vec<f64> = template.data.iter().map(|v| v - tpl_mean).collect();
    let tpl_ss: f64 = centered.iter().map(|v| v * v).sum();
    let tiny = 1e-9 * n;
    let (cr, cc) = center_offset(img, template.width, template.height);
    if tpl_ss <= tiny {
        return Ok(TemplateMatch {
            row: cr,
            col: cc,
            score: None,
        });
    }

    let mut best: Option<(usize, usize, f64)> = None;
    for row in 0..=img.height - template.height {
        for col in 0..=img.width - template.width {
            let window = |r: usize| {
                let start = (row + r) * img.width + col;
                &img.data[start..start + template.width]
            };
            let mut sum = 0.0;
            for r in 0..template.height {
                sum += window(r).iter().sum::<f64>();
            }
            let mean = sum / n;
            let (mut cross, mut ss) = (0.0, 0.0);
            for r in 0..template.height {
                let t = &centered[r * template.width..(r + 1) * template.width];
                for (&v, &tc) in window(r).iter().zip(t) {
                    let d = v - mean;
                    cross += d * tc;
                    ss += d * d;
                }
            }
            if ss <= tiny {
                continue;
            }
            let score = (cross / (ss * tpl_ss).sqrt()).clamp(-1.0, 1.0);
            if best.is_none_or(|(_, _, s)| score > s) {
                best = Some((row, col, score));
            }
        }
    }
    Ok(match best {
        Some((row, col, s)) => TemplateMatch {
            row,
            col,
            score: Some(s),
        },
        None => TemplateMatch {
            row: cr,
            col: cc,
            score: None,
        },
    })
}

/// `(x / 255 - mean) / std` per pixel.
pub fn normalize(img: &GrayImage, mean: f64, std: f64) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&x| (x / 255.0 - mean) / std).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub resize: usize,
    pub crop: usize,
    pub template: GrayImage,
    pub mean: f64,
    pub std: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self::with_sizes(256, 224)
    }
}

impl PreprocessConfig {
    /// Sizes with the synthetic default template and ImageNet gray stats.
    pub fn with_sizes(resize: usize, crop: usize) -> Self {
        Self {
            resize,
            crop,
            template: synthetic_template(crop),
            mean: GRAY_MEAN,
            std: GRAY_STD,
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(PreprocessError::InvalidConfig(format!(
                "crop {} must be in 1..={}",
                self.crop, self.resize
            )));
        }
        if !(self.std.is_finite() && self.std > 0.0) || !self.mean.is_finite() {
            return Err(PreprocessError::InvalidConfig(
                "std must be positive and mean finite".into(),
            ));
        }
        if self.template.width != self.crop || self.template.height != self.crop {
            return Err(PreprocessError::TemplateSize {
                width: self.template.width,
                height: self.template.height,
                crop: self.crop,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub image: GrayImage,
    pub matched: TemplateMatch,
}

/// Rescale, template-match, crop, normalize.
pub fn preprocess_image(
    img: &GrayImage,
    cfg: &PreprocessConfig,
) -> Result<Preprocessed, PreprocessError> {
    cfg.validate()?;
    if img.width == 0 || img.height == 0 || img.data.is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    let resized = if img.width == cfg.resize && img.height == cfg.resize {
        img.clone()
    } else {
        resize_bilinear(img, cfg.resize, cfg.resize)
    };
    let matched = match_template(&resized, &cfg.template)?;
    let cropped = resized.crop(matched.row, matched.col, cfg.crop, cfg.crop);
    let image = normalize(&cropped, cfg.mean, cfg.std);
    if !image.data.iter().all(|v| v.is_finite()) {
        return Err(PreprocessError::NonFinite);
    }
    Ok(Preprocessed { image, matched })
}

/// Built-in stand-in for a chest template: bright mediastinum and body,
/// two darker lung fields, soft edges. Deterministic for a given size.
pub fn synthetic_template(size: usize) -> GrayImage {
    let s = size as f64;
    GrayImage::from_fn(size, size, |r, c| {
        let y = (r as f64 + 0.5) / s;
        let x = (c as f64 + 0.5) / s;
        let mut v = 170.0 + 40.0 * (1.0 - y);
        for cx in [0.3, 0.7] {
            let dx = (x - cx) / 0.17;
            let dy = (y - 0.5) / 0.32;
            let d = dx * dx + dy * dy;
            if d < 1.0 {
                v -= 110.0 * (1.0 - d).sqrt();
            }
        }
        let spine = ((x - 0.5) / 0.04).powi(2);
        v += 30.0 * (-spine).exp();
        v.clamp(0.0, 255.0)
    })
}
