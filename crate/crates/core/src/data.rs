//! Datasets: CheXpert-style CSV ingestion, the conditional training subset,
//! and a synthetic generator with a known Bayes-optimal scorer.
//!
//! Label CSVs carry an `Id` (or `Path`) column, an optional
//! `Frontal/Lateral` column and one column per hierarchy label holding
//! `1.0`, `0.0`, `-1.0` or nothing. Feature vectors live in a sidecar CSV
//! (`Id,f0,f1,...`) keyed by the same id.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{HierarchyError, LabelHierarchy};
use crate::policy::{LabelPolicy, MappedTargets, PolicyError, RawLabel};
use crate::seed::component_rng;

pub const VIEW_COLUMN: &str = "Frontal/Lateral";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file is empty")]
    EmptyFile { path: PathBuf },
    #[error("{path}: missing column '{column}'")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}, column '{column}': {source}")]
    BadCell {
        path: PathBuf,
        row: usize,
        column: String,
        #[source]
        source: PolicyError,
    },
    #[error("{path}: row {row}: {message}")]
    BadRow {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("sample '{0}' has no feature vector")]
    NoFeatures(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    Frontal,
    Lateral,
}

impl View {
    fn parse(cell: &str) -> Option<Self> {
        match cell.trim().to_ascii_lowercase().as_str() {
            "frontal" => Some(View::Frontal),
            "lateral" => Some(View::Lateral),
            _ => None,
        }
    }

    fn as_cell(self) -> &'static str {
        match self {
            View::Frontal => "Frontal",
            View::Lateral => "Lateral",
        }
    }
}

/// Row filter applied while loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ViewFilter {
    #[default]
    All,
    FrontalOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    Features(Vec<f64>),
    /// Path to a grayscale image; features come from the preprocess module.
    Image(PathBuf),
    /// Id-only row whose features have not been attached yet.
    Unbound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: SampleInput,
    pub raw_labels: Vec<RawLabel>,
    pub view: Option<View>,
}

impl Sample {
    pub fn features(&self) -> Option<&[f64]> {
        match &self.input {
            SampleInput::Features(f) => Some(f),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Csv,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub schema: Vec<String>,
    pub source: DataSource,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fails unless the label columns equal the hierarchy labels, in order.
    pub fn check_schema(&self, h: &LabelHierarchy) -> Result<(), DataError> {
        if self.schema.as_slice() != h.labels() {
            return Err(DataError::Schema(format!(
                "dataset labels [{}] do not match hierarchy labels [{}]",
                self.schema.join(", "),
                h.labels().join(", ")
            )));
        }
        Ok(())
    }

    /// Common feature dimension; errors when a sample lacks features or
    /// dimensions differ.
    pub fn feature_dim(&self) -> Result<usize, DataError> {
        let mut dim = None;
        for s in &self.samples {
            let f = s
                .features()
                .ok_or_else(|| DataError::NoFeatures(s.id.clone()))?;
            match dim {
                None => dim = Some(f.len()),
                Some(d) if d != f.len() => {
                    return Err(DataError::Dimension {
                        expected: d,
                        got: f.len(),
                    })
                }
                _ => {}
            }
        }
        Ok(dim.unwrap_or(0))
    }

    pub fn raw_rows(&self) -> Vec<&[RawLabel]> {
        self.samples
            .iter()
            .map(|s| s.raw_labels.as_slice())
            .collect()
    }

    /// Training targets for every sample, drawn once from `seed`.
    pub fn mapped_targets(&self, policy: &LabelPolicy, seed: u64) -> Vec<MappedTargets> {
        policy.map_rows(&self.raw_rows(), seed)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            schema: self.schema.clone(),
            source: self.source,
        }
    }

    /// Binds feature vectors (by id) to every sample.
    pub fn attach_features(&mut self, features: &[(String, Vec<f64>)]) -> Result<(), DataError> {
        let table: HashMap<&str, &Vec<f64>> =
            features.iter().map(|(id, f)| (id.as_str(), f)).collect();
        let mut dim = None;
        for s in &mut self.samples {
            let f = table
                .get(s.id.as_str())
                .ok_or_else(|| DataError::NoFeatures(s.id.clone()))?;
            if let Some(d) = dim {
                if d != f.len() {
                    return Err(DataError::Dimension {
                        expected: d,
                        got: f.len(),
                    });
                }
            }
            dim = Some(f.len());
            s.input = SampleInput::Features((*f).clone());
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a CheXpert-layout label CSV.
pub fn load_csv(path: &Path, h: &LabelHierarchy, filter: ViewFilter) -> Result<Dataset, DataError> {
    read_labels(open(path)?, path, h, filter)
}

/// Label CSV parsing over any reader; `origin` is used in error messages.
pub fn read_labels<R: Read>(
    reader: R,
    origin: &Path,
    h: &LabelHierarchy,
    filter: ViewFilter,
) -> Result<Dataset, DataError> {
    let csv_err = |source| DataError::Csv {
        path: origin.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(DataError::EmptyFile {
            path: origin.to_path_buf(),
        });
    }
    let col = |name: &str| headers.iter().position(|c| c.trim() == name);

    let (id_col, is_path) = match (col("Path"), col("Id")) {
        (Some(c), _) => (c, true),
        (None, Some(c)) => (c, false),
        (None, None) => {
            return Err(DataError::MissingColumn {
                path: origin.to_path_buf(),
                column: "Path or Id".into(),
            })
        }
    };
    let view_col = col(VIEW_COLUMN);
    let label_cols = h
        .labels()
        .iter()
        .map(|l| {
            col(l).ok_or_else(|| DataError::MissingColumn {
                path: origin.to_path_buf(),
                column: l.clone(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut samples = Vec::new();
    let mut rows_read = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        rows_read += 1;
        let row = i + 2;
        let view = match view_col {
            Some(c) => {
                let cell = &record[c];
                if cell.trim().is_empty() {
                    None
                } else {
                    Some(View::parse(cell).ok_or_else(|| DataError::BadRow {
                        path: origin.to_path_buf(),
                        row,
                        message: format!("invalid view '{cell}'"),
                    })?)
                }
            }
            None => None,
        };
        if filter == ViewFilter::FrontalOnly && view == Some(View::Lateral) {
            continue;
        }
        let raw_labels = label_cols
            .iter()
            .zip(h.labels())
            .map(|(&c, name)| {
                RawLabel::parse(&record[c]).map_err(|source| DataError::BadCell {
                    path: origin.to_path_buf(),
                    row,
                    column: name.clone(),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let id = record[id_col].trim().to_string();
        let input = if is_path {
            SampleInput::Image(PathBuf::from(&id))
        } else {
            SampleInput::Unbound
        };
        samples.push(Sample {
            id,
            input,
            raw_labels,
            view,
        });
    }
    if rows_read == 0 {
        return Err(DataError::EmptyFile {
            path: origin.to_path_buf(),
        });
    }
    Ok(Dataset {
        samples,
        schema: h.labels().to_vec(),
        source: DataSource::Csv,
    })
}

/// Writes the label CSV (`Id`, optional view column, one column per label).
pub fn write_labels<W: Write>(ds: &Dataset, writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let with_view = ds.samples.iter().any(|s| s.view.is_some());
    let mut header = vec!["Id".to_string()];
    if with_view {
        header.push(VIEW_COLUMN.to_string());
    }
    header.extend(ds.schema.iter().cloned());
    w.write_record(&header)?;
    for s in &ds.samples {
        let mut rec = vec![s.id.clone()];
        if with_view {
            rec.push(s.view.map(View::as_cell).unwrap_or("").to_string());
        }
        rec.extend(s.raw_labels.iter().map(|l| l.as_cell().to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the feature sidecar. Values use the shortest decimal that parses
/// back to the same `f64`.
pub fn write_features<W: Write>(ds: &Dataset, writer: W) -> Result<(), DataError> {
    let dim = ds.feature_dim()?;
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |source| DataError::Csv {
        path: PathBuf::from("<features>"),
        source,
    };
    let mut header = vec!["Id".to_string()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for s in &ds.samples {
        let mut rec = vec![s.id.clone()];
        rec.extend(
            s.features()
                .unwrap_or_default()
                .iter()
                .map(|v| format!("{v:?}")),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: PathBuf::from("<features>"),
        source,
    })?;
    Ok(())
}

/// Reads a feature sidecar into `(id, vector)` pairs.
pub fn load_features(path: &Path) -> Result<Vec<(String, Vec<f64>)>, DataError> {
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(open(path)?);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    if headers.is_empty() {
        return Err(DataError::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    if headers[0].trim() != "Id" {
        return Err(DataError::MissingColumn {
            path: path.to_path_buf(),
            column: "Id".into(),
        });
    }
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let values = record
            .iter()
            .skip(1)
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::BadRow {
                path: path.to_path_buf(),
                row: i + 2,
                message: format!("unparseable feature value: {e}"),
            })?;
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(DataError::BadRow {
                path: path.to_path_buf(),
                row: i + 2,
                message: format!("non-finite feature value {bad}"),
            });
        }
        out.push((record[0].trim().to_string(), values));
    }
    Ok(out)
}

/// Labels without a parent role: leaves and standalone roots. These are the
/// labels trained during the conditional phase.
pub fn phase1_scope(h: &LabelHierarchy) -> Vec<usize> {
    (0..h.len()).filter(|&k| h.children(k).is_empty()).collect()
}

/// Indices of the samples whose mapped target is at least 0.5 for every
/// parent-label.
pub fn conditional_indices(targets: &[MappedTargets], h: &LabelHierarchy) -> Vec<usize> {
    let parents = h.parent_labels();
    targets
        .iter()
        .enumerate()
        .filter(|(_, t)| parents.iter().all(|&p| t.targets[p] >= 0.5))
        .map(|(i, _)| i)
        .collect()
}

/// The conditional training set and the label indices its loss covers.
pub fn conditional_subset(
    ds: &Dataset,
    h: &LabelHierarchy,
    policy: &LabelPolicy,
    seed: u64,
) -> Result<(Dataset, Vec<usize>), DataError> {
    ds.check_schema(h)?;
    let targets = ds.mapped_targets(policy, seed);
    let keep = conditional_indices(&targets, h);
    Ok((ds.subset(&keep), phase1_scope(h)))
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Synthetic generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Latent/feature dimension.
    pub dim: usize,
    pub n: usize,
    /// Fraction of label entries replaced by `-1`.
    pub rho: f64,
    /// Target share of truly positive entries among the replaced ones.
    pub beta: f64,
    /// Standard deviation of each label's linear score `w·z`.
    pub signal: f64,
    /// Biases are drawn uniformly from `[-bias_range, bias_range]`.
    pub bias_range: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n: 1000,
            rho: 0.0,
            beta: 0.5,
            signal: 4.0,
            bias_range: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.dim == 0 {
            return Err(DataError::InvalidConfig(
                "dimension must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(DataError::InvalidConfig(format!(
                "rho {} not in [0, 1]",
                self.rho
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(DataError::InvalidConfig(format!(
                "beta {} not in [0, 1]",
                self.beta
            )));
        }
        if !(self.signal.is_finite() && self.signal >= 0.0) {
            return Err(DataError::InvalidConfig(format!(
                "signal {} must be >= 0",
                self.signal
            )));
        }
        if !(self.bias_range.is_finite() && self.bias_range >= 0.0) {
            return Err(DataError::InvalidConfig(format!(
                "bias range {} must be >= 0",
                self.bias_range
            )));
        }
        Ok(())
    }
}

/// Generative model behind synthetic data: label `k` is positive with
/// probability `sigmoid(w_k·z + b_k)` when its parent is positive, and is
/// forced negative otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub hierarchy: LabelHierarchy,
    pub rho: f64,
    pub beta: f64,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthFile {
    format_version: u32,
    hierarchy: String,
    rho: f64,
    beta: f64,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

/// One synthetic draw: the dataset as the toolkit sees it plus the labels
/// before uncertainty injection.
#[derive(Debug, Clone)]
pub struct SyntheticDraw {
    pub dataset: Dataset,
    pub clean_labels: Vec<Vec<bool>>,
}

impl GroundTruthModel {
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Per-node conditional probabilities `sigmoid(w_k·z + b_k)`.
    pub fn conditional_probs(&self, z: &[f64]) -> Result<Vec<f64>, DataError> {
        if z.len() != self.dim() {
            return Err(DataError::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| sigmoid(w.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + b))
            .collect())
    }

    /// Draws `n` samples with ids `{prefix}-{index}`. Injection uses the
    /// model's own `rho`/`beta` unless overridden.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        rho: f64,
        beta: f64,
        prefix: &str,
        rng: &mut R,
    ) -> Result<SyntheticDraw, DataError> {
        let l = self.hierarchy.len();
        let d = self.dim();
        let mut features = Vec::with_capacity(n);
        let mut clean = Vec::with_capacity(n);
        // parents precede children in this order
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by_key(|&k| self.hierarchy.root_path_indices(k).len());

        for _ in 0..n {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let probs = self.conditional_probs(&z)?;
            let mut labels = vec![false; l];
            for &k in &order {
                let parent_ok = self.hierarchy.parent(k).is_none_or(|p| labels[p]);
                let u: f64 = rng.random();
                labels[k] = parent_ok && u < probs[k];
            }
            features.push(z);
            clean.push(labels);
        }

        let (q_pos, q_neg) = injection_rates(&clean, l, rho, beta);
        let mut samples = Vec::with_capacity(n);
        for (i, (z, truth)) in features.into_iter().zip(&clean).enumerate() {
            let raw_labels = truth
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    let q = if t { q_pos[k] } else { q_neg[k] };
                    let u: f64 = rng.random();
                    if u < q {
                        RawLabel::Uncertain
                    } else if t {
                        RawLabel::Positive
                    } else {
                        RawLabel::Negative
                    }
                })
                .collect();
            samples.push(Sample {
                id: format!("{prefix}-{i:06}"),
                input: SampleInput::Features(z),
                raw_labels,
                view: None,
            });
        }
        Ok(SyntheticDraw {
            dataset: Dataset {
                samples,
                schema: self.hierarchy.labels().to_vec(),
                source: DataSource::Synthetic,
            },
            clean_labels: clean,
        })
    }

    pub fn to_json(&self) -> String {
        let file = GroundTruthFile {
            format_version: 1,
            hierarchy: self.hierarchy.serialize(),
            rho: self.rho,
            beta: self.beta,
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        };
        serde_json::to_string_pretty(&file).expect("ground truth serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: GroundTruthFile = serde_json::from_str(text)
            .map_err(|e| DataError::InvalidConfig(format!("ground truth file: {e}")))?;
        let hierarchy = LabelHierarchy::parse(&file.hierarchy)?;
        if file.weights.len() != hierarchy.len() || file.biases.len() != hierarchy.len() {
            return Err(DataError::InvalidConfig(
                "ground truth weight count does not match hierarchy".into(),
            ));
        }
        Ok(Self {
            weights: file.weights,
            biases: file.biases,
            hierarchy,
            rho: file.rho,
            beta: file.beta,
        })
    }
}

/// Per-label injection probabilities for truly positive and truly negative
/// entries. Overall expected rate is `rho`; the positive share among
/// injected entries is `beta` whenever that is attainable given the label's
/// prevalence, and as close as possible otherwise.
fn injection_rates(clean: &[Vec<bool>], l: usize, rho: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let n = clean.len().max(1) as f64;
    let mut q_pos = vec![0.0; l];
    let mut q_neg = vec![0.0; l];
    for k in 0..l {
        let prevalence = clean.iter().filter(|row| row[k]).count() as f64 / n;
        let (qp, qn) = if rho >= 1.0 {
            (1.0, 1.0)
        } else if prevalence <= 0.0 {
            (0.0, rho)
        } else if prevalence >= 1.0 {
            (rho, 0.0)
        } else {
            let qp = beta * rho / prevalence;
            let qn = (1.0 - beta) * rho / (1.0 - prevalence);
            if qp > 1.0 {
                (1.0, (rho - prevalence) / (1.0 - prevalence))
            } else if qn > 1.0 {
                ((rho - (1.0 - prevalence)) / prevalence, 1.0)
            } else {
                (qp, qn)
            }
        };
        q_pos[k] = qp.clamp(0.0, 1.0);
        q_neg[k] = qn.clamp(0.0, 1.0);
    }
    (q_pos, q_neg)
}

/// Draws a ground-truth model and `cfg.n` samples from it. All randomness
/// derives from `cfg.seed`.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    h: &LabelHierarchy,
) -> Result<(Dataset, GroundTruthModel), DataError> {
    let (draw, gt) = generate_synthetic_draw(cfg, h)?;
    Ok((draw.dataset, gt))
}

/// Like [`generate_synthetic`] but keeps the pre-injection labels.
pub fn generate_synthetic_draw(
    cfg: &SyntheticConfig,
    h: &LabelHierarchy,
) -> Result<(SyntheticDraw, GroundTruthModel), DataError> {
    cfg.validate()?;
    let gt = draw_ground_truth(cfg, h);
    let mut rng = component_rng(cfg.seed, "gen/samples");
    let draw = gt.sample(cfg.n, cfg.rho, cfg.beta, "s", &mut rng)?;
    Ok((draw, gt))
}

/// Draws only the ground-truth model for `cfg`.
pub fn draw_ground_truth(cfg: &SyntheticConfig, h: &LabelHierarchy) -> GroundTruthModel {
    let mut rng = component_rng(cfg.seed, "gen/model");
    let scale = cfg.signal / (cfg.dim as f64).sqrt();
    let weights = (0..h.len())
        .map(|_| {
            (0..cfg.dim)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    scale * g
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let biases = (0..h.len())
        .map(|_| cfg.bias_range * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    GroundTruthModel {
        weights,
        biases,
        hierarchy: h.clone(),
        rho: cfg.rho,
        beta: cfg.beta,
    }
}

/// Bayes-optimal unconditional probabilities for a feature sample: the
/// product of node probabilities along each label's root path.
pub fn oracle_scores(gt: &GroundTruthModel, sample: &Sample) -> Result<Vec<f64>, DataError> {
    let z = sample
        .features()
        .ok_or_else(|| DataError::NoFeatures(sample.id.clone()))?;
    let cond = gt.conditional_probs(z)?;
    Ok((0..gt.hierarchy.len())
        .map(|k| {
            gt.hierarchy
                .root_path_indices(k)
                .iter()
                .map(|&j| cond[j])
                .product()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;

    fn abc() -> LabelHierarchy {
        LabelHierarchy::parse("A\nB\nC\n").unwrap()
    }

    fn load_str(text: &str, h: &LabelHierarchy, f: ViewFilter) -> Result<Dataset, DataError> {
        read_labels(text.as_bytes(), Path::new("mem.csv"), h, f)
    }

    #[test]
    fn parses_cells_including_blank() {
        let ds = load_str("Id,A,B,C\nx,1.0,, -1.0\n", &abc(), ViewFilter::All).unwrap();
        assert_eq!(
            ds.samples[0].raw_labels,
            [RawLabel::Positive, RawLabel::Missing, RawLabel::Uncertain]
        );
        assert_eq!(ds.samples[0].input, SampleInput::Unbound);
    }

    #[test]
    fn missing_column_is_named() {
        let h = LabelHierarchy::parse("A\nEdema\n").unwrap();
        let err = load_str("Id,A\nx,1.0\n", &h, ViewFilter::All).unwrap_err();
        match err {
            DataError::MissingColumn { column, .. } => assert_eq!(column, "Edema"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn frontal_filter_drops_laterals() {
        let text = "Path,Frontal/Lateral,A,B,C\n\
                    p1,Frontal,1.0,0.0,0.0\n\
                    p2,Lateral,1.0,0.0,0.0\n\
                    p3,Frontal,,0.0,\n\
                    p4,Lateral,0.0,0.0,0.0\n\
                    p5,Frontal,-1.0,1.0,0.0\n";
        let ds = load_str(text, &abc(), ViewFilter::FrontalOnly).unwrap();
        assert_eq!(ds.len(), 3);
        assert!(matches!(ds.samples[0].input, SampleInput::Image(_)));
        assert_eq!(load_str(text, &abc(), ViewFilter::All).unwrap().len(), 5);
    }

    #[test]
    fn bad_cell_and_empty_file() {
        let err = load_str("Id,A,B,C\nx,1.0,0.5,0.0\n", &abc(), ViewFilter::All).unwrap_err();
        assert!(matches!(err, DataError::BadCell { row: 2, ref column, .. } if column == "B"));
        assert!(matches!(
            load_str("", &abc(), ViewFilter::All).unwrap_err(),
            DataError::EmptyFile { .. }
        ));
    }

    #[test]
    fn labels_csv_round_trips() {
        let text = "Id,Frontal/Lateral,A,B,C\nx,Frontal,1.0,,-1.0\ny,Lateral,0.0,0.0,1.0\n";
        let ds = load_str(text, &abc(), ViewFilter::All).unwrap();
        let mut out = Vec::new();
        write_labels(&ds, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn conditional_filter_on_two_node_chain() {
        let h = LabelHierarchy::parse("A\nB <- A\n").unwrap();
        let ds = load_str(
            "Id,A,B\nneg,0.0,0.0\npos,1.0,1.0\nunc,-1.0,0.0\n",
            &h,
            ViewFilter::All,
        )
        .unwrap();
        let (sub, scope) =
            conditional_subset(&ds, &h, &LabelPolicy::new(PolicyKind::UOnes), 0).unwrap();
        let ids: Vec<&str> = sub.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["pos", "unc"]);
        assert_eq!(scope, [1]);
        let (sub, _) =
            conditional_subset(&ds, &h, &LabelPolicy::new(PolicyKind::UZeros), 0).unwrap();
        assert_eq!(sub.len(), 1);
    }

    #[test]
    fn conditional_filter_vacuous_when_all_parents_positive() {
        let h = LabelHierarchy::parse("A\nB <- A\n").unwrap();
        let ds = load_str("Id,A,B\nx,1.0,0.0\ny,1.0,1.0\n", &h, ViewFilter::All).unwrap();
        let (sub, _) =
            conditional_subset(&ds, &h, &LabelPolicy::new(PolicyKind::UIgnore), 3).unwrap();
        assert_eq!(sub, ds);
    }

    #[test]
    fn phase1_scope_includes_standalone_roots() {
        let h = LabelHierarchy::chexpert();
        let names: Vec<&str> = phase1_scope(&h)
            .iter()
            .map(|&i| h.labels()[i].as_str())
            .collect();
        assert_eq!(names.len(), 11);
        assert!(names.contains(&"Pneumothorax"));
        assert!(names.contains(&"Pneumonia"));
        assert!(!names.contains(&"Lung Opacity"));
    }

    fn cfg(rho: f64, beta: f64) -> SyntheticConfig {
        SyntheticConfig {
            n: 400,
            rho,
            beta,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn synthetic_rho_zero_has_no_uncertain() {
        let (ds, gt) = generate_synthetic(&cfg(0.0, 0.5), &LabelHierarchy::chexpert()).unwrap();
        assert_eq!(ds.len(), 400);
        assert_eq!(gt.dim(), 16);
        assert!(ds
            .samples
            .iter()
            .all(|s| s.raw_labels.iter().all(|&l| l != RawLabel::Uncertain)));
    }

    #[test]
    fn synthetic_rho_one_is_all_uncertain() {
        for beta in [0.0, 0.2, 0.5, 1.0] {
            let (ds, _) = generate_synthetic(&cfg(1.0, beta), &LabelHierarchy::chexpert()).unwrap();
            assert!(ds
                .samples
                .iter()
                .all(|s| s.raw_labels.iter().all(|&l| l == RawLabel::Uncertain)));
        }
    }

    #[test]
    fn synthetic_clean_labels_respect_hierarchy() {
        let h = LabelHierarchy::chexpert();
        let (draw, _) = generate_synthetic_draw(&cfg(0.3, 0.2), &h).unwrap();
        for row in &draw.clean_labels {
            for (p, c) in h.edges() {
                assert!(!row[c] || row[p]);
            }
        }
    }

    #[test]
    fn injection_share_tracks_beta() {
        let h = LabelHierarchy::chexpert();
        let c = SyntheticConfig {
            n: 4000,
            ..cfg(0.3, 0.2)
        };
        let (draw, _) = generate_synthetic_draw(&c, &h).unwrap();
        let (mut injected, mut injected_pos, mut total) = (0usize, 0usize, 0usize);
        for (s, truth) in draw.dataset.samples.iter().zip(&draw.clean_labels) {
            for (l, &t) in s.raw_labels.iter().zip(truth) {
                total += 1;
                if *l == RawLabel::Uncertain {
                    injected += 1;
                    injected_pos += t as usize;
                }
            }
        }
        let rate = injected as f64 / total as f64;
        let share = injected_pos as f64 / injected as f64;
        assert!((rate - 0.3).abs() < 0.01, "rate {rate}");
        assert!((share - 0.2).abs() < 0.02, "share {share}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let h = LabelHierarchy::chexpert();
        let a = generate_synthetic(&cfg(0.2, 0.5), &h).unwrap();
        let b = generate_synthetic(&cfg(0.2, 0.5), &h).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn ground_truth_json_round_trips() {
        let (_, gt) = generate_synthetic(&cfg(0.1, 0.5), &LabelHierarchy::chexpert()).unwrap();
        assert_eq!(GroundTruthModel::from_json(&gt.to_json()).unwrap(), gt);
    }

    #[test]
    fn oracle_scores_small_cases() {
        let h = LabelHierarchy::parse("A\nB <- A\n").unwrap();
        let gt = GroundTruthModel {
            weights: vec![vec![0.0], vec![0.0]],
            biases: vec![0.0, 0.0],
            hierarchy: h,
            rho: 0.0,
            beta: 0.5,
        };
        let s = Sample {
            id: "x".into(),
            input: SampleInput::Features(vec![3.0]),
            raw_labels: vec![],
            view: None,
        };
        assert_eq!(oracle_scores(&gt, &s).unwrap(), [0.5, 0.25]);
        let bad = Sample {
            input: SampleInput::Features(vec![1.0, 2.0]),
            ..s
        };
        assert!(matches!(
            oracle_scores(&gt, &bad),
            Err(DataError::Dimension { .. })
        ));
    }

    #[test]
    fn features_round_trip_exactly() {
        let (ds, _) = generate_synthetic(&cfg(0.0, 0.5), &LabelHierarchy::chexpert()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_features(&ds, File::create(&path).unwrap()).unwrap();
        let feats = load_features(&path).unwrap();
        for (s, (id, f)) in ds.samples.iter().zip(&feats) {
            assert_eq!(&s.id, id);
            assert_eq!(s.features().unwrap(), f.as_slice());
        }
    }
}
