//! ROC/AUC, mean AUC over a label subset, reader operating points and the
//! ablation harness.

use std::fmt::{self, Write as _};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::hierarchy::LabelHierarchy;
use crate::infer::{to_unconditional, InferError};
use crate::model::{train_flat, train_two_phase, ArchConfig, ModelError, ModelParams, TrainConfig};
use crate::policy::{LabelPolicy, MissingMode, PolicyKind};
use crate::COMPETITION_LABELS;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: {positives} positives, {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {0} is not a number")]
    NonFinite(f64),
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("mean AUC over an empty label subset")]
    EmptySubset,
    #[error("label `{0}` is not in the report")]
    UnknownLabel(String),
    #[error("AUC for `{0}` is undefined (single-class ground truth)")]
    UndefinedAuc(String),
    #[error("invalid ablation row `{0}`")]
    InvalidRow(String),
    #[error("operating points: {0}")]
    OperatingPoints(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Infer(#[from] InferError),
}

/// ROC curve from a threshold sweep over the distinct scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, non-decreasing in both.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    /// TPR of the piecewise-linear curve at `fpr`. Where the curve is
    /// vertical at exactly `fpr`, the lowest TPR is returned.
    pub fn tpr_at(&self, fpr: f64) -> f64 {
        let pts = &self.points;
        let i = pts.partition_point(|p| p.0 < fpr);
        if i == pts.len() {
            return pts[i - 1].1;
        }
        if i == 0 || pts[i].0 == fpr {
            return pts[i].1;
        }
        let ((x0, y0), (x1, y1)) = (pts[i - 1], pts[i]);
        y0 + (y1 - y0) * (fpr - x0) / (x1 - x0)
    }

    pub fn write_points<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["fpr", "tpr"])?;
        for (x, y) in &self.points {
            w.write_record([format!("{x:?}"), format!("{y:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// ROC curve and AUC. Tied scores form one segment, so the area equals the
/// Mann-Whitney statistic with half credit for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            what: "labels",
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if let Some(&bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(EvalError::NonFinite(bad));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let mut points = vec![(0.0, 0.0)];
    // twice the area in units of (1 negative) x (1 positive)
    let mut area2: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / n, tp as f64 / p));
    }
    let auc = area2 as f64 / (2.0 * p * n);
    Ok(RocCurve { points, auc })
}

/// Per-label AUCs with sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub labels: Vec<String>,
    /// `None` where the label has a single class in the ground truth.
    pub auc: Vec<Option<f64>>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl AucReport {
    pub fn get(&self, label: &str) -> Option<Option<f64>> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|k| self.auc[k])
    }
}

/// Ground truth per sample and label; `None` entries are left out of that
/// label's curve.
pub type Truth = Vec<Vec<Option<bool>>>;

/// Certain labels of a dataset (positive / negative); uncertain and
/// missing entries are `None`.
pub fn dataset_truth(ds: &Dataset) -> Truth {
    ds.samples
        .iter()
        .map(|s| s.raw_labels.iter().map(|r| r.certain()).collect())
        .collect()
}

/// Evaluates every label. Returns the report and per-label curves.
pub fn evaluate(
    labels: &[String],
    scores: &[Vec<f64>],
    truth: &Truth,
) -> Result<(AucReport, Vec<Option<RocCurve>>), EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::Length {
            what: "ground-truth rows",
            expected: scores.len(),
            got: truth.len(),
        });
    }
    for (s, t) in scores.iter().zip(truth) {
        if s.len() != labels.len() || t.len() != labels.len() {
            return Err(EvalError::Length {
                what: "label columns",
                expected: labels.len(),
                got: s.len().min(t.len()),
            });
        }
    }
    type LabelResult = Result<(Option<RocCurve>, usize, usize), EvalError>;
    let per_label: Vec<LabelResult> = (0..labels.len())
        .into_par_iter()
        .map(|k| {
            let (mut sc, mut lb) = (Vec::new(), Vec::new());
            for (s, t) in scores.iter().zip(truth) {
                if let Some(y) = t[k] {
                    sc.push(s[k]);
                    lb.push(y);
                }
            }
            let pos = lb.iter().filter(|&&y| y).count();
            let neg = lb.len() - pos;
            match roc_auc(&sc, &lb) {
                Ok(c) => Ok((Some(c), pos, neg)),
                Err(EvalError::SingleClass { .. }) => Ok((None, pos, neg)),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut report = AucReport {
        labels: labels.to_vec(),
        auc: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    let mut curves = Vec::new();
    for r in per_label {
        let (c, pos, neg) = r?;
        report.auc.push(c.as_ref().map(|c| c.auc));
        report.positives.push(pos);
        report.negatives.push(neg);
        curves.push(c);
    }
    Ok((report, curves))
}

/// Arithmetic mean of the AUCs of `subset`.
pub fn mean_auc<S: AsRef<str>>(report: &AucReport, subset: &[S]) -> Result<f64, EvalError> {
    if subset.is_empty() {
        return Err(EvalError::EmptySubset);
    }
    let mut sum = 0.0;
    for label in subset {
        let label = label.as_ref();
        let auc = report
            .get(label)
            .ok_or_else(|| EvalError::UnknownLabel(label.to_string()))?
            .ok_or_else(|| EvalError::UndefinedAuc(label.to_string()))?;
        sum += auc;
    }
    Ok(sum / subset.len() as f64)
}

/// Writes `label,auc,positives,negatives` rows followed by a `Mean` row
/// over `subset` (when defined).
pub fn write_report<W: Write, S: AsRef<str>>(
    report: &AucReport,
    subset: &[S],
    writer: W,
) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["label", "auc", "positives", "negatives"])?;
    for k in 0..report.labels.len() {
        let auc = report.auc[k].map_or_else(String::new, |a| format!("{a:.6}"));
        w.write_record([
            report.labels[k].clone(),
            auc,
            report.positives[k].to_string(),
            report.negatives[k].to_string(),
        ])?;
    }
    if let Ok(m) = mean_auc(report, subset) {
        w.write_record([
            "Mean".to_string(),
            format!("{m:.6}"),
            String::new(),
            String::new(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A human reader's (FPR, TPR) for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub label: String,
    pub fpr: f64,
    pub tpr: f64,
}

/// Number of points strictly below the curve's linearly interpolated TPR.
pub fn compare_operating_points(curve: &RocCurve, points: &[OperatingPoint]) -> usize {
    points
        .iter()
        .filter(|p| p.tpr < curve.tpr_at(p.fpr))
        .count()
}

/// Reads `label,fpr,tpr` rows. A header row is skipped when present.
pub fn read_operating_points(path: &Path) -> Result<Vec<OperatingPoint>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(EvalError::OperatingPoints(format!(
                "row {}: expected 3 fields, got {}",
                i + 1,
                rec.len()
            )));
        }
        let (fpr, tpr) = match (rec[1].parse::<f64>(), rec[2].parse::<f64>()) {
            (Ok(f), Ok(t)) => (f, t),
            _ if i == 0 => continue,
            _ => {
                return Err(EvalError::OperatingPoints(format!(
                    "row {}: bad number",
                    i + 1
                )))
            }
        };
        if !(0.0..=1.0).contains(&fpr) || !(0.0..=1.0).contains(&tpr) {
            return Err(EvalError::OperatingPoints(format!(
                "row {}: ({fpr}, {tpr}) outside [0, 1]",
                i + 1
            )));
        }
        out.push(OperatingPoint {
            label: rec[0].to_string(),
            fpr,
            tpr,
        });
    }
    Ok(out)
}

/// One ablation variant: a base uncertainty approach plus the conditional
/// training (CT) and label smoothing (LSR) switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub base: PolicyKind,
    pub conditional: bool,
    pub lsr: bool,
}

impl AblationRow {
    pub fn new(base: PolicyKind, conditional: bool, lsr: bool) -> Result<Self, EvalError> {
        let row = Self {
            base,
            conditional,
            lsr,
        };
        let ok = match base {
            PolicyKind::UIgnore => !lsr,
            PolicyKind::UZeros | PolicyKind::UOnes => true,
            PolicyKind::UZerosLsr | PolicyKind::UOnesLsr => false,
        };
        if ok {
            Ok(row)
        } else {
            Err(EvalError::InvalidRow(row.name()))
        }
    }

    pub fn policy_kind(&self) -> PolicyKind {
        match (self.base, self.lsr) {
            (PolicyKind::UZeros, true) => PolicyKind::UZerosLsr,
            (PolicyKind::UOnes, true) => PolicyKind::UOnesLsr,
            (k, _) => k,
        }
    }

    pub fn name(&self) -> String {
        let mut s = self.base.display_name().to_string();
        if self.conditional {
            s.push_str("+CT");
        }
        if self.lsr {
            s.push_str("+LSR");
        }
        s
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for AblationRow {
    type Err = EvalError;

    /// Parses names like `U-Ones+CT+LSR` (case-insensitive).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let mut parts = lower.split('+');
        let base = match parts.next() {
            Some("u-ignore") => PolicyKind::UIgnore,
            Some("u-zeros") => PolicyKind::UZeros,
            Some("u-ones") => PolicyKind::UOnes,
            _ => return Err(EvalError::InvalidRow(s.to_string())),
        };
        let (mut ct, mut lsr) = (false, false);
        for p in parts {
            match p {
                "ct" if !ct => ct = true,
                "lsr" if !lsr => lsr = true,
                _ => return Err(EvalError::InvalidRow(s.to_string())),
            }
        }
        AblationRow::new(base, ct, lsr)
    }
}

/// The ten variants in results-table order.
pub fn default_matrix() -> Vec<AblationRow> {
    use PolicyKind::*;
    [
        (UIgnore, false, false),
        (UIgnore, true, false),
        (UZeros, false, false),
        (UZeros, true, false),
        (UZeros, false, true),
        (UZeros, true, true),
        (UOnes, false, false),
        (UOnes, true, false),
        (UOnes, false, true),
        (UOnes, true, true),
    ]
    .into_iter()
    .map(|(b, c, l)| AblationRow {
        base: b,
        conditional: c,
        lsr: l,
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub arch: ArchConfig,
    /// Labels reported as columns and averaged into `Mean`.
    pub subset: Vec<String>,
    pub missing: MissingMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            arch: ArchConfig::default(),
            subset: COMPETITION_LABELS.iter().map(|s| s.to_string()).collect(),
            missing: MissingMode::Negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    /// AUC per subset label, in column order.
    pub auc: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<AblationResult>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["Method".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("Mean".into());
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.name.clone()];
            rec.extend(r.auc.iter().map(|a| format!("{a:.6}")));
            rec.push(format!("{:.6}", r.mean));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    /// Aligned plain-text rendering, three decimals.
    pub fn to_text(&self) -> String {
        let mut header = vec!["Method".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("Mean".into());
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut v = vec![r.name.clone()];
                v.extend(r.auc.iter().map(|a| format!("{a:.3}")));
                v.push(format!("{:.3}", r.mean));
                v
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                body.iter()
                    .map(|r| r[c].len())
                    .chain([header[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let mut line = |cells: &[String]| {
            let mut s = String::new();
            for (c, cell) in cells.iter().enumerate() {
                if c == 0 {
                    let _ = write!(s, "{cell:<w$}", w = widths[c]);
                } else {
                    let _ = write!(s, "  {cell:>w$}", w = widths[c]);
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(&header);
        line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
        for r in &body {
            line(r);
        }
        out
    }
}

/// Model scores for every sample of a feature dataset. With a hierarchy the
/// outputs are read as conditional and converted to unconditional.
pub fn score_dataset(
    params: &ModelParams,
    ds: &Dataset,
    h: Option<&LabelHierarchy>,
) -> Result<Vec<Vec<f64>>, EvalError> {
    ds.samples
        .iter()
        .map(|s| {
            let x = s.features().ok_or_else(|| {
                ModelError::Data(crate::data::DataError::NoFeatures(s.id.clone()))
            })?;
            let p = params.forward(x)?.cond_probs;
            Ok(match h {
                Some(h) => to_unconditional(&p, h)?.probs,
                None => p,
            })
        })
        .collect()
}

/// Trains one variant and returns its validation scores.
pub fn run_row(
    row: &AblationRow,
    train: &Dataset,
    val: &Dataset,
    h: &LabelHierarchy,
    cfg: &AblationConfig,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let policy = LabelPolicy::new(row.policy_kind()).with_missing(cfg.missing);
    if row.conditional {
        let out = train_two_phase(train, h, &policy, &cfg.train, &cfg.arch)?;
        score_dataset(&out.params, val, Some(h))
    } else {
        let out = train_flat(train, &policy, &cfg.train, &cfg.arch)?;
        score_dataset(&out.params, val, None)
    }
}

/// Trains every row from the same seed and evaluates it on `val`.
pub fn run_ablation(
    train: &Dataset,
    val: &Dataset,
    h: &LabelHierarchy,
    matrix: &[AblationRow],
    cfg: &AblationConfig,
) -> Result<AblationTable, EvalError> {
    for row in matrix {
        AblationRow::new(row.base, row.conditional, row.lsr)?;
    }
    if cfg.subset.is_empty() {
        return Err(EvalError::EmptySubset);
    }
    for label in &cfg.subset {
        if h.index_of(label).is_none() {
            return Err(EvalError::UnknownLabel(label.clone()));
        }
    }
    let truth = dataset_truth(val);
    let results: Vec<Result<AblationResult, EvalError>> = matrix
        .par_iter()
        .map(|row| {
            let scores = run_row(row, train, val, h, cfg)?;
            let (report, _) = evaluate(h.labels(), &scores, &truth)?;
            let auc = cfg
                .subset
                .iter()
                .map(|l| {
                    report
                        .get(l)
                        .flatten()
                        .ok_or_else(|| EvalError::UndefinedAuc(l.clone()))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            Ok(AblationResult {
                name: row.name(),
                mean: mean_auc(&report, &cfg.subset)?,
                auc,
            })
        })
        .collect();
    Ok(AblationTable {
        columns: cfg.subset.clone(),
        rows: results.into_iter().collect::<Result<_, _>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pairwise rank statistic over all positive/negative pairs.
    fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    fn trapezoid(points: &[(f64, f64)]) -> f64 {
        points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    #[test]
    fn four_point_fixture() {
        let c = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((c.auc - 0.75).abs() < 1e-12);
        assert_eq!(
            brute_force_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]),
            0.75
        );
    }

    #[test]
    fn separated_and_tied() {
        let c = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(c.auc, 1.0);
        let c = roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(c.auc, 0.5);
        assert_eq!(c.points, vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn single_class_and_nan_rejected() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(EvalError::SingleClass {
                positives: 2,
                negatives: 0
            })
        ));
        assert!(matches!(
            roc_auc(&[f64::NAN, 0.2], &[true, false]),
            Err(EvalError::NonFinite(_))
        ));
    }

    #[test]
    fn five_label_mean_fixture() {
        let labels: Vec<String> = COMPETITION_LABELS.iter().map(|s| s.to_string()).collect();
        let report = AucReport {
            labels: labels.clone(),
            auc: [0.909, 0.910, 0.957, 0.958, 0.964].map(Some).to_vec(),
            positives: vec![1; 5],
            negatives: vec![1; 5],
        };
        assert!((mean_auc(&report, &labels).unwrap() - 0.9396).abs() < 1e-12);
        assert_eq!(mean_auc(&report, &["Edema"]).unwrap(), 0.958);
        assert!(matches!(
            mean_auc::<&str>(&report, &[]),
            Err(EvalError::EmptySubset)
        ));
        assert!(matches!(
            mean_auc(&report, &["Nope"]),
            Err(EvalError::UnknownLabel(_))
        ));
    }

    fn op(fpr: f64, tpr: f64) -> OperatingPoint {
        OperatingPoint {
            label: "x".into(),
            fpr,
            tpr,
        }
    }

    #[test]
    fn operating_points() {
        let diag = RocCurve {
            points: vec![(0.0, 0.0), (1.0, 1.0)],
            auc: 0.5,
        };
        assert_eq!(compare_operating_points(&diag, &[op(0.5, 0.4)]), 1);
        assert_eq!(compare_operating_points(&diag, &[op(0.5, 0.5)]), 0);
        let c = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        for &(x, y) in &c.points {
            assert_eq!(compare_operating_points(&c, &[op(x, y)]), 0);
        }
        assert_eq!(
            compare_operating_points(&c, &[op(0.1, 0.9), op(0.6, 1.0), op(0.0, 0.6)]),
            0
        );
    }

    #[test]
    fn vertical_segment_uses_lowest_tpr() {
        let c = RocCurve {
            points: vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)],
            auc: 0.75,
        };
        assert_eq!(c.tpr_at(0.0), 0.0);
        assert_eq!(c.tpr_at(0.5), 0.5);
        assert_eq!(c.tpr_at(0.25), 0.5);
        assert_eq!(c.tpr_at(0.75), 1.0);
    }

    #[test]
    fn matrix_structure() {
        let m = default_matrix();
        assert_eq!(m.len(), 10);
        let names: Vec<String> = m.iter().map(|r| r.name()).collect();
        assert_eq!(names[0], "U-Ignore");
        assert_eq!(names[5], "U-Zeros+CT+LSR");
        assert_eq!(names[9], "U-Ones+CT+LSR");
        for r in &m {
            assert_eq!(r.name().parse::<AblationRow>().unwrap(), *r);
        }
        assert!("u-ignore+lsr".parse::<AblationRow>().is_err());
        assert!("u-ones+ct+ct".parse::<AblationRow>().is_err());
        assert_eq!(m[8].policy_kind(), PolicyKind::UOnesLsr);
    }

    #[test]
    fn text_table_is_aligned() {
        let t = AblationTable {
            columns: vec!["A".into(), "Longer".into()],
            rows: vec![AblationResult {
                name: "U-Ones+CT".into(),
                auc: vec![0.5, 0.75],
                mean: 0.625,
            }],
        };
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].len(), lines[2].len());
        assert!(lines[2].starts_with("U-Ones+CT"));
        assert_eq!(
            t.to_csv(),
            "Method,A,Longer,Mean\nU-Ones+CT,0.500000,0.750000,0.625000\n"
        );
    }

    #[test]
    fn evaluate_skips_unknown_truth() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.5], vec![0.6, 0.3]];
        let truth = vec![
            vec![Some(true), Some(false)],
            vec![Some(false), None],
            vec![None, Some(false)],
        ];
        let (r, curves) = evaluate(&labels, &scores, &truth).unwrap();
        assert_eq!(r.auc[0], Some(1.0));
        assert_eq!(r.auc[1], None);
        assert_eq!((r.positives[0], r.negatives[0]), (1, 1));
        assert!(curves[1].is_none());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..8).prop_map(|v| v as f64 / 4.0), n),
                proptest::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle((scores, labels) in instance()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let c = roc_auc(&scores, &labels).unwrap();
            prop_assert!((c.auc - brute_force_auc(&scores, &labels)).abs() <= 1e-12);
            prop_assert!((c.auc - trapezoid(&c.points)).abs() <= 1e-12);
            prop_assert_eq!(c.points[0], (0.0, 0.0));
            prop_assert_eq!(*c.points.last().unwrap(), (1.0, 1.0));
            for w in c.points.windows(2) {
                prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
            }
        }

        #[test]
        fn monotone_transform_invariance((scores, labels) in instance()) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = roc_auc(&scores, &labels).unwrap().auc;
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(a, roc_auc(&t, &labels).unwrap().auc);
        }

        #[test]
        fn densification_invariance(
            (scores, labels) in instance(),
            pts in proptest::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 1..20),
            splits in proptest::collection::vec(0.05..0.95f64, 1..5),
        ) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let c = roc_auc(&scores, &labels).unwrap();
            let mut dense = vec![c.points[0]];
            for w in c.points.windows(2) {
                for &t in &splits {
                    let x = w[0].0 + t * (w[1].0 - w[0].0);
                    let y = w[0].1 + t * (w[1].1 - w[0].1);
                    if w[0].0 < x && x < w[1].0 {
                        dense.push((x, y));
                    }
                }
                dense.push(w[1]);
            }
            dense.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let d = RocCurve { points: dense, auc: c.auc };
            let ops: Vec<OperatingPoint> = pts.iter().map(|&(x, y)| op(x, y)).collect();
            prop_assert_eq!(
                compare_operating_points(&c, &ops),
                compare_operating_points(&d, &ops)
            );
        }
    }
}
