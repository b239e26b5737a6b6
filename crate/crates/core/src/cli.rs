//! `hiercxr` command line.
//!
//! Every subcommand writes its artifacts into `--out DIR` together with a
//! `manifest.json` holding the resolved configuration, the seed, SHA-256
//! digests of all inputs and the list of outputs. Manifests carry no
//! timestamps or absolute output paths, so identical runs produce identical
//! bytes.
//!
//! Settings resolve as: command-line flag, then `--config FILE` (a TOML
//! table whose keys are flag names, `lr-decay` or `lr_decay`), then the
//! built-in default.
//!
//! Exit codes: 0 success, 2 usage, 3 data or schema error, 4 numeric
//! failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{
    self, generate_synthetic_draw, load_csv, load_features, write_features, write_labels,
    DataError, Dataset, SampleInput, SyntheticConfig, ViewFilter,
};
use crate::eval::{
    self, compare_operating_points, dataset_truth, default_matrix, evaluate, mean_auc,
    read_operating_points, write_report, AblationConfig, AblationRow, EvalError,
};
use crate::hierarchy::LabelHierarchy;
use crate::infer::{
    ensemble_predict, write_predictions, AverageOrder, EnsembleOptions, InferError, ModelInput,
    TtaConfig,
};
use crate::model::{
    train_flat, train_two_phase, ArchConfig, Checkpoint, CheckpointError, ModelError, ModelParams,
    Phase2Targets, TrainConfig, TrainingMode,
};
use crate::policy::{LabelPolicy, MissingMode, PolicyKind};
use crate::preprocess::{preprocess_image, GrayImage, PreprocessConfig, PreprocessError};
use crate::seed::{derive_seed, sha256_hex};
use crate::COMPETITION_LABELS;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.to_string(),
        }
    }

    pub fn data(msg: impl Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: msg.to_string(),
        }
    }

    pub fn numeric(msg: impl Display) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: msg.to_string(),
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) => CliError::usage(e),
            _ => CliError::data(e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite(_) => CliError::numeric(e),
            ModelError::InvalidConfig(_) => CliError::usage(e),
            _ => CliError::data(e),
        }
    }
}

impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::Model(m) => m.into(),
            InferError::TtaOnFeatures | InferError::ZeroTta => CliError::usage(e),
            _ => CliError::data(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Infer(i) => i.into(),
            EvalError::EmptySubset | EvalError::InvalidRow(_) => CliError::usage(e),
            EvalError::NonFinite(_) => CliError::numeric(e),
            _ => CliError::data(e),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e)
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::InvalidConfig(_) | PreprocessError::TemplateSize { .. } => {
                CliError::usage(e)
            }
            _ => CliError::data(e),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "hiercxr",
    version,
    about = "Hierarchical multi-label chest X-ray toolkit"
)]
pub struct Cli {
    /// TOML file with default values for any flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset from a random ground-truth model.
    Gen(GenArgs),
    /// Rescale, template-match, crop and normalize a directory of PGM images.
    Preprocess(PreprocessArgs),
    /// Train a model (two-phase with --conditional, flat otherwise).
    Train(TrainArgs),
    /// Predict unconditional probabilities with one checkpoint.
    Predict(PredictArgs),
    /// Average several checkpoints.
    Ensemble(PredictArgs),
    /// Per-label AUC, mean AUC and reader operating-point counts.
    Eval(EvalArgs),
    /// Train and evaluate an ablation matrix.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Label hierarchy file (default: built-in CheXpert tree).
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Fraction of label entries replaced by uncertain (-1).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Share of uncertain entries drawn from truly positive labels.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub bias_range: Option<f64>,
    /// Size of a clean held-out split (0: none).
    #[arg(long)]
    pub val_n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    #[arg(long)]
    pub resize: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    /// Template PGM (default: built-in synthetic template).
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of `.pgm` files.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub image: ImageArgs,
    /// Also write a features CSV keyed by file stem.
    #[arg(long)]
    pub features: bool,
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub lsr_low: Option<f64>,
    #[arg(long)]
    pub lsr_high: Option<f64>,
    /// `negative` or `ignore`.
    #[arg(long)]
    pub missing: Option<String>,
    /// Redraw LSR targets every epoch.
    #[arg(long)]
    pub lsr_resample: bool,
    #[arg(long)]
    pub epochs_p1: Option<usize>,
    #[arg(long)]
    pub epochs_p2: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Hidden layer widths, e.g. `64,64`; empty for a linear model.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Keep only frontal views.
    #[arg(long)]
    pub frontal_only: bool,
    /// Phase-2 child targets: `conditional` (default) or `unconditional`.
    #[arg(long)]
    pub phase2_targets: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Label CSV (`Id` or `Path` column plus one column per label).
    #[arg(long)]
    pub labels: PathBuf,
    /// Feature CSV (`Id`, then values). Without it, `Path` images are loaded.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Root for relative image paths (default: the label file's directory).
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[command(flatten)]
    pub image: ImageArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Two-phase conditional training.
    #[arg(long)]
    pub conditional: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint file(s).
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// Feature CSV to score.
    #[arg(long, conflicts_with = "images")]
    pub features: Option<PathBuf>,
    /// Directory of `.pgm` images to score.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[command(flatten)]
    pub image: ImageArgs,
    /// Test-time augmentation copies per image (0: off).
    #[arg(long)]
    pub tta: Option<usize>,
    /// `average-then-convert` or `convert-then-average`.
    #[arg(long)]
    pub order: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Prediction CSV (`Id` plus label columns).
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground-truth label CSV.
    #[arg(long)]
    pub labels: PathBuf,
    /// Mean-AUC labels, comma separated.
    #[arg(long)]
    pub subset: Option<String>,
    /// CSV of `label,fpr,tpr` reader operating points.
    #[arg(long)]
    pub rad_points: Option<PathBuf>,
    /// Dump per-label ROC point lists.
    #[arg(long)]
    pub roc: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub train_labels: PathBuf,
    #[arg(long)]
    pub train_features: PathBuf,
    #[arg(long)]
    pub val_labels: PathBuf,
    #[arg(long)]
    pub val_features: PathBuf,
    /// `default` or a comma-separated list such as `U-Ones,U-Ones+CT+LSR`.
    #[arg(long)]
    pub matrix: Option<String>,
    #[arg(long)]
    pub subset: Option<String>,
    #[command(flatten)]
    pub training: TrainingArgs,
}

/// Values from `--config`, consulted when a flag is absent.
#[derive(Debug, Default)]
struct Settings {
    table: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let mut out = BTreeMap::new();
        for (k, v) in table {
            let s = match v {
                toml::Value::String(s) => s,
                toml::Value::Array(items) => items
                    .iter()
                    .map(|i| match i {
                        toml::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            out.insert(k.replace('_', "-"), s);
        }
        Ok(Self { table: out })
    }

    fn get<T>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn opt<T>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.table.get(key) {
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e| CliError::usage(format!("config key `{key}`: {e}"))),
            None => Ok(None),
        }
    }

    fn switch(&self, flag: bool, key: &str) -> CliResult<bool> {
        if flag {
            return Ok(true);
        }
        self.get(None, key, false)
    }
}

#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: String,
    toolkit_version: String,
    seed: u64,
    config: Value,
    /// Input path (as given) to SHA-256 of its contents.
    inputs: BTreeMap<String, String>,
    /// Output file names relative to the output directory.
    outputs: Vec<String>,
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(subcommand: &str, out: &Path, seed: u64) -> CliResult<Self> {
        fs::create_dir_all(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest: RunManifest {
                subcommand: subcommand.into(),
                toolkit_version: env!("CARGO_PKG_VERSION").into(),
                seed,
                config: Value::Null,
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
            },
        })
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes =
            fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        self.manifest
            .inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)
                .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        self.manifest.outputs.push(name.to_string());
        Ok(path)
    }

    fn finish(mut self, config: Value) -> CliResult<()> {
        self.manifest.config = config;
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.out.join("manifest.json");
        fs::write(&path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

/// Parses argv, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    if let Some(n) = settings.opt(cli.threads, "threads")? {
        // Ignored if a global pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(a, &settings),
        Command::Preprocess(a) => cmd_preprocess(a, &settings),
        Command::Train(a) => cmd_train(a, &settings),
        Command::Predict(a) => {
            if a.models.len() != 1 {
                return Err(CliError::usage(
                    "predict takes exactly one model; use `ensemble` for more",
                ));
            }
            cmd_predict("predict", a, &settings)
        }
        Command::Ensemble(a) => cmd_predict("ensemble", a, &settings),
        Command::Eval(a) => cmd_eval(a, &settings),
        Command::Ablate(a) => cmd_ablate(a, &settings),
    }
}

fn load_hierarchy(path: Option<&Path>, run: &mut Run) -> CliResult<LabelHierarchy> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
            run.input(p)?;
            LabelHierarchy::parse(&text)
                .map_err(|e| CliError::data(format!("{}: {e}", p.display())))
        }
        None => Ok(LabelHierarchy::chexpert()),
    }
}

fn hierarchy_arg(common: &Common, s: &Settings) -> CliResult<Option<PathBuf>> {
    s.opt(common.hierarchy.clone(), "hierarchy")
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), DataError>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn write_dataset(run: &mut Run, ds: &Dataset, prefix: &str) -> CliResult<()> {
    let labels = csv_bytes(|b| {
        write_labels(ds, b).map_err(|source| DataError::Csv {
            path: PathBuf::from(format!("{prefix}_labels.csv")),
            source,
        })
    })?;
    run.write(&format!("{prefix}_labels.csv"), labels)?;
    let feats = csv_bytes(|b| write_features(ds, b))?;
    run.write(&format!("{prefix}_features.csv"), feats)?;
    Ok(())
}

fn cmd_gen(a: GenArgs, s: &Settings) -> CliResult<()> {
    let d = SyntheticConfig::default();
    let seed = s.get(a.common.seed, "seed", 0)?;
    let cfg = SyntheticConfig {
        dim: s.get(a.dim, "dim", d.dim)?,
        n: s.get(a.n, "n", d.n)?,
        rho: s.get(a.rho, "rho", d.rho)?,
        beta: s.get(a.beta, "beta", d.beta)?,
        signal: s.get(a.signal, "signal", d.signal)?,
        bias_range: s.get(a.bias_range, "bias-range", d.bias_range)?,
        seed,
    };
    let val_n = s.get(a.val_n, "val-n", 0usize)?;
    let mut run = Run::start("gen", &a.common.out, seed)?;
    let h = load_hierarchy(hierarchy_arg(&a.common, s)?.as_deref(), &mut run)?;

    let (draw, gt) = generate_synthetic_draw(&cfg, &h)?;
    write_dataset(&mut run, &draw.dataset, "train")?;
    run.write("ground_truth.json", gt.to_json())?;
    if val_n > 0 {
        let mut rng = crate::seed::component_rng(seed, "gen/val");
        let val = gt.sample(val_n, 0.0, cfg.beta, "v", &mut rng)?;
        write_dataset(&mut run, &val.dataset, "val")?;
    }
    run.finish(json!({
        "synthetic": cfg,
        "val_n": val_n,
        "hierarchy_digest": h.digest(),
    }))
}

fn image_config(a: &ImageArgs, s: &Settings, run: &mut Run) -> CliResult<PreprocessConfig> {
    let resize = s.get(a.resize, "resize", 256usize)?;
    let crop = s.get(a.crop, "crop", 224usize)?;
    let mut cfg = PreprocessConfig::with_sizes(resize, crop);
    if let Some(t) = s.opt(a.template.clone(), "template")? {
        run.input(&t)?;
        cfg.template = GrayImage::load_pgm(&t)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn image_config_json(cfg: &PreprocessConfig, custom_template: bool) -> Value {
    json!({
        "resize": cfg.resize,
        "crop": cfg.crop,
        "mean": cfg.mean,
        "std": cfg.std,
        "template": if custom_template { "file" } else { "built-in" },
    })
}

fn list_pgm(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::data(format!("{}: no .pgm files", dir.display())));
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn cmd_preprocess(a: PreprocessArgs, s: &Settings) -> CliResult<()> {
    let seed = s.get(a.common.seed, "seed", 0)?;
    let mut run = Run::start("preprocess", &a.common.out, seed)?;
    let custom = a.image.template.is_some() || s.table.contains_key("template");
    let cfg = image_config(&a.image, s, &mut run)?;
    let files = list_pgm(&a.input)?;
    for f in &files {
        run.input(f)?;
    }
    let results: Vec<CliResult<(String, crate::preprocess::Preprocessed)>> = files
        .par_iter()
        .map(|f| {
            let img = GrayImage::load_pgm(f)?;
            Ok((stem(f), preprocess_image(&img, &cfg)?))
        })
        .collect();
    let mut manifest = csv::Writer::from_writer(Vec::new());
    manifest
        .write_record(["file", "row", "col", "ncc", "fallback"])
        .map_err(CliError::data)?;
    let mut features = Vec::new();
    for r in results {
        let (name, p) = r?;
        run.write(&format!("tensors/{name}.json"), p.image.to_tensor_json())?;
        manifest
            .write_record([
                format!("{name}.pgm"),
                p.matched.row.to_string(),
                p.matched.col.to_string(),
                p.matched
                    .score
                    .map_or_else(String::new, |v| format!("{v:.6}")),
                p.matched.is_fallback().to_string(),
            ])
            .map_err(CliError::data)?;
        features.push((name, p.image.data));
    }
    run.write(
        "manifest.csv",
        manifest
            .into_inner()
            .map_err(|e| CliError::data(e.error()))?,
    )?;
    if s.switch(a.features, "features")? {
        run.write("features.csv", features_csv(&features)?)?;
    }
    run.finish(json!({ "preprocess": image_config_json(&cfg, custom) }))
}

fn features_csv(rows: &[(String, Vec<f64>)]) -> CliResult<Vec<u8>> {
    let ds = Dataset {
        samples: rows
            .iter()
            .map(|(id, f)| data::Sample {
                id: id.clone(),
                input: SampleInput::Features(f.clone()),
                raw_labels: Vec::new(),
                view: None,
            })
            .collect(),
        schema: Vec::new(),
        source: data::DataSource::Csv,
    };
    csv_bytes(|b| write_features(&ds, b))
}

struct ResolvedTraining {
    policy: LabelPolicy,
    cfg: TrainConfig,
    arch: ArchConfig,
    filter: ViewFilter,
}

fn parse_hidden(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|e| CliError::usage(format!("--hidden `{t}`: {e}")))
        })
        .collect()
}

fn resolve_training(a: &TrainingArgs, seed: u64, s: &Settings) -> CliResult<ResolvedTraining> {
    let kind: PolicyKind = s
        .get(a.policy.clone(), "policy", "u-ones".to_string())?
        .parse()
        .map_err(CliError::usage)?;
    let missing: MissingMode = s
        .get(a.missing.clone(), "missing", "negative".to_string())?
        .parse()
        .map_err(CliError::usage)?;
    let (dl, dh) = kind.default_interval();
    let mut policy = LabelPolicy::new(kind).with_missing(missing);
    if kind.is_lsr() {
        let low = s.get(a.lsr_low, "lsr-low", dl)?;
        let high = s.get(a.lsr_high, "lsr-high", dh)?;
        policy = policy.with_interval(low, high).map_err(CliError::usage)?;
    }
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: s.get(a.lr, "lr", d.lr)?,
        lr_decay: s.get(a.lr_decay, "lr-decay", d.lr_decay)?,
        batch_size: s.get(a.batch, "batch", d.batch_size)?,
        phase1_epochs: s.get(a.epochs_p1, "epochs-p1", d.phase1_epochs)?,
        phase2_epochs: s.get(a.epochs_p2, "epochs-p2", d.phase2_epochs)?,
        lsr_resample: s.switch(a.lsr_resample, "lsr-resample")?,
        phase2_targets: match s
            .get(
                a.phase2_targets.clone(),
                "phase2-targets",
                "conditional".to_string(),
            )?
            .as_str()
        {
            "conditional" => Phase2Targets::Conditional,
            "unconditional" => Phase2Targets::Unconditional,
            other => {
                return Err(CliError::usage(format!(
                    "unknown --phase2-targets `{other}`"
                )))
            }
        },
        seed,
        ..d
    };
    cfg.validate()?;
    let hidden = match s.opt(a.hidden.clone(), "hidden")? {
        Some(h) => parse_hidden(&h)?,
        None => ArchConfig::default().hidden,
    };
    let filter = if s.switch(a.frontal_only, "frontal-only")? {
        ViewFilter::FrontalOnly
    } else {
        ViewFilter::All
    };
    Ok(ResolvedTraining {
        policy,
        cfg,
        arch: ArchConfig { hidden },
        filter,
    })
}

fn load_feature_dataset(
    labels: &Path,
    features: &Path,
    h: &LabelHierarchy,
    filter: ViewFilter,
    run: &mut Run,
) -> CliResult<Dataset> {
    run.input(labels)?;
    let mut ds = load_csv(labels, h, filter)?;
    run.input(features)?;
    ds.attach_features(&load_features(features)?)?;
    Ok(ds)
}

fn bind_images(ds: &mut Dataset, root: &Path, pre: &PreprocessConfig) -> CliResult<()> {
    let bound: Vec<CliResult<Vec<f64>>> = ds
        .samples
        .par_iter()
        .map(|s| match &s.input {
            SampleInput::Image(p) => {
                let img = GrayImage::load_pgm(&root.join(p))?;
                Ok(preprocess_image(&img, pre)?.image.data)
            }
            SampleInput::Features(f) => Ok(f.clone()),
            SampleInput::Unbound => Err(DataError::NoFeatures(s.id.clone()).into()),
        })
        .collect();
    for (s, f) in ds.samples.iter_mut().zip(bound) {
        s.input = SampleInput::Features(f?);
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, s: &Settings) -> CliResult<()> {
    let seed = s.get(a.common.seed, "seed", 0)?;
    let t = resolve_training(&a.training, seed, s)?;
    let conditional = s.switch(a.conditional, "conditional")?;
    let mut run = Run::start("train", &a.common.out, seed)?;
    let h = load_hierarchy(hierarchy_arg(&a.common, s)?.as_deref(), &mut run)?;
    let features = s.opt(a.features.clone(), "features")?;
    let mut image_cfg = Value::Null;
    let ds = match features {
        Some(f) => load_feature_dataset(&a.labels, &f, &h, t.filter, &mut run)?,
        None => {
            run.input(&a.labels)?;
            let mut ds = load_csv(&a.labels, &h, t.filter)?;
            let custom = a.image.template.is_some() || s.table.contains_key("template");
            let pre = image_config(&a.image, s, &mut run)?;
            let root = match s.opt(a.image_root.clone(), "image-root")? {
                Some(r) => r,
                None => a.labels.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            bind_images(&mut ds, &root, &pre)?;
            image_cfg = image_config_json(&pre, custom);
            ds
        }
    };
    let (outcome, mode) = if conditional {
        (
            train_two_phase(&ds, &h, &t.policy, &t.cfg, &t.arch)?,
            TrainingMode::TwoPhase,
        )
    } else {
        (
            train_flat(&ds, &t.policy, &t.cfg, &t.arch)?,
            TrainingMode::Flat,
        )
    };
    let ck = Checkpoint::new(
        outcome.params,
        mode,
        &t.arch,
        &h,
        t.policy.descriptor(),
        &t.cfg,
    );
    run.write("model.json", ck.to_json())?;
    let mut log = serde_json::to_string_pretty(&outcome.log).expect("log serializes");
    log.push('\n');
    run.write("train_log.json", log)?;
    run.finish(json!({
        "training": mode,
        "policy": t.policy.descriptor(),
        "train": t.cfg,
        "architecture": t.arch,
        "view_filter": format!("{:?}", t.filter),
        "samples": ds.len(),
        "hierarchy_digest": h.digest(),
        "preprocess": image_cfg,
    }))
}

fn cmd_predict(name: &str, a: PredictArgs, s: &Settings) -> CliResult<()> {
    let seed = s.get(a.common.seed, "seed", 0)?;
    let tta_n = s.get(a.tta, "tta", 0usize)?;
    let order = match s
        .get(a.order.clone(), "order", "average-then-convert".to_string())?
        .as_str()
    {
        "average-then-convert" => AverageOrder::AverageThenConvert,
        "convert-then-average" => AverageOrder::ConvertThenAverage,
        other => return Err(CliError::usage(format!("unknown --order `{other}`"))),
    };
    let mut run = Run::start(name, &a.common.out, seed)?;
    let h = load_hierarchy(hierarchy_arg(&a.common, s)?.as_deref(), &mut run)?;

    let mut models = Vec::new();
    let mut ids = Vec::new();
    let mut mode = None;
    for p in &a.models {
        run.input(p)?;
        let ck = Checkpoint::load(p)?;
        ck.check_hierarchy(&h)?;
        if *mode.get_or_insert(ck.training) != ck.training {
            return Err(CliError::data(
                "cannot mix two-phase and flat checkpoints in one ensemble",
            ));
        }
        ids.push(stem(p));
        models.push(ck.params);
    }
    let mode = mode.expect("at least one model");
    // Flat models already output unconditional probabilities.
    let read_as = match mode {
        TrainingMode::TwoPhase => h.clone(),
        TrainingMode::Flat => LabelHierarchy::flat(h.labels()).expect("labels are unique"),
    };

    let features = s.opt(a.features.clone(), "features")?;
    let images = s.opt(a.images.clone(), "images")?;
    let mut opts = EnsembleOptions {
        order,
        model_ids: ids,
        ..Default::default()
    };
    let mut pre_json = Value::Null;
    let rows: Vec<(String, Vec<f64>)> = match (features, images) {
        (Some(f), None) => {
            if tta_n > 0 {
                return Err(InferError::TtaOnFeatures.into());
            }
            run.input(&f)?;
            let feats = load_features(&f)?;
            predict_rows(
                &models,
                &read_as,
                &opts,
                feats.iter().map(|(id, x)| (id.clone(), Input::Features(x))),
            )?
        }
        (None, Some(dir)) => {
            let custom = a.image.template.is_some() || s.table.contains_key("template");
            let pre = image_config(&a.image, s, &mut run)?;
            pre_json = image_config_json(&pre, custom);
            opts.preprocess = Some(pre);
            if tta_n > 0 {
                opts.tta = Some(TtaConfig {
                    count: tta_n,
                    seed: derive_seed(seed, "predict"),
                    ..Default::default()
                });
            }
            let files = list_pgm(&dir)?;
            let mut imgs = Vec::new();
            for f in &files {
                run.input(f)?;
                imgs.push((stem(f), GrayImage::load_pgm(f)?));
            }
            predict_rows(
                &models,
                &read_as,
                &opts,
                imgs.iter().map(|(id, img)| (id.clone(), Input::Image(img))),
            )?
        }
        _ => {
            return Err(CliError::usage(
                "give exactly one of --features or --images",
            ))
        }
    };
    let mut buf = Vec::new();
    write_predictions(&mut buf, h.labels(), &rows).map_err(CliError::data)?;
    run.write("predictions.csv", buf)?;
    run.finish(json!({
        "training": mode,
        "order": order,
        "tta": opts.tta,
        "preprocess": pre_json,
        "models": opts.model_ids,
        "hierarchy_digest": h.digest(),
    }))
}

enum Input<'a> {
    Features(&'a [f64]),
    Image(&'a GrayImage),
}

fn predict_rows<'a>(
    models: &[ModelParams],
    h: &LabelHierarchy,
    opts: &EnsembleOptions,
    inputs: impl Iterator<Item = (String, Input<'a>)>,
) -> CliResult<Vec<(String, Vec<f64>)>> {
    let inputs: Vec<(String, Input<'a>)> = inputs.collect();
    let out: Vec<CliResult<(String, Vec<f64>)>> = inputs
        .par_iter()
        .map(|(id, x)| {
            let input = match x {
                Input::Features(f) => ModelInput::Features(f),
                Input::Image(i) => ModelInput::Image(i),
            };
            Ok((id.clone(), ensemble_predict(models, input, h, opts)?.probs))
        })
        .collect();
    out.into_iter().collect()
}

fn parse_subset(arg: Option<String>, s: &Settings) -> CliResult<Vec<String>> {
    match s.opt(arg, "subset")? {
        Some(list) => {
            let v: Vec<String> = list
                .split(',')
                .map(|t| t.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect();
            if v.is_empty() {
                return Err(CliError::usage("--subset is empty"));
            }
            Ok(v)
        }
        None => Ok(COMPETITION_LABELS.iter().map(|l| l.to_string()).collect()),
    }
}

fn read_prediction_csv(path: &Path, labels: &[String]) -> CliResult<BTreeMap<String, Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let header = rdr
        .headers()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let id_col = col("Id")
        .ok_or_else(|| CliError::data(format!("{}: missing column 'Id'", path.display())))?;
    let cols = labels
        .iter()
        .map(|l| {
            col(l)
                .ok_or_else(|| CliError::data(format!("{}: missing column '{l}'", path.display())))
        })
        .collect::<CliResult<Vec<usize>>>()?;
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let vals =
            cols.iter()
                .map(|&c| {
                    rec[c].trim().parse::<f64>().map_err(|e| {
                        CliError::data(format!("{}: row {}: {e}", path.display(), i + 1))
                    })
                })
                .collect::<CliResult<Vec<f64>>>()?;
        out.insert(rec[id_col].to_string(), vals);
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs, s: &Settings) -> CliResult<()> {
    let seed = s.get(a.common.seed, "seed", 0)?;
    let subset = parse_subset(a.subset.clone(), s)?;
    let mut run = Run::start("eval", &a.common.out, seed)?;
    let h = load_hierarchy(hierarchy_arg(&a.common, s)?.as_deref(), &mut run)?;
    run.input(&a.labels)?;
    let truth_ds = load_csv(&a.labels, &h, ViewFilter::All)?;
    run.input(&a.predictions)?;
    let preds = read_prediction_csv(&a.predictions, h.labels())?;
    let mut scores = Vec::with_capacity(truth_ds.len());
    for sample in &truth_ds.samples {
        let p = preds.get(&sample.id).ok_or_else(|| {
            CliError::data(format!(
                "{}: no prediction for '{}'",
                a.predictions.display(),
                sample.id
            ))
        })?;
        scores.push(p.clone());
    }
    let (report, curves) = evaluate(h.labels(), &scores, &dataset_truth(&truth_ds))?;
    let mean = mean_auc(&report, &subset)?;
    let mut buf = Vec::new();
    write_report(&report, &subset, &mut buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    run.write("report.csv", buf)?;

    if a.roc || s.switch(false, "roc")? {
        for (label, curve) in h.labels().iter().zip(&curves) {
            if let Some(c) = curve {
                let mut b = Vec::new();
                c.write_points(&mut b).map_err(CliError::data)?;
                run.write(&format!("roc/{}.csv", label.replace([' ', '/'], "_")), b)?;
            }
        }
    }
    let mut counts = Value::Null;
    if let Some(rp) = s.opt(a.rad_points.clone(), "rad-points")? {
        run.input(&rp)?;
        let points = read_operating_points(&rp)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "points", "below"])
            .map_err(CliError::data)?;
        let mut map = serde_json::Map::new();
        for (k, label) in h.labels().iter().enumerate() {
            let mine: Vec<eval::OperatingPoint> = points
                .iter()
                .filter(|p| &p.label == label)
                .cloned()
                .collect();
            if mine.is_empty() {
                continue;
            }
            let curve = curves[k]
                .as_ref()
                .ok_or_else(|| EvalError::UndefinedAuc(label.clone()))?;
            let below = compare_operating_points(curve, &mine);
            w.write_record([label.clone(), mine.len().to_string(), below.to_string()])
                .map_err(CliError::data)?;
            map.insert(label.clone(), json!(below));
            println!(
                "{label}: {below} of {} reader points below the curve",
                mine.len()
            );
        }
        for p in &points {
            if h.index_of(&p.label).is_none() {
                return Err(EvalError::UnknownLabel(p.label.clone()).into());
            }
        }
        run.write(
            "operating_points.csv",
            w.into_inner().map_err(|e| CliError::data(e.error()))?,
        )?;
        counts = Value::Object(map);
    }
    println!("Mean AUC ({} labels): {mean:.4}", subset.len());
    run.finish(json!({
        "subset": subset,
        "mean_auc": mean,
        "operating_points_below": counts,
        "hierarchy_digest": h.digest(),
    }))
}

fn cmd_ablate(a: AblateArgs, s: &Settings) -> CliResult<()> {
    let seed = s.get(a.common.seed, "seed", 0)?;
    let t = resolve_training(&a.training, seed, s)?;
    let subset = parse_subset(a.subset.clone(), s)?;
    let matrix = match s
        .get(a.matrix.clone(), "matrix", "default".to_string())?
        .as_str()
    {
        "default" => default_matrix(),
        list => list
            .split(',')
            .map(|r| r.parse::<AblationRow>())
            .collect::<Result<Vec<_>, _>>()?,
    };
    let mut run = Run::start("ablate", &a.common.out, seed)?;
    let h = load_hierarchy(hierarchy_arg(&a.common, s)?.as_deref(), &mut run)?;
    let train = load_feature_dataset(&a.train_labels, &a.train_features, &h, t.filter, &mut run)?;
    let val = load_feature_dataset(
        &a.val_labels,
        &a.val_features,
        &h,
        ViewFilter::All,
        &mut run,
    )?;
    let cfg = AblationConfig {
        train: t.cfg,
        arch: t.arch,
        subset,
        missing: t.policy.missing,
    };
    let table = eval::run_ablation(&train, &val, &h, &matrix, &cfg)?;
    let text = table.to_text();
    print!("{text}");
    run.write("ablation.csv", table.to_csv())?;
    run.write("ablation.txt", text)?;
    run.finish(json!({
        "matrix": matrix.iter().map(|r| r.name()).collect::<Vec<_>>(),
        "ablation": cfg,
        "hierarchy_digest": h.digest(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn settings_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "lr_decay = 0.5\nhidden = [8, 4]\nepochs-p1 = 3\n").unwrap();
        let s = Settings::load(Some(&path)).unwrap();
        assert_eq!(s.get(None, "lr-decay", 0.1).unwrap(), 0.5);
        assert_eq!(s.get(Some(0.2), "lr-decay", 0.1).unwrap(), 0.2);
        assert_eq!(s.get(None, "lr", 1e-4).unwrap(), 1e-4);
        assert_eq!(s.get::<usize>(None, "epochs-p1", 5).unwrap(), 3);
        assert_eq!(
            parse_hidden(&s.get(None, "hidden", String::new()).unwrap()).unwrap(),
            vec![8, 4]
        );
        assert!(s.get::<usize>(None, "lr-decay", 1).is_err());
    }

    #[test]
    fn hidden_parsing() {
        assert_eq!(parse_hidden("64, 32").unwrap(), vec![64, 32]);
        assert!(parse_hidden("").unwrap().is_empty());
        assert!(parse_hidden("x").is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["hiercxr", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["hiercxr", "train", "--out", "/tmp/x"]), EXIT_USAGE);
    }

    #[test]
    fn error_mapping() {
        assert_eq!(
            CliError::from(ModelError::NonFinite("loss")).code,
            EXIT_NUMERIC
        );
        assert_eq!(
            CliError::from(ModelError::InvalidConfig("x".into())).code,
            EXIT_USAGE
        );
        assert_eq!(
            CliError::from(DataError::NoFeatures("a".into())).code,
            EXIT_DATA
        );
    }
}
