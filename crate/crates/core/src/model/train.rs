//! Training loops.
//!
//! Two-phase conditional training:
//!
//! 1. Adam on the samples whose mapped targets are positive for every
//!    parent-label, with the loss restricted to labels that are not parents.
//! 2. Every layer except the last is frozen; the last layer is retrained on
//!    the full dataset over all labels.
//!
//! Each phase starts a fresh optimizer and restarts the learning-rate
//! schedule `lr * lr_decay^epoch`. Every epoch is one pass over the phase's
//! samples in a seed-derived shuffled order.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Adam, ArchConfig, ModelError, ModelParams};
use crate::data::{conditional_indices, phase1_scope, Dataset};
use crate::hierarchy::LabelHierarchy;
use crate::policy::{LabelPolicy, MappedTargets};
use crate::seed::{component_rng, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied to the learning rate after each epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub seed: u64,
    /// Redraw smoothed targets at every epoch after the first.
    #[serde(default)]
    pub lsr_resample: bool,
    #[serde(default)]
    pub phase2_targets: Phase2Targets,
}

/// How child labels enter the phase-2 loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase2Targets {
    /// A child term counts only where every ancestor target is positive, so
    /// heads keep their conditional meaning.
    #[default]
    Conditional,
    /// Every label term counts on every sample.
    Unconditional,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            phase1_epochs: 5,
            phase2_epochs: 5,
            seed: 0,
            lsr_resample: false,
            phase2_targets: Phase2Targets::Conditional,
        }
    }
}

impl TrainConfig {
    /// Learning rate for `epoch` (0-based) within a phase.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return bad("learning-rate decay must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("Adam epsilon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub name: String,
    pub samples: usize,
    /// Samples in this phase's set with some parent-label target below 0.5.
    pub negative_parent_samples: usize,
    pub first_trainable_layer: usize,
    pub loss_labels: Vec<usize>,
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub phases: Vec<PhaseLog>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Weights at the end of the conditional phase (two-phase training only).
    pub phase1_params: Option<ModelParams>,
    pub log: TrainLog,
}

struct Phase<'a> {
    name: &'a str,
    indices: &'a [usize],
    scope: &'a [bool],
    first_layer: usize,
    epochs: usize,
    /// Mask child terms whose ancestors are not all positive.
    gate: Option<&'a LabelHierarchy>,
}

fn ancestor_gated(t: &MappedTargets, h: &LabelHierarchy) -> MappedTargets {
    let mut out = t.clone();
    for k in 0..h.len() {
        let path = h.root_path_indices(k);
        if path[..path.len() - 1].iter().any(|&a| t.targets[a] < 0.5) {
            out.mask[k] = false;
            out.targets[k] = crate::policy::MASKED_SENTINEL;
        }
    }
    out
}

fn count_negative_parent(
    targets: &[MappedTargets],
    indices: &[usize],
    h: &LabelHierarchy,
) -> usize {
    let parents = h.parent_labels();
    indices
        .iter()
        .filter(|&&i| parents.iter().any(|&p| targets[i].targets[p] < 0.5))
        .count()
}

fn run_phase(
    params: &mut ModelParams,
    features: &[&[f64]],
    ds: &Dataset,
    base_targets: &[MappedTargets],
    policy: &LabelPolicy,
    cfg: &TrainConfig,
    phase: &Phase<'_>,
) -> Result<Vec<EpochLog>, ModelError> {
    let mut adam = Adam::new(params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut logs = Vec::with_capacity(phase.epochs);
    let restrict = |t: &[MappedTargets]| -> Vec<MappedTargets> {
        t.iter()
            .map(|m| match phase.gate {
                Some(h) => ancestor_gated(m, h).restricted(phase.scope),
                None => m.restricted(phase.scope),
            })
            .collect()
    };
    let base = restrict(base_targets);

    for epoch in 0..phase.epochs {
        let lr = cfg.lr_at(epoch);
        let redrawn;
        let targets: &[MappedTargets] = if cfg.lsr_resample && policy.kind.is_lsr() && epoch > 0 {
            let seed = derive_seed(cfg.seed, &format!("lsr-resample/{}/{epoch}", phase.name));
            redrawn = restrict(&ds.mapped_targets(policy, seed));
            &redrawn
        } else {
            &base
        };

        let mut order = phase.indices.to_vec();
        let mut rng = component_rng(cfg.seed, &format!("shuffle/{}/{epoch}", phase.name));
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], &MappedTargets)> =
                chunk.iter().map(|&i| (features[i], &targets[i])).collect();
            let (loss, grads) = params.loss_and_gradients_from(&batch, phase.first_layer)?;
            adam.update(params, &grads, lr, phase.first_layer);
            total += loss * chunk.len() as f64;
        }
        let mean_loss = if order.is_empty() {
            0.0
        } else {
            total / order.len() as f64
        };
        if !mean_loss.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }
        logs.push(EpochLog { lr, mean_loss });
    }
    params.validate()?;
    Ok(logs)
}

fn feature_rows(ds: &Dataset) -> Result<(usize, Vec<&[f64]>), ModelError> {
    let dim = ds.feature_dim()?;
    let rows = ds
        .samples
        .iter()
        .map(|s| s.features().expect("feature_dim checked every sample"))
        .collect();
    Ok((dim, rows))
}

/// Conditional training followed by last-layer finetuning on all data.
pub fn train_two_phase(
    ds: &Dataset,
    h: &LabelHierarchy,
    policy: &LabelPolicy,
    cfg: &TrainConfig,
    arch: &ArchConfig,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    ds.check_schema(h)?;
    if ds.is_empty() {
        return Err(ModelError::EmptyTrainingSet(
            "dataset has no samples".into(),
        ));
    }
    let (dim, features) = feature_rows(ds)?;
    let targets = ds.mapped_targets(policy, cfg.seed);
    let conditional = conditional_indices(&targets, h);
    if conditional.is_empty() {
        return Err(ModelError::EmptyTrainingSet(
            "no sample has every parent-label positive; the conditional phase has nothing to train on"
                .into(),
        ));
    }
    let l = h.len();
    let mut scope = vec![false; l];
    for k in phase1_scope(h) {
        scope[k] = true;
    }
    let everything = vec![true; l];
    let all: Vec<usize> = (0..ds.len()).collect();

    let mut params = ModelParams::init(dim, arch, l, cfg.seed);
    let last_layer = params.layers.len() - 1;
    let mut log = TrainLog::default();

    let p1 = Phase {
        name: "phase1",
        indices: &conditional,
        scope: &scope,
        first_layer: 0,
        epochs: cfg.phase1_epochs,
        gate: None,
    };
    let epochs = run_phase(&mut params, &features, ds, &targets, policy, cfg, &p1)?;
    log.phases.push(PhaseLog {
        name: p1.name.into(),
        samples: conditional.len(),
        negative_parent_samples: count_negative_parent(&targets, &conditional, h),
        first_trainable_layer: 0,
        loss_labels: phase1_scope(h),
        epochs,
    });
    let phase1_params = params.clone();

    let p2 = Phase {
        name: "phase2",
        indices: &all,
        scope: &everything,
        first_layer: last_layer,
        epochs: cfg.phase2_epochs,
        gate: match cfg.phase2_targets {
            Phase2Targets::Conditional => Some(h),
            Phase2Targets::Unconditional => None,
        },
    };
    let epochs = run_phase(&mut params, &features, ds, &targets, policy, cfg, &p2)?;
    log.phases.push(PhaseLog {
        name: p2.name.into(),
        samples: all.len(),
        negative_parent_samples: count_negative_parent(&targets, &all, h),
        first_trainable_layer: last_layer,
        loss_labels: (0..l).collect(),
        epochs,
    });

    Ok(TrainOutcome {
        params,
        phase1_params: Some(phase1_params),
        log,
    })
}

/// Single-phase baseline: all layers, all samples, all labels, for
/// `phase1_epochs + phase2_epochs` epochs on one schedule.
pub fn train_flat(
    ds: &Dataset,
    policy: &LabelPolicy,
    cfg: &TrainConfig,
    arch: &ArchConfig,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(ModelError::EmptyTrainingSet(
            "dataset has no samples".into(),
        ));
    }
    let (dim, features) = feature_rows(ds)?;
    let l = ds.schema.len();
    let targets = ds.mapped_targets(policy, cfg.seed);
    let everything = vec![true; l];
    let all: Vec<usize> = (0..ds.len()).collect();
    let mut params = ModelParams::init(dim, arch, l, cfg.seed);
    let phase = Phase {
        name: "flat",
        indices: &all,
        scope: &everything,
        first_layer: 0,
        epochs: cfg.phase1_epochs + cfg.phase2_epochs,
        gate: None,
    };
    let epochs = run_phase(&mut params, &features, ds, &targets, policy, cfg, &phase)?;
    Ok(TrainOutcome {
        params,
        phase1_params: None,
        log: TrainLog {
            phases: vec![PhaseLog {
                name: "flat".into(),
                samples: all.len(),
                negative_parent_samples: 0,
                first_trainable_layer: 0,
                loss_labels: (0..l).collect(),
                epochs,
            }],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::policy::PolicyKind;

    fn small() -> (Dataset, LabelHierarchy) {
        let h = LabelHierarchy::parse("A\nB <- A\nC <- B\nD\n").unwrap();
        let cfg = SyntheticConfig {
            dim: 4,
            n: 300,
            rho: 0.2,
            seed: 4,
            ..Default::default()
        };
        (generate_synthetic(&cfg, &h).unwrap().0, h)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            lr_decay: 0.5,
            phase1_epochs: 2,
            phase2_epochs: 2,
            seed: 8,
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert!((cfg.lr_at(2) - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (ds, _) = small();
        let cfg = TrainConfig {
            phase1_epochs: 0,
            phase2_epochs: 0,
            ..quick()
        };
        let arch = ArchConfig { hidden: vec![8] };
        let out = train_flat(&ds, &LabelPolicy::new(PolicyKind::UOnes), &cfg, &arch).unwrap();
        assert_eq!(out.params, ModelParams::init(4, &arch, 4, cfg.seed));
    }

    #[test]
    fn two_phase_freezes_all_but_last_layer() {
        let (ds, h) = small();
        let arch = ArchConfig { hidden: vec![8, 6] };
        let out = train_two_phase(
            &ds,
            &h,
            &LabelPolicy::new(PolicyKind::UOnesLsr),
            &quick(),
            &arch,
        )
        .unwrap();
        let p1 = out.phase1_params.unwrap();
        for i in 0..2 {
            assert_eq!(out.params.layers[i], p1.layers[i]);
        }
        assert_ne!(out.params.layers[2], p1.layers[2]);
        assert_eq!(out.log.phases[0].negative_parent_samples, 0);
        assert!(out.log.phases[0].samples < ds.len());
        assert_eq!(out.log.phases[0].loss_labels, [2, 3]);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, h) = small();
        let arch = ArchConfig { hidden: vec![8] };
        let policy = LabelPolicy::new(PolicyKind::UZerosLsr);
        let cfg = TrainConfig {
            lsr_resample: true,
            ..quick()
        };
        let a = train_two_phase(&ds, &h, &policy, &cfg, &arch).unwrap();
        let b = train_two_phase(&ds, &h, &policy, &cfg, &arch).unwrap();
        assert_eq!(a.params, b.params);
        let c = train_flat(&ds, &policy, &cfg, &arch).unwrap();
        let d = train_flat(&ds, &policy, &cfg, &arch).unwrap();
        assert_eq!(c.params, d.params);
    }

    #[test]
    fn empty_conditional_subset_aborts() {
        let h = LabelHierarchy::parse("A\nB <- A\n").unwrap();
        let mut ds = small().0;
        ds.schema = h.labels().to_vec();
        for s in &mut ds.samples {
            s.raw_labels = vec![crate::policy::RawLabel::Negative; 2];
        }
        let err = train_two_phase(
            &ds,
            &h,
            &LabelPolicy::new(PolicyKind::UOnes),
            &quick(),
            &ArchConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::EmptyTrainingSet(_)));
    }

    #[test]
    fn loss_decreases_during_flat_training() {
        let (ds, _) = small();
        let cfg = TrainConfig {
            phase1_epochs: 4,
            phase2_epochs: 0,
            lr_decay: 1.0,
            ..quick()
        };
        let out = train_flat(
            &ds,
            &LabelPolicy::new(PolicyKind::UZeros),
            &cfg,
            &ArchConfig { hidden: vec![16] },
        )
        .unwrap();
        let e = &out.log.phases[0].epochs;
        assert!(e.last().unwrap().mean_loss < e[0].mean_loss);
    }

    #[test]
    fn invalid_config_rejected() {
        let (ds, _) = small();
        let cfg = TrainConfig {
            batch_size: 0,
            ..quick()
        };
        assert!(matches!(
            train_flat(
                &ds,
                &LabelPolicy::new(PolicyKind::UZeros),
                &cfg,
                &ArchConfig::default()
            ),
            Err(ModelError::InvalidConfig(_))
        ));
    }

    #[test]
    fn gate_masks_children_below_a_negative_ancestor() {
        let h = LabelHierarchy::parse("A\nB <- A\nC <- B\nD\n").unwrap();
        let t = MappedTargets {
            targets: vec![1.0, 0.3, 1.0, 0.0],
            mask: vec![true; 4],
        };
        let g = ancestor_gated(&t, &h);
        // B itself still counts; C sits below the negative B
        assert_eq!(g.mask, vec![true, true, false, true]);
        assert_eq!(g.targets[2], crate::policy::MASKED_SENTINEL);

        let root_neg = MappedTargets {
            targets: vec![0.0, 1.0, 1.0, 1.0],
            mask: vec![true; 4],
        };
        assert_eq!(
            ancestor_gated(&root_neg, &h).mask,
            vec![true, false, false, true]
        );
    }

    #[test]
    fn phase2_target_modes_differ_only_in_the_head() {
        let (ds, h) = small();
        let policy = LabelPolicy::new(PolicyKind::UOnes);
        let arch = ArchConfig { hidden: vec![8] };
        let a = train_two_phase(&ds, &h, &policy, &quick(), &arch).unwrap();
        let cfg = TrainConfig {
            phase2_targets: Phase2Targets::Unconditional,
            ..quick()
        };
        let b = train_two_phase(&ds, &h, &policy, &cfg, &arch).unwrap();
        assert_eq!(a.phase1_params, b.phase1_params);
        assert_eq!(a.params.layers[0], b.params.layers[0]);
        assert_ne!(a.params.layers[1], b.params.layers[1]);
    }
}
