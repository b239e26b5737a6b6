//! Reference classifier: a multilayer perceptron with one sigmoid head per
//! label, trained with masked binary cross-entropy and Adam.

mod adam;
pub mod checkpoint;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::policy::MappedTargets;
use crate::seed::component_rng;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointError, TrainingMode};
pub use train::{
    train_flat, train_two_phase, EpochLog, Phase2Targets, PhaseLog, TrainConfig, TrainLog,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input dimension mismatch: model expects {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("target length {got} does not match the {expected} model outputs")]
    TargetLength { expected: usize, got: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty training set: {0}")]
    EmptyTrainingSet(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn pre_activation(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, &b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            row.iter().zip(x).fold(b, |acc, (w, v)| acc + w * v)
        }));
    }
}

/// Hidden-layer widths; the input width comes from the data and the output
/// width from the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
        }
    }
}

/// Classifier weights, in forward order. The last layer is linear and emits
/// one logit per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

/// Logits and their sigmoids.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub cond_probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let cond_probs = logits.iter().map(|&z| logistic(z)).collect();
        Self { logits, cond_probs }
    }
}

/// `1 / (1 + e^-z)`, the head activation.
pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl ModelParams {
    /// Uniform `±1/sqrt(fan_in)` weights and zero biases, drawn from the
    /// `init` stream of `seed`.
    pub fn init(input_dim: usize, arch: &ArchConfig, outputs: usize, seed: u64) -> Self {
        let mut rng = component_rng(seed, "init");
        let mut widths = vec![input_dim];
        widths.extend(&arch.hidden);
        widths.push(outputs);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                let mut layer = Layer::zeros(w[0], w[1], act);
                let bound = 1.0 / (w[0].max(1) as f64).sqrt();
                for v in &mut layer.weights {
                    *v = bound * (2.0 * rng.random::<f64>() - 1.0);
                }
                layer
            })
            .collect();
        Self { layers }
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs, l.activation))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Checks layer chaining and finiteness.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::InvalidConfig("model has no layers".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(ModelError::InvalidConfig(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        for l in &self.layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(ModelError::InvalidConfig(
                    "layer array sizes inconsistent".into(),
                ));
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite("parameter"));
            }
        }
        Ok(())
    }

    /// Logits and sigmoid probabilities for one feature vector.
    pub fn forward(&self, x: &[f64]) -> Result<Prediction, ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut a = x.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers {
            layer.pre_activation(&a, &mut z);
            a.clear();
            a.extend(z.iter().map(|&v| layer.activation.apply(v)));
        }
        if !a.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("model output"));
        }
        Ok(Prediction::from_logits(a))
    }

    /// Mean masked binary cross-entropy over the batch and its gradient.
    ///
    /// `loss = -(1/B) Σ_i Σ_k mask_ik [t_ik ln p_ik + (1 - t_ik) ln(1 - p_ik)]`
    pub fn loss_and_gradients(
        &self,
        batch: &[(&[f64], &MappedTargets)],
    ) -> Result<(f64, ModelParams), ModelError> {
        self.loss_and_gradients_from(batch, 0)
    }

    /// As [`Self::loss_and_gradients`], but only layers `first_layer..` get
    /// gradients; earlier layers are left at zero.
    pub fn loss_and_gradients_from(
        &self,
        batch: &[(&[f64], &MappedTargets)],
        first_layer: usize,
    ) -> Result<(f64, ModelParams), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let n_layers = self.layers.len();
        let scale = 1.0 / batch.len() as f64;
        let mut grads = self.zeros_like();
        let mut loss = 0.0;
        // per layer: input activation and pre-activation
        let mut inputs: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut pre: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        let mut delta = Vec::new();
        let mut next_delta = Vec::new();

        for (x, target) in batch {
            if x.len() != self.input_dim() {
                return Err(ModelError::Dimension {
                    expected: self.input_dim(),
                    got: x.len(),
                });
            }
            if target.len() != self.output_dim() {
                return Err(ModelError::TargetLength {
                    expected: self.output_dim(),
                    got: target.len(),
                });
            }
            inputs[0].clear();
            inputs[0].extend_from_slice(x);
            for (li, layer) in self.layers.iter().enumerate() {
                let mut z = std::mem::take(&mut pre[li]);
                layer.pre_activation(&inputs[li], &mut z);
                if li + 1 < n_layers {
                    let next = &mut inputs[li + 1];
                    next.clear();
                    next.extend(z.iter().map(|&v| layer.activation.apply(v)));
                }
                pre[li] = z;
            }
            let last = &self.layers[n_layers - 1];
            delta.clear();
            for (k, &z) in pre[n_layers - 1].iter().enumerate() {
                let logit = last.activation.apply(z);
                if !logit.is_finite() {
                    return Err(ModelError::NonFinite("logit"));
                }
                if !target.mask[k] {
                    delta.push(0.0);
                    continue;
                }
                let t = target.targets[k];
                loss += softplus(logit) - t * logit;
                let d = (logistic(logit) - t) * scale;
                delta.push(d * last.activation.derivative(z));
            }

            for li in (first_layer..n_layers).rev() {
                let layer = &self.layers[li];
                let g = &mut grads.layers[li];
                let a = &inputs[li];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, &av) in row.iter_mut().zip(a) {
                        *gw += d * av;
                    }
                }
                if li > first_layer {
                    let below = &self.layers[li - 1];
                    next_delta.clear();
                    next_delta.resize(layer.inputs, 0.0);
                    for (o, &d) in delta.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (nd, &w) in next_delta.iter_mut().zip(row) {
                            *nd += w * d;
                        }
                    }
                    for (nd, &z) in next_delta.iter_mut().zip(&pre[li - 1]) {
                        *nd *= below.activation.derivative(z);
                    }
                    std::mem::swap(&mut delta, &mut next_delta);
                }
            }
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(ModelError::NonFinite("loss"));
        }
        Ok((loss, grads))
    }

    /// Visits every parameter array (weights then bias, layer by layer).
    pub fn arrays(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn targets(t: &[f64], m: &[bool]) -> MappedTargets {
        MappedTargets {
            targets: t.to_vec(),
            mask: m.to_vec(),
        }
    }

    #[test]
    fn zero_model_predicts_one_half() {
        let m = ModelParams {
            layers: vec![
                Layer::zeros(3, 4, Activation::Relu),
                Layer::zeros(4, 2, Activation::Identity),
            ],
        };
        let p = m.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(p.logits, [0.0, 0.0]);
        assert_eq!(p.cond_probs, [0.5, 0.5]);
    }

    #[test]
    fn single_linear_unit() {
        let mut layer = Layer::zeros(1, 1, Activation::Identity);
        layer.weights[0] = 1.0;
        let m = ModelParams {
            layers: vec![layer],
        };
        let p = m.forward(&[3f64.ln()]).unwrap();
        assert!((p.cond_probs[0] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn two_layer_hand_computed() {
        // h = relu(W1 x + b1), z = W2 h + b2
        // W1 = [[1, 2], [-3, 0.5]], b1 = [0.1, 0.2], x = [1, -1]
        //   -> pre = [1 - 2 + 0.1, -3 - 0.5 + 0.2] = [-0.9, -3.3] -> h = [0, 0]
        // second input x = [2, 1]
        //   -> pre = [2 + 2 + 0.1, -6 + 0.5 + 0.2] = [4.1, -5.3] -> h = [4.1, 0]
        // W2 = [[0.5, -1], [2, 3]], b2 = [-0.25, 1]
        //   -> z = [2.05 - 0.25, 8.2 + 1] = [1.8, 9.2]
        let m = ModelParams {
            layers: vec![
                Layer {
                    inputs: 2,
                    outputs: 2,
                    activation: Activation::Relu,
                    weights: vec![1.0, 2.0, -3.0, 0.5],
                    bias: vec![0.1, 0.2],
                },
                Layer {
                    inputs: 2,
                    outputs: 2,
                    activation: Activation::Identity,
                    weights: vec![0.5, -1.0, 2.0, 3.0],
                    bias: vec![-0.25, 1.0],
                },
            ],
        };
        let p = m.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(p.logits, [-0.25, 1.0]);
        let p = m.forward(&[2.0, 1.0]).unwrap();
        assert!((p.logits[0] - 1.8).abs() < 1e-12);
        assert!((p.logits[1] - 9.2).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = ModelParams::init(4, &ArchConfig::default(), 3, 0);
        assert!(matches!(
            m.forward(&[0.0; 3]),
            Err(ModelError::Dimension {
                expected: 4,
                got: 3
            })
        ));
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let m = ModelParams {
            layers: vec![Layer::zeros(1, 1, Activation::Identity)],
        };
        let t = targets(&[1.0], &[true]);
        let (loss, _) = m.loss_and_gradients(&[(&[0.7], &t)]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_batch_is_zero() {
        let m = ModelParams::init(3, &ArchConfig { hidden: vec![5] }, 2, 1);
        let t = targets(&[1.0, 0.0], &[false, false]);
        let (loss, grads) = m.loss_and_gradients(&[(&[0.1, 0.2, 0.3], &t)]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.arrays().all(|a| a.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn empty_batch_errors() {
        let m = ModelParams::init(3, &ArchConfig::default(), 2, 1);
        assert!(matches!(
            m.loss_and_gradients(&[]),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ModelParams::init(4, &ArchConfig { hidden: vec![6, 5] }, 3, 17);
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let ts: Vec<MappedTargets> = (0..5)
            .map(|i| targets(&[rng.random(), 1.0, 0.0], &[true, i % 2 == 0, true]))
            .collect();
        let batch: Vec<(&[f64], &MappedTargets)> =
            xs.iter().map(|x| x.as_slice()).zip(ts.iter()).collect();
        let (_, grads) = m.loss_and_gradients(&batch).unwrap();
        let h = 1e-5;
        for (li, layer) in m.layers.iter().enumerate() {
            for wi in 0..layer.weights.len() {
                let mut plus = m.clone();
                plus.layers[li].weights[wi] += h;
                let mut minus = m.clone();
                minus.layers[li].weights[wi] -= h;
                let fd = (plus.loss_and_gradients(&batch).unwrap().0
                    - minus.loss_and_gradients(&batch).unwrap().0)
                    / (2.0 * h);
                let g = grads.layers[li].weights[wi];
                assert!(
                    (g - fd).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "layer {li} w{wi}: {g} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn partial_gradients_leave_frozen_layers_zero() {
        let m = ModelParams::init(3, &ArchConfig { hidden: vec![4] }, 2, 2);
        let t = targets(&[1.0, 0.0], &[true, true]);
        let (_, full) = m.loss_and_gradients(&[(&[0.5, -0.5, 1.0], &t)]).unwrap();
        let (_, part) = m
            .loss_and_gradients_from(&[(&[0.5, -0.5, 1.0], &t)], 1)
            .unwrap();
        assert!(part.layers[0].weights.iter().all(|&v| v == 0.0));
        assert_eq!(part.layers[1], full.layers[1]);
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = ModelParams::init(16, &ArchConfig::default(), 14, 5);
        assert_eq!(a.layers.len(), 3);
        assert_eq!(a.input_dim(), 16);
        assert_eq!(a.output_dim(), 14);
        assert_eq!(a.layers[2].activation, Activation::Identity);
        assert_eq!(a, ModelParams::init(16, &ArchConfig::default(), 14, 5));
        assert_ne!(a, ModelParams::init(16, &ArchConfig::default(), 14, 6));
        a.validate().unwrap();
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
