use super::ModelParams;

/// Adam with bias-corrected moments. Moment buffers mirror the parameter
/// arrays of the model they were created for.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.arrays().map(|a| vec![0.0; a.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Layers before `first_layer` are
    /// not touched.
    pub fn update(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        lr: f64,
        first_layer: usize,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let skip = 2 * first_layer;
        for (((p, g), m), v) in params
            .arrays_mut()
            .zip(grads.arrays())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .skip(skip)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ModelParams {
            layers: vec![Layer::zeros(2, 1, Activation::Identity)],
        };
        let mut g = p.zeros_like();
        g.layers[0].weights = vec![0.3, -2.0];
        g.layers[0].bias = vec![0.0];
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.update(&mut p, &g, 0.01, 0);
        assert!((p.layers[0].weights[0] + 0.01).abs() < 1e-9);
        assert!((p.layers[0].weights[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.layers[0].bias[0], 0.0);
    }

    #[test]
    fn frozen_layers_untouched() {
        let mut p = ModelParams {
            layers: vec![
                Layer::zeros(2, 2, Activation::Relu),
                Layer::zeros(2, 1, Activation::Identity),
            ],
        };
        let mut g = p.zeros_like();
        for a in g.arrays_mut() {
            a.iter_mut().for_each(|v| *v = 1.0);
        }
        let before = p.layers[0].clone();
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.update(&mut p, &g, 0.1, 1);
        assert_eq!(p.layers[0], before);
        assert!(p.layers[1].weights.iter().all(|&w| w < 0.0));
    }
}
