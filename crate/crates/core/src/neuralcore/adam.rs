use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::net::{DenseNet, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl AdamState {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        let zeros = Gradients::zeros_like(net);
        Self {
            config,
            step: 0,
            m_w: zeros.weights.clone(),
            v_w: zeros.weights,
            m_b: zeros.biases.clone(),
            v_b: zeros.biases,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn check(&self, net: &DenseNet, grads: &Gradients) -> Result<()> {
        let layers = net.layers();
        let ok = layers.len() == self.m_w.len()
            && layers.len() == grads.weights.len()
            && layers.len() == grads.biases.len()
            && layers.iter().enumerate().all(|(k, l)| {
                l.weights.dim() == self.m_w[k].dim()
                    && l.weights.dim() == grads.weights[k].dim()
                    && l.bias.len() == self.m_b[k].len()
                    && l.bias.len() == grads.biases[k].len()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("Adam state, gradients and network shapes disagree".into()))
        }
    }
}

/// Applies one bias-corrected Adam update in place.
pub fn adam_step(net: &mut DenseNet, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.check(net, grads)?;
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    };
    for (k, layer) in net.layers_mut().iter_mut().enumerate() {
        Zip::from(&mut layer.weights)
            .and(&mut state.m_w[k])
            .and(&mut state.v_w[k])
            .and(&grads.weights[k])
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut layer.bias)
            .and(&mut state.m_b[k])
            .and(&mut state.v_b[k])
            .and(&grads.biases[k])
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralcore::{Activation, Layer, LayerSpec};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(w: f64) -> DenseNet {
        DenseNet::from_layers(vec![Layer {
            weights: array![[w]],
            bias: array![0.0],
            activation: Activation::Linear,
        }])
        .unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = DenseNet::new(3, &[LayerSpec::new(2, Activation::Selu)], &mut rng).unwrap();
        let before = net.clone();
        let mut state = AdamState::new(&net, AdamConfig::default());
        let zeros = Gradients::zeros_like(&net);
        adam_step(&mut net, &zeros, &mut state).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut net = scalar(0.0);
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(&net, cfg);
        for _ in 0..500 {
            let w = net.layers()[0].weights[[0, 0]];
            let mut g = Gradients::zeros_like(&net);
            g.weights[0][[0, 0]] = 2.0 * (w - 3.0);
            adam_step(&mut net, &g, &mut state).unwrap();
        }
        assert!((net.layers()[0].weights[[0, 0]] - 3.0).abs() < 0.01);
        assert_eq!(state.step(), 500);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let mk = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            DenseNet::new(4, &[LayerSpec::new(3, Activation::Tanh), LayerSpec::new(2, Activation::Linear)], &mut rng).unwrap()
        };
        let (mut a, mut b) = (mk(), mk());
        let mut g = Gradients::zeros_like(&a);
        g.weights[0].mapv_inplace(|_| 0.37);
        g.biases[1].fill(-1.2);
        let mut sa = AdamState::new(&a, AdamConfig::default());
        let mut sb = AdamState::new(&b, AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut a, &g, &mut sa).unwrap();
            adam_step(&mut b, &g, &mut sb).unwrap();
        }
        let (fa, fb) = (a.flatten(), b.flatten());
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut a = scalar(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let other = DenseNet::new(2, &[LayerSpec::new(2, Activation::Linear)], &mut rng).unwrap();
        let mut state = AdamState::new(&a, AdamConfig::default());
        assert!(matches!(adam_step(&mut a, &Gradients::zeros_like(&other), &mut state), Err(Error::Shape(_))));
    }
}
