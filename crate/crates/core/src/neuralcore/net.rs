use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::activation::Activation;
use crate::error::{Error, Result};

/// One fully-connected layer: `a = act(x W^T + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major `[out x in]`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(units: usize, activation: Activation) -> Self {
        Self { units, activation }
    }
}

/// Feed-forward network of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Inverted dropout on every hidden layer output.
    Train {
        dropout: f64,
    },
    Infer,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    /// Activation output before dropout.
    post: Array2<f64>,
    /// Already includes the `1/(1-p)` scale.
    mask: Option<Array2<f64>>,
}

/// Activations recorded by [`DenseNet::forward`] for a later [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub outputs: Array2<f64>,
    pub cache: ForwardCache,
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite())) && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

impl DenseNet {
    /// Builds a network with fan-balanced uniform initialization and zero biases.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        if input_dim == 0 || specs.is_empty() || specs.iter().any(|s| s.units == 0) {
            return Err(Error::Config("network needs positive input size and at least one non-empty layer".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = input_dim;
        for spec in specs {
            let limit = (6.0 / (fan_in + spec.units) as f64).sqrt();
            let weights = Array2::from_shape_fn((spec.units, fan_in), |_| rng.random_range(-limit..limit));
            layers.push(Layer {
                weights,
                bias: Array1::zeros(spec.units),
                activation: spec.activation,
            });
            fan_in = spec.units;
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network has no layers".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!("layer {k}: bias length {} != out {}", layer.bias.len(), layer.out_dim())));
            }
            if k > 0 && layers[k - 1].out_dim() != layer.in_dim() {
                return Err(Error::Shape(format!(
                    "layer {k}: input {} does not chain from previous output {}",
                    layer.in_dim(),
                    layers[k - 1].out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// All parameters in layer order: weights row-major, then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.param_count(), params.len())));
        }
        let mut it = params.iter();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
        Ok(())
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.iter().map(|w| w * w).sum::<f64>()).sum()
    }

    /// `0.5 * lambda * sum(w^2)`, the penalty whose gradient is `lambda * w`.
    pub fn l2_penalty(&self, lambda: f64) -> f64 {
        0.5 * lambda * self.weight_sq_norm()
    }

    pub fn forward<R: Rng + ?Sized>(&self, batch: ArrayView2<f64>, mode: Mode, rng: &mut R) -> Result<ForwardPass> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = batch.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let pre = x.dot(&layer.weights.t()) + &layer.bias;
            let post = layer.activation.apply(pre.view());
            let mask = match mode {
                Mode::Train { dropout } if k < last && dropout > 0.0 => {
                    let keep = 1.0 - dropout;
                    Some(Array2::from_shape_fn(
                        post.raw_dim(),
                        |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 },
                    ))
                }
                _ => None,
            };
            let next = match &mask {
                Some(m) => &post * m,
                None => post.clone(),
            };
            caches.push(LayerCache { input: x, pre, post, mask });
            x = next;
        }
        Ok(ForwardPass {
            outputs: x,
            cache: ForwardCache { layers: caches },
        })
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let mut x = batch.to_owned();
        for layer in &self.layers {
            let pre = x.dot(&layer.weights.t()) + &layer.bias;
            x = layer.activation.apply(pre.view());
        }
        Ok(x)
    }

    /// Returns parameter gradients (with `l2 * w` added to weight gradients)
    /// and the gradient with respect to the network input.
    pub fn backward(&self, cache: &ForwardCache, d_outputs: ArrayView2<f64>, l2: f64) -> Result<(Gradients, Array2<f64>)> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::Shape("cache does not match network depth".into()));
        }
        for (l, c) in self.layers.iter().zip(&cache.layers) {
            if c.input.ncols() != l.in_dim() || c.pre.ncols() != l.out_dim() {
                return Err(Error::Shape("cache does not match layer shapes".into()));
            }
        }
        let out = &cache.layers[cache.layers.len() - 1].post;
        if d_outputs.dim() != out.dim() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match outputs {:?}",
                d_outputs.dim(),
                out.dim()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut upstream = d_outputs.to_owned();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let c = &cache.layers[k];
            if let Some(mask) = &c.mask {
                upstream *= mask;
            }
            let dz = layer.activation.backprop(c.pre.view(), c.post.view(), upstream.view());
            let mut dw = dz.t().dot(&c.input);
            if l2 != 0.0 {
                dw.scaled_add(l2, &layer.weights);
            }
            grads.weights[k] = dw;
            grads.biases[k] = dz.sum_axis(Axis(0));
            upstream = dz.dot(&layer.weights);
        }
        Ok((grads, upstream))
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralcore::activation::SELU_ALPHA;
    use crate::neuralcore::activation::SELU_LAMBDA;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(weights: Array2<f64>, activation: Activation) -> DenseNet {
        let out = weights.nrows();
        DenseNet::from_layers(vec![Layer {
            weights,
            bias: Array1::zeros(out),
            activation,
        }])
        .unwrap()
    }

    #[test]
    fn identity_linear_layer() {
        let net = single(Array2::eye(3), Activation::Linear);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = net.forward(array![[1.0, 2.0, 3.0]].view(), Mode::Infer, &mut rng).unwrap();
        assert_eq!(out.outputs, array![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn softmax_layer_on_zero_logits() {
        let net = single(Array2::zeros((2, 1)), Activation::Softmax);
        let out = net.predict(array![[0.0]].view()).unwrap();
        assert_eq!(out, array![[0.5, 0.5]]);
    }

    #[test]
    fn selu_layer_negative_input() {
        let net = single(Array2::eye(1), Activation::Selu);
        let out = net.predict(array![[-1.0]].view()).unwrap();
        let expected = SELU_LAMBDA * SELU_ALPHA * ((-1.0f64).exp() - 1.0);
        assert!((out[[0, 0]] - expected).abs() < 1e-12);
        assert!((out[[0, 0]] - (-1.1113)).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let net = single(Array2::eye(3), Activation::Linear);
        let err = net.predict(array![[1.0, 2.0]].view()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn layers_must_chain() {
        let a = Layer {
            weights: Array2::zeros((4, 3)),
            bias: Array1::zeros(4),
            activation: Activation::Selu,
        };
        let b = Layer {
            weights: Array2::zeros((2, 5)),
            bias: Array1::zeros(2),
            activation: Activation::Linear,
        };
        assert!(matches!(DenseNet::from_layers(vec![a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::new(4, &[LayerSpec::new(5, Activation::Selu), LayerSpec::new(3, Activation::Softmax)], &mut rng).unwrap();
        let x = Array2::from_shape_fn((6, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let pass = net.forward(x.view(), Mode::Infer, &mut rng).unwrap();
        let (g, dx) = net.backward(&pass.cache, Array2::zeros((6, 3)).view(), 0.0).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_linear_mse_gradient_closed_form() {
        let (w, x, t) = (0.7, 1.5, 2.0);
        let net = single(array![[w]], Activation::Linear);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = net.forward(array![[x]].view(), Mode::Infer, &mut rng).unwrap();
        let d_out = array![[2.0 * (pass.outputs[[0, 0]] - t)]];
        let (g, _) = net.backward(&pass.cache, d_out.view(), 0.0).unwrap();
        assert!((g.weights[0][[0, 0]] - 2.0 * (w * x - t) * x).abs() < 1e-12);
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DenseNet::new(3, &[LayerSpec::new(2, Activation::Linear)], &mut rng).unwrap();
        let b = DenseNet::new(4, &[LayerSpec::new(2, Activation::Linear)], &mut rng).unwrap();
        let pass = a.forward(Array2::zeros((1, 3)).view(), Mode::Infer, &mut rng).unwrap();
        assert!(matches!(b.backward(&pass.cache, Array2::zeros((1, 2)).view(), 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn infer_mode_ignores_dropout_and_train_mode_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = DenseNet::new(6, &[LayerSpec::new(16, Activation::Tanh), LayerSpec::new(2, Activation::Linear)], &mut rng).unwrap();
        let x = Array2::from_elem((3, 6), 0.5);
        let infer = net.predict(x.view()).unwrap();
        let again = net.forward(x.view(), Mode::Infer, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(infer, again.outputs);
        let t1 = net.forward(x.view(), Mode::Train { dropout: 0.5 }, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let t2 = net.forward(x.view(), Mode::Train { dropout: 0.5 }, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(t1.outputs, t2.outputs);
        assert_ne!(t1.outputs, infer);
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = DenseNet::new(3, &[LayerSpec::new(4, Activation::Selu), LayerSpec::new(2, Activation::Linear)], &mut rng).unwrap();
        let flat = net.flatten();
        assert_eq!(flat.len(), net.param_count());
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        net.set_flat(&doubled).unwrap();
        assert_eq!(net.flatten(), doubled);
    }
}
