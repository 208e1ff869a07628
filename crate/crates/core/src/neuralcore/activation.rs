use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

/// SELU negative-branch scale.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
/// SELU output scale.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Selu,
    Tanh,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Selu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
            Activation::Softmax => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Linear,
            1 => Activation::Selu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            4 => Activation::Softmax,
            _ => return None,
        })
    }

    /// Applies the activation row-wise to a batch of pre-activations.
    pub fn apply(self, z: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Activation::Linear => z.to_owned(),
            Activation::Selu => z.mapv(selu),
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Sigmoid => z.mapv(sigmoid),
            Activation::Softmax => softmax_rows(z),
        }
    }

    /// Maps dL/da to dL/dz given the pre-activation `z` and output `a`.
    pub fn backprop(self, z: ArrayView2<f64>, a: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Activation::Linear => upstream.to_owned(),
            Activation::Selu => {
                let mut out = upstream.to_owned();
                Zip::from(&mut out).and(&z).for_each(|g, &zv| *g *= selu_derivative(zv));
                out
            }
            Activation::Tanh => {
                let mut out = upstream.to_owned();
                Zip::from(&mut out).and(&a).for_each(|g, &av| *g *= 1.0 - av * av);
                out
            }
            Activation::Sigmoid => {
                let mut out = upstream.to_owned();
                Zip::from(&mut out).and(&a).for_each(|g, &av| *g *= av * (1.0 - av));
                out
            }
            Activation::Softmax => {
                // dz_i = s_i * (g_i - sum_j g_j s_j)
                let mut out = upstream.to_owned();
                for (mut row, s) in out.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
                    let dot: f64 = row.iter().zip(s.iter()).map(|(g, p)| g * p).sum();
                    row.iter_mut().zip(s.iter()).for_each(|(g, &p)| *g = p * (*g - dot));
                }
                out
            }
        }
    }
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
    }
}

fn selu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over each row.
pub fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn selu_negative_one() {
        // lambda * alpha * (e^-1 - 1)
        let expected = 1.0507009873554805 * 1.6732632423543772 * ((-1.0f64).exp() - 1.0);
        assert!((selu(-1.0) - expected).abs() < 1e-15);
        assert!((selu(-1.0) + 1.1113).abs() < 1e-4);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = softmax_rows(array![[0.0, 0.0]].view());
        assert_eq!(s, array![[0.5, 0.5]]);
    }

    #[test]
    fn tags_round_trip() {
        for a in [Activation::Linear, Activation::Selu, Activation::Tanh, Activation::Sigmoid, Activation::Softmax] {
            assert_eq!(Activation::from_tag(a.tag()), Some(a));
        }
        assert_eq!(Activation::from_tag(9), None);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            logits in prop::collection::vec(-15.0f64..15.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let n = logits.len();
            let z = Array2::from_shape_vec((1, n), logits.clone()).unwrap();
            let s = softmax_rows(z.view());
            prop_assert!((s.sum() - 1.0).abs() < 1e-6);
            prop_assert!(s.iter().all(|&p| p > 0.0 && p < 1.0 || n == 1));
            let shifted = z.mapv(|v| v + shift);
            let s2 = softmax_rows(shifted.view());
            for (a, b) in s.iter().zip(s2.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
