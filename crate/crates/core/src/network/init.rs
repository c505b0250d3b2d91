use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Layer, LstmGate, LstmParams, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture descriptor consumed by [`ArchitectureDescriptor::init_random`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerDescriptor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerDescriptor {
    Linear { out: usize },
    Conv2d { out_channels: usize, kernel: usize, #[serde(default = "one")] stride: usize },
    Relu,
    Sigmoid,
    Tanh,
    Maxpool2d { window: usize, stride: usize },
    Dropout { rate: f64 },
    Flatten,
    Lstm { hidden: usize },
}

fn one() -> usize {
    1
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

impl ArchitectureDescriptor {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidDescriptor(e.to_string()))
    }

    /// Draw every weight and bias from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    /// LSTM gates use the hidden size as fan-in.
    pub fn init_random<T: Scalar>(&self, seed: u64) -> Result<Network<T>> {
        let invalid = |d: String| Error::InvalidDescriptor(d);
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(invalid(format!("input shape {:?} has a zero-width axis", self.input_shape)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, d) in self.layers.iter().enumerate() {
            let layer = match *d {
                LayerDescriptor::Linear { out } => {
                    if out == 0 {
                        return Err(invalid(format!("layer {i}: zero-width linear layer")));
                    }
                    let [fan_in] = shape[..] else {
                        return Err(invalid(format!("layer {i}: linear needs a flat input, got {:?}", shape)));
                    };
                    Layer::Linear { weight: uniform(&mut rng, &[out, fan_in], fan_in), bias: uniform(&mut rng, &[out], fan_in) }
                }
                LayerDescriptor::Conv2d { out_channels, kernel, stride } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(invalid(format!("layer {i}: zero-width conv2d layer")));
                    }
                    let [c, _, _] = shape[..] else {
                        return Err(invalid(format!("layer {i}: conv2d needs [C, H, W], got {:?}", shape)));
                    };
                    let fan_in = c * kernel * kernel;
                    Layer::Conv2d {
                        weight: uniform(&mut rng, &[out_channels, c, kernel, kernel], fan_in),
                        bias: uniform(&mut rng, &[out_channels], fan_in),
                        stride,
                    }
                }
                LayerDescriptor::Lstm { hidden } => {
                    if hidden == 0 {
                        return Err(invalid(format!("layer {i}: zero-width lstm layer")));
                    }
                    let [_, d] = shape[..] else {
                        return Err(invalid(format!("layer {i}: lstm needs [time, features], got {:?}", shape)));
                    };
                    let gates = std::array::from_fn(|_| LstmGate {
                        input_weight: uniform(&mut rng, &[hidden, d], hidden),
                        hidden_weight: uniform(&mut rng, &[hidden, hidden], hidden),
                        bias: uniform(&mut rng, &[hidden], hidden),
                    });
                    Layer::Lstm(LstmParams { gates })
                }
                LayerDescriptor::Relu => Layer::Relu,
                LayerDescriptor::Sigmoid => Layer::Sigmoid,
                LayerDescriptor::Tanh => Layer::Tanh,
                LayerDescriptor::Flatten => Layer::Flatten,
                LayerDescriptor::Maxpool2d { window, stride } => Layer::MaxPool2d { window, stride },
                LayerDescriptor::Dropout { rate } => Layer::Dropout { rate },
            };
            shape = layer.output_shape(&shape).map_err(|e| invalid(format!("layer {i}: {e}")))?;
            layers.push(layer);
        }
        Network::new(layers, self.input_shape.clone(), self.num_classes).map_err(|e| invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(text: &str) -> ArchitectureDescriptor {
        ArchitectureDescriptor::from_json(text).unwrap()
    }

    #[test]
    fn seeded_and_reproducible() {
        let d = desc(r#"{"input_shape":[1,6,6],"num_classes":2,"layers":[
            {"kind":"conv2d","out_channels":2,"kernel":3},{"kind":"relu"},
            {"kind":"maxpool2d","window":2,"stride":2},{"kind":"flatten"},{"kind":"linear","out":2}]}"#);
        let a: Network<f64> = d.init_random(5).unwrap();
        let b: Network<f64> = d.init_random(5).unwrap();
        let c: Network<f64> = d.init_random(6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn unit_fan_in_bounds() {
        let d = desc(r#"{"input_shape":[1],"num_classes":64,"layers":[{"kind":"linear","out":64}]}"#);
        let net: Network<f64> = d.init_random(0).unwrap();
        for p in net.parameters() {
            assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_width_is_invalid() {
        let d = desc(r#"{"input_shape":[3],"num_classes":2,"layers":[
            {"kind":"linear","out":0},{"kind":"linear","out":2}]}"#);
        assert!(matches!(d.init_random::<f64>(0), Err(Error::InvalidDescriptor(_))));
    }

    #[test]
    fn lstm_descriptor() {
        let d = desc(r#"{"input_shape":[4,3],"num_classes":2,"layers":[
            {"kind":"lstm","hidden":5},{"kind":"linear","out":2}]}"#);
        let net: Network<f64> = d.init_random(1).unwrap();
        assert_eq!(net.activation_shapes(), vec![vec![5], vec![2]]);
    }
}
