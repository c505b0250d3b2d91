//! Layered network representation: `f(x) = softmax(g(x))` with logits `g`
//! computed by an ordered list of layers.

mod init;
mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{Backend, Eager};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub use init::{ArchitectureDescriptor, LayerDescriptor};
pub use io::{MODEL_FORMAT, MODEL_VERSION};

/// Whether dropout is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Parameters of one LSTM gate: `W x_t + U h_{t-1} + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmGate<T> {
    /// `[hidden, input]`
    pub input_weight: Tensor<T>,
    /// `[hidden, hidden]`
    pub hidden_weight: Tensor<T>,
    /// `[hidden]`
    pub bias: Tensor<T>,
}

/// Gate order used throughout: input, forget, candidate, output.
pub const LSTM_GATES: [&str; 4] = ["input", "forget", "cell", "output"];

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub gates: [LstmGate<T>; 4],
}

impl<T: Scalar> LstmParams<T> {
    pub fn hidden_size(&self) -> usize {
        self.gates[0].bias.numel()
    }

    pub fn input_size(&self) -> usize {
        self.gates[0].input_weight.shape().get(1).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Layer<T> {
    /// `weight: [out, in]`, `bias: [out]`.
    Linear { weight: Tensor<T>, bias: Tensor<T> },
    /// Valid-padding convolution; `weight: [out_c, in_c, kh, kw]`, `bias: [out_c]`.
    Conv2d { weight: Tensor<T>, bias: Tensor<T>, stride: usize },
    Relu,
    Sigmoid,
    Tanh,
    MaxPool2d { window: usize, stride: usize },
    Dropout { rate: f64 },
    Flatten,
    /// Runs over a `[time, features]` sequence and emits the final hidden state.
    /// Time steps whose input row is entirely zero are treated as absent.
    Lstm(LstmParams<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Tanh => "tanh",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Dropout { .. } => "dropout",
            Layer::Flatten => "flatten",
            Layer::Lstm(_) => "lstm",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |detail: String| Error::ShapeInconsistency(format!("{} layer: {detail}", self.kind()));
        match self {
            Layer::Linear { weight, bias } => {
                let [out, inp] = weight.shape() else {
                    return Err(bad(format!("weight must be a matrix, got {:?}", weight.shape())));
                };
                if bias.shape() != [*out] {
                    return Err(bad(format!("bias {:?} does not match weight {:?}", bias.shape(), weight.shape())));
                }
                if input != [*inp] {
                    return Err(bad(format!("expects input [{inp}], got {:?}", input)));
                }
                Ok(vec![*out])
            }
            Layer::Conv2d { weight, bias, stride } => {
                let [o, c, kh, kw] = weight.shape() else {
                    return Err(bad(format!("kernel must be rank 4, got {:?}", weight.shape())));
                };
                if bias.shape() != [*o] {
                    return Err(bad(format!("bias {:?} does not match kernel {:?}", bias.shape(), weight.shape())));
                }
                let [ic, h, w] = input else {
                    return Err(bad(format!("expects [channels, height, width], got {:?}", input)));
                };
                if ic != c || kh > h || kw > w || *stride == 0 {
                    return Err(bad(format!("kernel {:?} stride {stride} does not fit input {:?}", weight.shape(), input)));
                }
                Ok(vec![*o, (h - kh) / stride + 1, (w - kw) / stride + 1])
            }
            Layer::Relu | Layer::Sigmoid | Layer::Tanh | Layer::Dropout { .. } => {
                if let Layer::Dropout { rate } = self {
                    if !(0.0..1.0).contains(rate) {
                        return Err(bad(format!("rate {rate} outside [0, 1)")));
                    }
                }
                Ok(input.to_vec())
            }
            Layer::MaxPool2d { window, stride } => {
                let [c, h, w] = input else {
                    return Err(bad(format!("expects [channels, height, width], got {:?}", input)));
                };
                if *window == 0 || *stride == 0 || window > h || window > w {
                    return Err(bad(format!("window {window} stride {stride} does not fit {:?}", input)));
                }
                Ok(vec![*c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            Layer::Flatten => Ok(vec![numel(input)]),
            Layer::Lstm(p) => {
                let hdim = p.hidden_size();
                let d = p.input_size();
                for (name, g) in LSTM_GATES.iter().zip(&p.gates) {
                    if g.input_weight.shape() != [hdim, d]
                        || g.hidden_weight.shape() != [hdim, hdim]
                        || g.bias.shape() != [hdim]
                    {
                        return Err(bad(format!("{name} gate parameters inconsistent with hidden size {hdim}")));
                    }
                }
                let [t, f] = input else {
                    return Err(bad(format!("expects [time, features], got {:?}", input)));
                };
                if *f != d || *t == 0 {
                    return Err(bad(format!("expects [time, {d}], got {:?}", input)));
                }
                Ok(vec![hdim])
            }
        }
    }

    fn parameters(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            Layer::Lstm(p) => p.gates.iter().flat_map(|g| [&g.input_weight, &g.hidden_weight, &g.bias]).collect(),
            _ => Vec::new(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            Layer::Lstm(p) => p
                .gates
                .iter_mut()
                .flat_map(|g| [&mut g.input_weight, &mut g.hidden_weight, &mut g.bias])
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Ordered layer composition producing `num_classes` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    layers: Vec<Layer<T>>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

/// Layer parameters lifted onto a backend.
#[derive(Clone, Debug)]
pub enum BoundLayer<V> {
    Affine { weight: V, bias: V },
    Lstm { gates: Vec<[V; 3]> },
    Stateless,
}

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<Layer<T>>, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::ShapeInconsistency("num_classes must be positive".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::ShapeInconsistency(format!("invalid input shape {:?}", input_shape)));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, Layer::Lstm(_)) && i != 0 {
                return Err(Error::ShapeInconsistency("lstm layer must be the first layer".into()));
            }
            shape = layer.output_shape(&shape)?;
        }
        if shape != [num_classes] {
            return Err(Error::ShapeInconsistency(format!(
                "final layer produces {:?}, expected [{num_classes}] logits",
                shape
            )));
        }
        Ok(Self { layers, input_shape, num_classes })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample activation shapes after each layer.
    pub fn activation_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        self.layers
            .iter()
            .map(|l| {
                shape = l.output_shape(&shape).expect("validated at construction");
                shape.clone()
            })
            .collect()
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Replace every parameter tensor, in [`Network::parameters`] order.
    /// Shapes must match.
    pub fn set_parameters(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut slots: Vec<&mut Tensor<T>> = self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect();
        if slots.len() != values.len() {
            return Err(Error::ShapeInconsistency(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter().zip(&values) {
            if slot.shape() != v.shape() {
                return Err(Error::ShapeInconsistency(format!("{:?} vs {:?}", slot.shape(), v.shape())));
            }
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            **slot = v;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Linear { weight, bias } => Layer::Linear { weight: c(weight), bias: c(bias) },
                Layer::Conv2d { weight, bias, stride } => Layer::Conv2d { weight: c(weight), bias: c(bias), stride: *stride },
                Layer::Relu => Layer::Relu,
                Layer::Sigmoid => Layer::Sigmoid,
                Layer::Tanh => Layer::Tanh,
                Layer::MaxPool2d { window, stride } => Layer::MaxPool2d { window: *window, stride: *stride },
                Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
                Layer::Flatten => Layer::Flatten,
                Layer::Lstm(p) => Layer::Lstm(LstmParams {
                    gates: p.gates.clone().map(|g| LstmGate {
                        input_weight: c(&g.input_weight),
                        hidden_weight: c(&g.hidden_weight),
                        bias: c(&g.bias),
                    }),
                }),
            })
            .collect();
        Network { layers, input_shape: self.input_shape.clone(), num_classes: self.num_classes }
    }

    /// Lift parameters onto `backend`, as differentiable leaves when `trainable`.
    pub fn bind<B: Backend<T>>(&self, backend: &B, trainable: bool) -> Vec<BoundLayer<B::Value>> {
        let lift = |t: &Tensor<T>| if trainable { backend.param(t.clone()) } else { backend.constant(t.clone()) };
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Linear { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    BoundLayer::Affine { weight: lift(weight), bias: lift(bias) }
                }
                Layer::Lstm(p) => BoundLayer::Lstm {
                    gates: p
                        .gates
                        .iter()
                        .map(|g| [lift(&g.input_weight), lift(&g.hidden_weight), lift(&g.bias)])
                        .collect(),
                },
                _ => BoundLayer::Stateless,
            })
            .collect()
    }

    /// Flattened bound parameters in [`Network::parameters`] order.
    pub fn bound_parameters<V: Clone>(bound: &[BoundLayer<V>]) -> Vec<V> {
        bound
            .iter()
            .flat_map(|b| match b {
                BoundLayer::Affine { weight, bias } => vec![weight.clone(), bias.clone()],
                BoundLayer::Lstm { gates } => gates.iter().flat_map(|g| g.iter().cloned()).collect(),
                BoundLayer::Stateless => Vec::new(),
            })
            .collect()
    }

    /// Whether `shape` is one sample (`false`) or a batch (`true`).
    pub fn batching(&self, shape: &[usize]) -> Result<bool> {
        if shape == self.input_shape.as_slice() {
            Ok(false)
        } else if shape.len() == self.input_shape.len() + 1 && shape[1..] == self.input_shape[..] && shape[0] > 0 {
            Ok(true)
        } else {
            Err(Error::shape(
                "forward",
                format!("input {:?} does not match network input {:?}", shape, self.input_shape),
            ))
        }
    }

    /// Forward pass over a batch `[B, ..input_shape]`, returning the batched
    /// activation after every layer (the last entry holds the logits).
    pub fn forward_batch<B: Backend<T>>(
        &self,
        backend: &B,
        params: &[BoundLayer<B::Value>],
        x: &B::Value,
        mode: Mode,
        seed: u64,
    ) -> Result<Vec<B::Value>> {
        let mut h = x.clone();
        let mut acts = Vec::with_capacity(self.layers.len());
        for (index, (layer, bound)) in self.layers.iter().zip(params).enumerate() {
            h = match (layer, bound) {
                (Layer::Linear { .. }, BoundLayer::Affine { weight, bias }) => {
                    let z = backend.linear(&h, weight)?;
                    let shape = backend.shape(&z);
                    let b = backend.broadcast_to(bias, &shape)?;
                    backend.add(&z, &b)?
                }
                (Layer::Conv2d { stride, .. }, BoundLayer::Affine { weight, bias }) => {
                    let z = backend.conv2d(&h, weight, *stride)?;
                    let shape = backend.shape(&z);
                    let b = channel_bias(backend, bias, &shape)?;
                    backend.add(&z, &b)?
                }
                (Layer::Relu, _) => backend.relu(&h)?,
                (Layer::Sigmoid, _) => backend.sigmoid(&h)?,
                (Layer::Tanh, _) => backend.tanh(&h)?,
                (Layer::MaxPool2d { window, stride }, _) => backend.maxpool2d(&h, *window, *stride)?,
                (Layer::Dropout { rate }, _) => match dropout_mask::<T>(&backend.shape(&h), *rate, mode, seed, index) {
                    Some(mask) => backend.mul_const(&h, mask)?,
                    None => h,
                },
                (Layer::Flatten, _) => {
                    let shape = backend.shape(&h);
                    backend.reshape(&h, &[shape[0], shape[1..].iter().product()])?
                }
                (Layer::Lstm(_), BoundLayer::Lstm { gates }) => lstm_forward(backend, gates, &h)?,
                _ => return Err(Error::UnsupportedLayer(format!("{} with mismatched parameters", layer.kind()))),
            };
            acts.push(h.clone());
        }
        Ok(acts)
    }

    /// Forward pass on concrete tensors. Accepts one sample or a batch and
    /// returns activations with the same batching.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, seed: u64) -> Result<Vec<Tensor<T>>> {
        let batched = self.batching(x.shape())?;
        let xb = if batched { x.clone() } else { add_batch_axis(x)? };
        let params = self.bind(&Eager, false);
        let acts = self.forward_batch(&Eager, &params, &xb, mode, seed)?;
        if batched {
            Ok(acts)
        } else {
            acts.iter().map(|a| a.reshape(&a.shape()[1..])).collect()
        }
    }

    /// Logits `g(x)` in evaluation mode.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, Mode::Eval, 0)?.pop().expect("network has layers"))
    }

    /// `softmax(g(x))` in evaluation mode.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.logits(x)?;
        Eager.softmax(&logits)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<usize> {
        Ok(argmax(self.logits(x)?.data()))
    }
}

pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn add_batch_axis<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.reshape(&shape)
}

/// Broadcast a per-channel bias `[C]` onto `[.., C, H, W]`.
pub(crate) fn channel_bias<T: Scalar, B: Backend<T>>(backend: &B, bias: &B::Value, shape: &[usize]) -> Result<B::Value> {
    let c = backend.shape(bias)[0];
    let b = backend.reshape(bias, &[c, 1, 1])?;
    backend.broadcast_to(&b, shape)
}

/// Inverted-dropout mask for `layer_index`, or `None` when dropout is inactive.
pub fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, mode: Mode, seed: u64, layer_index: usize) -> Option<Tensor<T>> {
    if mode == Mode::Eval || rate == 0.0 {
        return None;
    }
    let stream = seed ^ (layer_index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let keep = T::lit(1.0 / (1.0 - rate));
    let data = (0..numel(shape))
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Some(Tensor::new(shape.to_vec(), data).expect("mask matches shape"))
}

/// Per-row presence flags `[B, 1]` of a `[B, T, D]` sequence at step `t`:
/// rows that are entirely zero are absent.
pub(crate) fn presence<T: Scalar>(x: &Tensor<T>, t: usize) -> Tensor<T> {
    let (b, steps, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let flags = (0..b)
        .map(|i| {
            let row = &x.data()[(i * steps + t) * d..(i * steps + t + 1) * d];
            if row.iter().all(|v| *v == T::zero()) {
                T::zero()
            } else {
                T::one()
            }
        })
        .collect();
    Tensor::new(vec![b, 1], flags).unwrap()
}

/// `p ⊙ new + (1 − p) ⊙ old` with `p` broadcast from `[B, 1]`.
pub(crate) fn carry_absent<T: Scalar, B: Backend<T>>(
    backend: &B,
    present: &Tensor<T>,
    new: &B::Value,
    old: &B::Value,
) -> Result<B::Value> {
    let shape = backend.shape(new);
    let p = backend.constant(present.clone());
    let p = backend.broadcast_to(&p, &shape)?;
    let q = backend.constant(present.map(|v| T::one() - v));
    let q = backend.broadcast_to(&q, &shape)?;
    let a = backend.mul(new, &p)?;
    let b = backend.mul(old, &q)?;
    backend.add(&a, &b)
}

fn gate_preactivation<T: Scalar, B: Backend<T>>(
    backend: &B,
    gate: &[B::Value; 3],
    x_t: &B::Value,
    h: &B::Value,
) -> Result<B::Value> {
    let a = backend.linear(x_t, &gate[0])?;
    let b = backend.linear(h, &gate[1])?;
    let z = backend.add(&a, &b)?;
    let shape = backend.shape(&z);
    let bias = backend.broadcast_to(&gate[2], &shape)?;
    backend.add(&z, &bias)
}

fn lstm_forward<T: Scalar, B: Backend<T>>(backend: &B, gates: &[[B::Value; 3]], x: &B::Value) -> Result<B::Value> {
    let xv = backend.value(x);
    let shape = xv.shape().to_vec();
    let (batch, steps) = (shape[0], shape[1]);
    let hidden = backend.shape(&gates[0][2])[0];
    let mut h = backend.constant(Tensor::zeros(&[batch, hidden]));
    let mut c = backend.constant(Tensor::zeros(&[batch, hidden]));
    for t in 0..steps {
        let present = presence(&xv, t);
        if present.is_all_zero() {
            continue;
        }
        let x_t = backend.index_axis(x, 1, t)?;
        let pre: Vec<B::Value> = gates
            .iter()
            .map(|g| gate_preactivation(backend, g, &x_t, &h))
            .collect::<Result<_>>()?;
        let i = backend.sigmoid(&pre[0])?;
        let f = backend.sigmoid(&pre[1])?;
        let g = backend.tanh(&pre[2])?;
        let o = backend.sigmoid(&pre[3])?;
        let fc = backend.mul(&f, &c)?;
        let ig = backend.mul(&i, &g)?;
        let c_new = backend.add(&fc, &ig)?;
        let tc = backend.tanh(&c_new)?;
        let h_new = backend.mul(&o, &tc)?;
        if present.data().iter().all(|v| *v == T::one()) {
            h = h_new;
            c = c_new;
        } else {
            h = carry_absent(backend, &present, &h_new, &h)?;
            c = carry_absent(backend, &present, &c_new, &c)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_linear_layer() {
        let net = Network::new(
            vec![Layer::Linear { weight: t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), bias: t(&[2], &[0.0, 0.0]) }],
            vec![2],
            2,
        )
        .unwrap();
        assert_eq!(net.logits(&t(&[2], &[1.0, 2.0])).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_then_relu_activations() {
        let net = Network::new(
            vec![Layer::Linear { weight: t(&[1, 2], &[1.0, 1.0]), bias: t(&[1], &[0.0]) }, Layer::Relu],
            vec![2],
            1,
        )
        .unwrap();
        let acts = net.forward(&t(&[2], &[-3.0, 1.0]), Mode::Eval, 0).unwrap();
        assert_eq!(acts[0].data(), &[-2.0]);
        assert_eq!(acts[1].data(), &[0.0]);
    }

    #[test]
    fn probabilities_are_stable_for_large_logits() {
        let net = Network::new(
            vec![Layer::Linear { weight: t(&[2, 1], &[1000.0, 0.0]), bias: t(&[2], &[0.0, 0.0]) }],
            vec![1],
            2,
        )
        .unwrap();
        let p = net.predict_proba(&t(&[1], &[1.0])).unwrap();
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-12 && p.data()[1] < 1e-12);
        let p0 = net.predict_proba(&t(&[1], &[0.0])).unwrap();
        assert_eq!(p0.data(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let err = Network::new(
            vec![Layer::Linear { weight: t(&[2, 3], &[0.0; 6]), bias: t(&[2], &[0.0; 2]) }],
            vec![2],
            2,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeInconsistency(_)));
        let err = Network::new(
            vec![Layer::Linear { weight: t(&[2, 2], &[0.0; 4]), bias: t(&[2], &[0.0; 2]) }],
            vec![2],
            3,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeInconsistency(_)));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        assert!(dropout_mask::<f64>(&[4], 0.5, Mode::Eval, 1, 0).is_none());
        assert!(dropout_mask::<f64>(&[4], 0.0, Mode::Train, 1, 0).is_none());
        let a = dropout_mask::<f64>(&[64], 0.5, Mode::Train, 7, 2).unwrap();
        let b = dropout_mask::<f64>(&[64], 0.5, Mode::Train, 7, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
