//! Evaluation backends.
//!
//! Network, attribution and wavelet code is written once against
//! [`Backend`]. [`Eager`] evaluates directly with no recording; a
//! [`Tape`](crate::tape::Tape) evaluates the same primitives and records them
//! for reverse-mode differentiation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{primitive_forward, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Backend<T: Scalar> {
    type Value: Clone;

    /// Lift a tensor that is not differentiated.
    fn constant(&self, t: Tensor<T>) -> Self::Value;

    /// Lift a tensor whose gradient is wanted.
    fn param(&self, t: Tensor<T>) -> Self::Value;

    fn value(&self, v: &Self::Value) -> Tensor<T>;

    fn apply(&self, op: Op<T>, inputs: &[&Self::Value]) -> Result<Self::Value>;

    fn shape(&self, v: &Self::Value) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn scalar(&self, v: T) -> Self::Value {
        self.constant(Tensor::scalar(v))
    }

    fn add(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Mul, &[a, b])
    }
    fn div(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Div, &[a, b])
    }
    fn neg(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Neg, &[a])
    }
    fn scale(&self, a: &Self::Value, c: T) -> Result<Self::Value> {
        self.apply(Op::Scale(c), &[a])
    }
    fn offset(&self, a: &Self::Value, c: T) -> Result<Self::Value> {
        self.apply(Op::Offset(c), &[a])
    }
    fn abs(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Abs, &[a])
    }
    fn relu(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Relu, &[a])
    }
    fn sigmoid(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sigmoid, &[a])
    }
    fn tanh(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Tanh, &[a])
    }
    fn exp(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Exp, &[a])
    }
    fn log(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Log, &[a])
    }
    fn powi(&self, a: &Self::Value, n: i32) -> Result<Self::Value> {
        self.apply(Op::Powi(n), &[a])
    }
    fn sum(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sum, &[a])
    }
    fn mean(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Mean, &[a])
    }
    fn sum_last_axis(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::SumLastAxis, &[a])
    }
    fn l1_norm(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::L1Norm, &[a])
    }
    fn l2_norm_sq(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::L2NormSq, &[a])
    }
    fn softmax(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Softmax, &[a])
    }
    fn log_softmax(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::LogSoftmax, &[a])
    }
    fn matmul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::MatMul, &[a, b])
    }
    fn transpose(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Transpose, &[a])
    }
    fn maxpool2d(&self, a: &Self::Value, window: usize, stride: usize) -> Result<Self::Value> {
        self.apply(Op::MaxPool2d { window, stride }, &[a])
    }
    fn conv2d(&self, x: &Self::Value, kernel: &Self::Value, stride: usize) -> Result<Self::Value> {
        self.apply(Op::Conv2d { stride }, &[x, kernel])
    }
    fn reshape(&self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    fn concat(&self, parts: &[&Self::Value], axis: usize) -> Result<Self::Value> {
        self.apply(Op::Concat { axis }, parts)
    }
    fn gather(&self, a: &Self::Value, indices: Vec<usize>, shape: &[usize]) -> Result<Self::Value> {
        self.apply(Op::Gather { indices: Arc::from(indices), shape: shape.to_vec() }, &[a])
    }
    fn broadcast_to(&self, a: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        self.apply(Op::BroadcastTo(shape.to_vec()), &[a])
    }
    fn dft(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Dft, &[a])
    }
    fn idft(&self, a: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Idft, &[a])
    }
    fn periodic_analysis(&self, x: &Self::Value, filter: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::CircCorrDown, &[x, filter])
    }
    fn periodic_synthesis(&self, c: &Self::Value, filter: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::CircConvUp, &[c, filter])
    }

    /// Multiply by a constant tensor (broadcast rules of `mul`).
    fn mul_const(&self, a: &Self::Value, c: Tensor<T>) -> Result<Self::Value> {
        let c = self.constant(c);
        self.mul(a, &c)
    }

    /// Apply a `[d_out, d_in]` weight to the last axis of `x`.
    fn linear(&self, x: &Self::Value, weight: &Self::Value) -> Result<Self::Value> {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        let (Some(&d_in), [d_out, w_in]) = (xs.last(), ws.as_slice()) else {
            return Err(Error::shape("matmul", format!("input {:?} weight {:?}", xs, ws)));
        };
        if d_in != *w_in {
            return Err(Error::shape("matmul", format!("input {:?} weight {:?}", xs, ws)));
        }
        let rows = xs.iter().product::<usize>() / d_in.max(1);
        let flat = self.reshape(x, &[rows, d_in])?;
        let wt = self.transpose(weight)?;
        let out = self.matmul(&flat, &wt)?;
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(*d_out);
        self.reshape(&out, &shape)
    }

    /// Entry `index` of the last axis, for every leading position.
    fn select_last(&self, a: &Self::Value, index: usize) -> Result<Self::Value> {
        let shape = self.shape(a);
        let n = *shape.last().ok_or_else(|| Error::shape("gather", "rank-0 input"))?;
        if index >= n {
            return Err(Error::shape("gather", format!("index {index} out of range for {:?}", shape)));
        }
        let rows = shape.iter().product::<usize>() / n;
        let idx = (0..rows).map(|r| r * n + index).collect();
        self.gather(a, idx, &shape[..shape.len() - 1])
    }

    /// Slice `[i, ..]` along `axis`, dropping that axis.
    fn index_axis(&self, a: &Self::Value, axis: usize, i: usize) -> Result<Self::Value> {
        let shape = self.shape(a);
        if axis >= shape.len() || i >= shape[axis] {
            return Err(Error::shape("gather", format!("index {i} on axis {axis} of {:?}", shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + i) * inner;
            idx.extend(base..base + inner);
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        self.gather(a, idx, &out_shape)
    }
}

/// Direct evaluation with no recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Scalar> Backend<T> for Eager {
    type Value = Tensor<T>;

    fn constant(&self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn param(&self, t: Tensor<T>) -> Tensor<T> {
        t
    }

    fn value(&self, v: &Tensor<T>) -> Tensor<T> {
        v.clone()
    }

    fn shape(&self, v: &Tensor<T>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn apply(&self, op: Op<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        primitive_forward(&op, inputs)
    }
}
