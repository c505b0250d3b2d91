//! Primitive operations: forward kernels and their vector-Jacobian products.
//!
//! Every differentiable computation in the crate is expressed with these
//! primitives, so the same code path serves plain evaluation and recorded
//! (differentiable) evaluation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fft::dft_complex;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// A primitive operation together with its static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    Offset(T),
    Abs,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Powi(i32),
    Sum,
    Mean,
    SumLastAxis,
    L1Norm,
    L2NormSq,
    Softmax,
    LogSoftmax,
    MaxPool2d { window: usize, stride: usize },
    Conv2d { stride: usize },
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Gather { indices: Arc<[usize]>, shape: Vec<usize> },
    BroadcastTo(Vec<usize>),
    Dft,
    Idft,
    CircCorrDown,
    CircConvUp,
}

impl<T: Scalar> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Div => "divide",
            Op::Neg => "negate",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Powi(_) => "power",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumLastAxis => "sum-last-axis",
            Op::L1Norm => "l1-norm",
            Op::L2NormSq => "l2-norm-squared",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log-softmax",
            Op::MaxPool2d { .. } => "max-over-window",
            Op::Conv2d { .. } => "conv2d",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concatenate",
            Op::Gather { .. } => "gather",
            Op::BroadcastTo(_) => "broadcast",
            Op::Dft => "dft",
            Op::Idft => "inverse-dft",
            Op::CircCorrDown => "periodic-analysis",
            Op::CircConvUp => "periodic-synthesis",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Conv2d { .. } => Some(2),
            Op::CircCorrDown | Op::CircConvUp => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }

    /// Sign pattern or winner indices of inputs at which the operation is not
    /// differentiable. Two evaluations with equal signatures lie on the same
    /// smooth piece.
    pub fn kink_signature(&self, inputs: &[&Tensor<T>]) -> Option<Vec<i64>> {
        let sign = |v: T| {
            if v > T::zero() {
                1
            } else if v < T::zero() {
                -1
            } else {
                0
            }
        };
        match self {
            Op::Relu | Op::Abs | Op::L1Norm => Some(inputs[0].data().iter().map(|&v| sign(v)).collect()),
            Op::MaxPool2d { window, stride } => maxpool_argmax(inputs[0], *window, *stride)
                .ok()
                .map(|(_, idx)| idx.into_iter().map(|i| i as i64).collect()),
            _ => None,
        }
    }

    /// Whether the signature contains an input sitting exactly on a kink.
    pub fn at_kink(&self, inputs: &[&Tensor<T>]) -> bool {
        match self {
            Op::Relu | Op::Abs | Op::L1Norm => inputs[0].data().iter().any(|v| *v == T::zero()),
            Op::MaxPool2d { window, stride } => maxpool_has_tie(inputs[0], *window, *stride),
            _ => false,
        }
    }
}

fn check_arity<T: Scalar>(op: &Op<T>, n: usize) -> Result<()> {
    match op.arity() {
        Some(k) if k != n => Err(Error::shape(op.name(), format!("expected {k} inputs, got {n}"))),
        None if n == 0 => Err(Error::shape(op.name(), "expected at least one input")),
        _ => Ok(()),
    }
}

/// Evaluate a primitive on concrete tensors.
pub fn primitive_forward<T: Scalar>(op: &Op<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    check_arity(op, inputs.len())?;
    let x = inputs[0];
    match op {
        Op::MatMul => matmul(x, inputs[1]),
        Op::Transpose => transpose(x),
        Op::Add => binary(op, x, inputs[1], |a, b| a + b),
        Op::Sub => binary(op, x, inputs[1], |a, b| a - b),
        Op::Mul => binary(op, x, inputs[1], |a, b| a * b),
        Op::Div => {
            if inputs[1].data().iter().any(|v| *v == T::zero()) {
                return Err(Error::domain("divide", "denominator contains zero"));
            }
            binary(op, x, inputs[1], |a, b| a / b)
        }
        Op::Neg => Ok(x.map(|v| -v)),
        Op::Scale(c) => Ok(x.map(|v| v * *c)),
        Op::Offset(c) => Ok(x.map(|v| v + *c)),
        Op::Abs => Ok(x.map(|v| v.abs())),
        Op::Relu => Ok(x.map(relu)),
        Op::Sigmoid => Ok(x.map(sigmoid)),
        Op::Tanh => Ok(x.map(|v| v.tanh())),
        Op::Exp => Ok(x.map(|v| v.exp())),
        Op::Log => {
            if x.data().iter().any(|v| *v <= T::zero()) {
                return Err(Error::domain("log", "argument contains a nonpositive entry"));
            }
            Ok(x.map(|v| v.ln()))
        }
        Op::Powi(n) => Ok(x.map(|v| v.powi(*n))),
        Op::Sum => Ok(Tensor::scalar(x.sum())),
        Op::Mean => {
            if x.numel() == 0 {
                return Err(Error::shape("mean", "empty tensor"));
            }
            Ok(Tensor::scalar(x.sum() / T::from_usize_lossy(x.numel())))
        }
        Op::SumLastAxis => {
            let (rows, n) = split_last(op, x)?;
            let data = (0..rows).map(|r| x.data()[r * n..(r + 1) * n].iter().fold(T::zero(), |a, &b| a + b));
            Tensor::new(x.shape()[..x.ndim() - 1].to_vec(), data.collect())
        }
        Op::L1Norm => Ok(Tensor::scalar(x.data().iter().fold(T::zero(), |a, &b| a + b.abs()))),
        Op::L2NormSq => Ok(Tensor::scalar(x.data().iter().fold(T::zero(), |a, &b| a + b * b))),
        Op::Softmax => row_map(op, x, softmax_row),
        Op::LogSoftmax => row_map(op, x, log_softmax_row),
        Op::MaxPool2d { window, stride } => maxpool_argmax(x, *window, *stride).map(|(t, _)| t),
        Op::Conv2d { stride } => conv2d(x, inputs[1], *stride),
        Op::Reshape(shape) => x.reshape(shape),
        Op::Concat { axis } => concat(inputs, *axis),
        Op::Gather { indices, shape } => gather(x, indices, shape),
        Op::BroadcastTo(shape) => broadcast_to(x, shape),
        Op::Dft => dft(x),
        Op::Idft => idft(x),
        Op::CircCorrDown => circ_corr_down(x, inputs[1]),
        Op::CircConvUp => circ_conv_up(x, inputs[1]),
    }
}

/// Vector-Jacobian product: gradient of a downstream scalar with respect to
/// each input, given the gradient `grad` with respect to the output.
pub fn primitive_backward<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let x = inputs[0];
    let unary = |f: &dyn Fn(T, T, T) -> T| -> Result<Vec<Tensor<T>>> {
        let data = x
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
            .collect();
        Ok(vec![Tensor::new(x.shape().to_vec(), data)?])
    };
    match op {
        Op::MatMul => matmul_backward(x, inputs[1], grad),
        Op::Transpose => Ok(vec![transpose(grad)?]),
        Op::Add => Ok(vec![reduce_to(grad, x)?, reduce_to(grad, inputs[1])?]),
        Op::Sub => Ok(vec![reduce_to(grad, x)?, reduce_to(&grad.map(|g| -g), inputs[1])?]),
        Op::Mul | Op::Div => {
            let b = inputs[1];
            let (ga, gb) = elementwise_pairs(x, b, grad, |a, bv, g| {
                if matches!(op, Op::Mul) {
                    (g * bv, g * a)
                } else {
                    (g / bv, -g * a / (bv * bv))
                }
            });
            Ok(vec![reduce_to(&ga, x)?, reduce_to(&gb, b)?])
        }
        Op::Neg => Ok(vec![grad.map(|g| -g)]),
        Op::Scale(c) => Ok(vec![grad.map(|g| g * *c)]),
        Op::Offset(_) => Ok(vec![grad.clone()]),
        Op::Abs => unary(&|xi, _, g| {
            if xi > T::zero() {
                g
            } else if xi < T::zero() {
                -g
            } else {
                T::zero()
            }
        }),
        Op::Relu => unary(&|xi, _, g| if xi > T::zero() { g } else { T::zero() }),
        Op::Sigmoid => unary(&|_, y, g| g * y * (T::one() - y)),
        Op::Tanh => unary(&|_, y, g| g * (T::one() - y * y)),
        Op::Exp => unary(&|_, y, g| g * y),
        Op::Log => unary(&|xi, _, g| g / xi),
        Op::Powi(n) => {
            let n = *n;
            unary(&|xi, _, g| g * T::from_i32(n).unwrap() * xi.powi(n - 1))
        }
        Op::Sum => {
            let g = grad.item()?;
            Ok(vec![Tensor::full(x.shape(), g)])
        }
        Op::Mean => {
            let g = grad.item()? / T::from_usize_lossy(x.numel());
            Ok(vec![Tensor::full(x.shape(), g)])
        }
        Op::SumLastAxis => {
            let n = *x.shape().last().unwrap();
            let data = grad.data().iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect();
            Ok(vec![Tensor::new(x.shape().to_vec(), data)?])
        }
        Op::L1Norm => {
            let g = grad.item()?;
            Ok(vec![x.map(|v| {
                if v > T::zero() {
                    g
                } else if v < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })])
        }
        Op::L2NormSq => {
            let g = grad.item()?;
            Ok(vec![x.map(|v| T::lit(2.0) * v * g)])
        }
        Op::Softmax => {
            let n = *x.shape().last().unwrap();
            let mut out = vec![T::zero(); x.numel()];
            for r in 0..x.numel() / n.max(1) {
                let y = &output.data()[r * n..(r + 1) * n];
                let g = &grad.data()[r * n..(r + 1) * n];
                let dot = y.iter().zip(g).fold(T::zero(), |a, (&yi, &gi)| a + yi * gi);
                for i in 0..n {
                    out[r * n + i] = y[i] * (g[i] - dot);
                }
            }
            Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
        }
        Op::LogSoftmax => {
            let n = *x.shape().last().unwrap();
            let mut out = vec![T::zero(); x.numel()];
            for r in 0..x.numel() / n.max(1) {
                let y = &output.data()[r * n..(r + 1) * n];
                let g = &grad.data()[r * n..(r + 1) * n];
                let total = g.iter().fold(T::zero(), |a, &b| a + b);
                for i in 0..n {
                    out[r * n + i] = g[i] - y[i].exp() * total;
                }
            }
            Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
        }
        Op::MaxPool2d { window, stride } => {
            let (_, idx) = maxpool_argmax(x, *window, *stride)?;
            let mut out = vec![T::zero(); x.numel()];
            for (o, &src) in idx.iter().enumerate() {
                out[src] = out[src] + grad.data()[o];
            }
            Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
        }
        Op::Conv2d { stride } => conv2d_backward(x, inputs[1], grad, *stride),
        Op::Reshape(_) => Ok(vec![grad.reshape(x.shape())?]),
        Op::Concat { axis } => concat_backward(inputs, grad, *axis),
        Op::Gather { indices, .. } => {
            let mut out = vec![T::zero(); x.numel()];
            for (o, &src) in indices.iter().enumerate() {
                out[src] = out[src] + grad.data()[o];
            }
            Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
        }
        Op::BroadcastTo(_) => Ok(vec![reduce_to(grad, x)?]),
        Op::Dft => dft_backward(x, grad),
        Op::Idft => idft_backward(x, grad),
        Op::CircCorrDown => circ_corr_down_backward(x, inputs[1], grad),
        Op::CircConvUp => circ_conv_up_backward(x, inputs[1], grad),
    }
}

#[inline]
pub fn relu<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let total = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
    let lse = m + total.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn split_last<T: Scalar>(op: &Op<T>, x: &Tensor<T>) -> Result<(usize, usize)> {
    let Some(&n) = x.shape().last() else {
        return Err(Error::shape(op.name(), "requires rank >= 1"));
    };
    if n == 0 {
        return Err(Error::shape(op.name(), "last axis is empty"));
    }
    Ok((x.numel() / n, n))
}

fn row_map<T: Scalar>(op: &Op<T>, x: &Tensor<T>, f: fn(&[T], &mut [T])) -> Result<Tensor<T>> {
    let (rows, n) = split_last(op, x)?;
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        f(&x.data()[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn binary<T: Scalar>(op: &Op<T>, a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    if b.numel() == 1 {
        let s = b.data()[0];
        return Ok(a.map(|v| f(v, s)));
    }
    if a.numel() == 1 {
        let s = a.data()[0];
        return Ok(b.map(|v| f(s, v)));
    }
    Err(Error::shape(op.name(), format!("{:?} vs {:?}", a.shape(), b.shape())))
}

/// Per-element partial derivatives for a (possibly scalar-broadcast) binary op,
/// returned at the output shape.
fn elementwise_pairs<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
    f: impl Fn(T, T, T) -> (T, T),
) -> (Tensor<T>, Tensor<T>) {
    let n = grad.numel();
    let pick = |t: &Tensor<T>, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
    let mut ga = Vec::with_capacity(n);
    let mut gb = Vec::with_capacity(n);
    for i in 0..n {
        let (x, y) = f(pick(a, i), pick(b, i), grad.data()[i]);
        ga.push(x);
        gb.push(y);
    }
    let shape = grad.shape().to_vec();
    (Tensor::new(shape.clone(), ga).unwrap(), Tensor::new(shape, gb).unwrap())
}

/// Sum `grad` down to `target`'s shape (inverse of broadcasting).
fn reduce_to<T: Scalar>(grad: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if grad.shape() == target.shape() {
        return Ok(grad.clone());
    }
    if target.numel() == 1 {
        return Tensor::new(target.shape().to_vec(), vec![grad.sum()]);
    }
    let out_shape = grad.shape();
    let t_shape = target.shape();
    if t_shape.len() > out_shape.len() {
        return Err(Error::shape("broadcast", format!("cannot reduce {:?} to {:?}", out_shape, t_shape)));
    }
    let offset = out_shape.len() - t_shape.len();
    let mut out = vec![T::zero(); target.numel()];
    let mut index = vec![0usize; out_shape.len()];
    for &g in grad.data() {
        let mut flat = 0;
        for (d, &td) in t_shape.iter().enumerate() {
            let i = if td == 1 { 0 } else { index[offset + d] };
            flat = flat * td + i;
        }
        out[flat] = out[flat] + g;
        increment(&mut index, out_shape);
    }
    Tensor::new(t_shape.to_vec(), out)
}

fn increment(index: &mut [usize], shape: &[usize]) {
    for d in (0..shape.len()).rev() {
        index[d] += 1;
        if index[d] < shape[d] {
            return;
        }
        index[d] = 0;
    }
}

fn broadcast_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let xs = x.shape();
    let bad = || Error::shape("broadcast", format!("{:?} cannot broadcast to {:?}", xs, shape));
    if xs.len() > shape.len() {
        return Err(bad());
    }
    let offset = shape.len() - xs.len();
    for (d, &xd) in xs.iter().enumerate() {
        if xd != 1 && xd != shape[offset + d] {
            return Err(bad());
        }
    }
    let mut out = Vec::with_capacity(numel(shape));
    let mut index = vec![0usize; shape.len()];
    for _ in 0..numel(shape) {
        let mut flat = 0;
        for (d, &xd) in xs.iter().enumerate() {
            let i = if xd == 1 { 0 } else { index[offset + d] };
            flat = flat * xd + i;
        }
        out.push(x.data()[flat]);
        increment(&mut index, shape);
    }
    Tensor::new(shape.to_vec(), out)
}

fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let err = || Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
    if a.ndim() != 2 {
        return Err(err());
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, vector) = match b.shape() {
        [bk, bn] if *bk == k => (*bn, false),
        [bk] if *bk == k => (1, true),
        _ => return Err(err()),
    };
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    let shape = if vector { vec![m] } else { vec![m, n] };
    Tensor::new(shape, out)
}

fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = if b.ndim() == 2 { b.shape()[1] } else { 1 };
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let mut ga = vec![T::zero(); m * k];
    let mut gb = vec![T::zero(); k * n];
    for i in 0..m {
        for kk in 0..k {
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + gd[i * n + j] * bd[kk * n + j];
                gb[kk * n + j] = gb[kk * n + j] + ad[i * k + kk] * gd[i * n + j];
            }
            ga[i * k + kk] = acc;
        }
    }
    Ok(vec![Tensor::new(vec![m, k], ga)?, Tensor::new(b.shape().to_vec(), gb)?])
}

fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, n] = a.shape() else {
        return Err(Error::shape("transpose", format!("expected a matrix, got {:?}", a.shape())));
    };
    let (m, n) = (*m, *n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

fn spatial_dims<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::shape(op, format!("expected spatial input, got {:?}", x.shape())));
    }
    let h = x.shape()[x.ndim() - 2];
    let w = x.shape()[x.ndim() - 1];
    Ok((x.numel() / (h * w).max(1), h, w))
}

/// Max pooling over the last two axes. Returns the pooled tensor and, for
/// every output entry, the flat input index of the first maximal element.
pub fn maxpool_argmax<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (planes, h, w) = spatial_dims("max-over-window", x)?;
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(Error::shape(
            "max-over-window",
            format!("window {window} stride {stride} does not fit {:?}", x.shape()),
        ));
    }
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut vals = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * stride * w + j * stride;
                for di in 0..window {
                    for dj in 0..window {
                        let at = base + (i * stride + di) * w + j * stride + dj;
                        if x.data()[at] > x.data()[best] {
                            best = at;
                        }
                    }
                }
                vals.push(x.data()[best]);
                idx.push(best);
            }
        }
    }
    let mut shape = x.shape()[..x.ndim() - 2].to_vec();
    shape.extend([oh, ow]);
    Ok((Tensor::new(shape, vals)?, idx))
}

fn maxpool_has_tie<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> bool {
    let Ok((pooled, idx)) = maxpool_argmax(x, window, stride) else {
        return false;
    };
    let (_, h, w) = spatial_dims("max-over-window", x).unwrap();
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    for (o, (&winner, &v)) in idx.iter().zip(pooled.data()).enumerate() {
        let p = o / (oh * ow);
        let (i, j) = ((o % (oh * ow)) / ow, o % ow);
        for di in 0..window {
            for dj in 0..window {
                let at = p * h * w + (i * stride + di) * w + j * stride + dj;
                if at != winner && x.data()[at] == v {
                    return true;
                }
            }
        }
    }
    false
}

struct ConvGeom {
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize) -> Result<ConvGeom> {
    let err = || Error::shape("conv2d", format!("input {:?} kernel {:?} stride {stride}", x.shape(), k.shape()));
    let [o, kc, kh, kw] = k.shape() else { return Err(err()) };
    if x.ndim() < 3 || stride == 0 {
        return Err(err());
    }
    let n = x.ndim();
    let (c, h, w) = (x.shape()[n - 3], x.shape()[n - 2], x.shape()[n - 1]);
    if c != *kc || *kh > h || *kw > w || *kh == 0 || *kw == 0 {
        return Err(err());
    }
    Ok(ConvGeom {
        batch: x.numel() / (c * h * w),
        c,
        h,
        w,
        o: *o,
        kh: *kh,
        kw: *kw,
        oh: (h - kh) / stride + 1,
        ow: (w - kw) / stride + 1,
    })
}

fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = conv_geom(x, k, stride)?;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![T::zero(); g.batch * g.o * g.oh * g.ow];
    for b in 0..g.batch {
        for o in 0..g.o {
            for i in 0..g.oh {
                for j in 0..g.ow {
                    let mut acc = T::zero();
                    for c in 0..g.c {
                        for di in 0..g.kh {
                            let xrow = ((b * g.c + c) * g.h + i * stride + di) * g.w + j * stride;
                            let krow = ((o * g.c + c) * g.kh + di) * g.kw;
                            for dj in 0..g.kw {
                                acc = acc + xd[xrow + dj] * kd[krow + dj];
                            }
                        }
                    }
                    out[((b * g.o + o) * g.oh + i) * g.ow + j] = acc;
                }
            }
        }
    }
    let mut shape = x.shape()[..x.ndim() - 3].to_vec();
    shape.extend([g.o, g.oh, g.ow]);
    Tensor::new(shape, out)
}

fn conv2d_backward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, grad: &Tensor<T>, stride: usize) -> Result<Vec<Tensor<T>>> {
    let g = conv_geom(x, k, stride)?;
    let (xd, kd, gd) = (x.data(), k.data(), grad.data());
    let mut gx = vec![T::zero(); x.numel()];
    let mut gk = vec![T::zero(); k.numel()];
    for b in 0..g.batch {
        for o in 0..g.o {
            for i in 0..g.oh {
                for j in 0..g.ow {
                    let go = gd[((b * g.o + o) * g.oh + i) * g.ow + j];
                    if go == T::zero() {
                        continue;
                    }
                    for c in 0..g.c {
                        for di in 0..g.kh {
                            let xrow = ((b * g.c + c) * g.h + i * stride + di) * g.w + j * stride;
                            let krow = ((o * g.c + c) * g.kh + di) * g.kw;
                            for dj in 0..g.kw {
                                gx[xrow + dj] = gx[xrow + dj] + kd[krow + dj] * go;
                                gk[krow + dj] = gk[krow + dj] + xd[xrow + dj] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(vec![Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(k.shape().to_vec(), gk)?])
}

fn concat<T: Scalar>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs[0].shape();
    if axis >= first.len() {
        return Err(Error::shape("concatenate", format!("axis {axis} out of range for {:?}", first)));
    }
    let mut total = 0;
    for t in inputs {
        let s = t.shape();
        if s.len() != first.len() || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d]) {
            return Err(Error::shape("concatenate", format!("{:?} vs {:?} along axis {axis}", s, first)));
        }
        total += s[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

fn concat_backward<T: Scalar>(inputs: &[&Tensor<T>], grad: &Tensor<T>, axis: usize) -> Result<Vec<Tensor<T>>> {
    let first = inputs[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total = grad.shape()[axis];
    let mut grads: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
    for o in 0..outer {
        let mut offset = o * total * inner;
        for (t, g) in inputs.iter().zip(grads.iter_mut()) {
            let chunk = t.shape()[axis] * inner;
            g.extend_from_slice(&grad.data()[offset..offset + chunk]);
            offset += chunk;
        }
    }
    inputs
        .iter()
        .zip(grads)
        .map(|(t, g)| Tensor::new(t.shape().to_vec(), g))
        .collect()
}

fn gather<T: Scalar>(x: &Tensor<T>, indices: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
    if numel(shape) != indices.len() {
        return Err(Error::shape("gather", format!("{} indices for shape {:?}", indices.len(), shape)));
    }
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        match x.data().get(i) {
            Some(&v) => out.push(v),
            None => return Err(Error::shape("gather", format!("index {i} out of range for {:?}", x.shape()))),
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn dft<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, n) = split_last(&Op::<T>::Dft, x)?;
    let mut out = Vec::with_capacity(rows * 2 * n);
    let zeros = vec![T::zero(); n];
    for r in 0..rows {
        let (re, im) = dft_complex(&x.data()[r * n..(r + 1) * n], &zeros, false);
        out.extend(re);
        out.extend(im);
    }
    let mut shape = x.shape()[..x.ndim() - 1].to_vec();
    shape.extend([2, n]);
    Tensor::new(shape, out)
}

fn complex_rows<T: Scalar>(op: &'static str, s: &Tensor<T>) -> Result<(usize, usize)> {
    let nd = s.ndim();
    if nd < 2 || s.shape()[nd - 2] != 2 || s.shape()[nd - 1] == 0 {
        return Err(Error::shape(op, format!("expected [.., 2, n] complex pairs, got {:?}", s.shape())));
    }
    let n = s.shape()[nd - 1];
    Ok((s.numel() / (2 * n), n))
}

fn idft<T: Scalar>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, n) = complex_rows("inverse-dft", s)?;
    let scale = T::one() / T::from_usize_lossy(n);
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        let base = r * 2 * n;
        let (re, _) = dft_complex(&s.data()[base..base + n], &s.data()[base + n..base + 2 * n], true);
        out.extend(re.into_iter().map(|v| v * scale));
    }
    Tensor::new(s.shape()[..s.ndim() - 2].iter().copied().chain([n]).collect(), out)
}

fn dft_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let n = *x.shape().last().unwrap();
    let rows = x.numel() / n;
    let zeros = vec![T::zero(); n];
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..rows {
        let base = r * 2 * n;
        let (a, _) = dft_complex(&grad.data()[base..base + n], &zeros, false);
        let (_, b) = dft_complex(&grad.data()[base + n..base + 2 * n], &zeros, false);
        out.extend(a.into_iter().zip(b).map(|(p, q)| p + q));
    }
    Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
}

fn idft_backward<T: Scalar>(s: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (rows, n) = complex_rows("inverse-dft", s)?;
    let scale = T::one() / T::from_usize_lossy(n);
    let zeros = vec![T::zero(); n];
    let mut out = Vec::with_capacity(s.numel());
    for r in 0..rows {
        let (re, im) = dft_complex(&grad.data()[r * n..(r + 1) * n], &zeros, false);
        out.extend(re.into_iter().map(|v| v * scale));
        out.extend(im.into_iter().map(|v| v * scale));
    }
    Ok(vec![Tensor::new(s.shape().to_vec(), out)?])
}

fn filter_check<T: Scalar>(op: &'static str, x: &Tensor<T>, f: &Tensor<T>, need_even: bool) -> Result<(usize, usize)> {
    if f.ndim() != 1 || f.numel() == 0 {
        return Err(Error::shape(op, format!("filter must be a nonempty vector, got {:?}", f.shape())));
    }
    let (rows, n) = split_last(&Op::<T>::CircCorrDown, x).map_err(|_| Error::shape(op, "signal must have rank >= 1"))?;
    if need_even && n % 2 != 0 {
        return Err(Error::shape(op, format!("signal length {n} is odd")));
    }
    Ok((rows, n))
}

/// `out[k] = Σ_n f[n] x[(2k + n) mod L]` along the last axis.
fn circ_corr_down<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, l) = filter_check("periodic-analysis", x, f, true)?;
    let half = l / 2;
    let mut out = vec![T::zero(); rows * half];
    for r in 0..rows {
        let xs = &x.data()[r * l..(r + 1) * l];
        for k in 0..half {
            let mut acc = T::zero();
            for (n, &fv) in f.data().iter().enumerate() {
                acc = acc + fv * xs[(2 * k + n) % l];
            }
            out[r * half + k] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = half;
    Tensor::new(shape, out)
}

fn circ_corr_down_backward<T: Scalar>(x: &Tensor<T>, f: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (rows, l) = filter_check("periodic-analysis", x, f, true)?;
    let half = l / 2;
    let mut gx = vec![T::zero(); x.numel()];
    let mut gf = vec![T::zero(); f.numel()];
    for r in 0..rows {
        let xs = &x.data()[r * l..(r + 1) * l];
        for k in 0..half {
            let g = grad.data()[r * half + k];
            for (n, &fv) in f.data().iter().enumerate() {
                let at = (2 * k + n) % l;
                gx[r * l + at] = gx[r * l + at] + fv * g;
                gf[n] = gf[n] + xs[at] * g;
            }
        }
    }
    Ok(vec![Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(f.shape().to_vec(), gf)?])
}

/// Adjoint of [`circ_corr_down`]: `out[(2k + n) mod 2M] += f[n] c[k]`.
fn circ_conv_up<T: Scalar>(c: &Tensor<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, m) = filter_check("periodic-synthesis", c, f, false)?;
    let l = 2 * m;
    let mut out = vec![T::zero(); rows * l];
    for r in 0..rows {
        let cs = &c.data()[r * m..(r + 1) * m];
        let os = &mut out[r * l..(r + 1) * l];
        for (k, &cv) in cs.iter().enumerate() {
            for (n, &fv) in f.data().iter().enumerate() {
                let at = (2 * k + n) % l;
                os[at] = os[at] + fv * cv;
            }
        }
    }
    let mut shape = c.shape().to_vec();
    *shape.last_mut().unwrap() = l;
    Tensor::new(shape, out)
}

fn circ_conv_up_backward<T: Scalar>(c: &Tensor<T>, f: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (rows, m) = filter_check("periodic-synthesis", c, f, false)?;
    let l = 2 * m;
    let mut gc = vec![T::zero(); c.numel()];
    let mut gf = vec![T::zero(); f.numel()];
    for r in 0..rows {
        let cs = &c.data()[r * m..(r + 1) * m];
        let gs = &grad.data()[r * l..(r + 1) * l];
        for (k, &cv) in cs.iter().enumerate() {
            let mut acc = T::zero();
            for (n, &fv) in f.data().iter().enumerate() {
                let g = gs[(2 * k + n) % l];
                acc = acc + fv * g;
                gf[n] = gf[n] + cv * g;
            }
            gc[r * m + k] = acc;
        }
    }
    Ok(vec![Tensor::new(c.shape().to_vec(), gc)?, Tensor::new(f.shape().to_vec(), gf)?])
}
