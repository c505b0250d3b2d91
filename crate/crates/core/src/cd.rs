//! Contextual decomposition: propagate a split `(β, γ)` of every activation so
//! that `β + γ` tracks the network and `β` carries the contribution of a
//! chosen feature group.

use crate::backend::{Backend, Eager};
use crate::error::{Error, Result};
use crate::network::{add_batch_axis, carry_absent, channel_bias, dropout_mask, presence, BoundLayer, Layer, Mode, Network};
use crate::ops::maxpool_argmax;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// A set of input coordinates, stored as a boolean mask over the input shape.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FeatureGroup {
    shape: Vec<usize>,
    mask: Vec<bool>,
}

impl FeatureGroup {
    pub fn new(shape: &[usize], mask: Vec<bool>) -> Result<Self> {
        if mask.len() != numel(shape) {
            return Err(Error::shape(
                "feature-group",
                format!("mask of length {} for input shape {:?}", mask.len(), shape),
            ));
        }
        Ok(Self { shape: shape.to_vec(), mask })
    }

    pub fn empty(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), mask: vec![false; numel(shape)] }
    }

    pub fn full(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), mask: vec![true; numel(shape)] }
    }

    /// Group from flat (row-major) coordinates.
    pub fn from_indices(shape: &[usize], indices: &[usize]) -> Result<Self> {
        let mut g = Self::empty(shape);
        for &i in indices {
            *g.mask.get_mut(i).ok_or_else(|| {
                Error::shape("feature-group", format!("index {i} out of range for {:?}", shape))
            })? = true;
        }
        Ok(g)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, i: usize) -> bool {
        self.mask.get(i).copied().unwrap_or(false)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect()
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.contains(&true)
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        !self.mask.iter().zip(&other.mask).any(|(a, b)| *a && *b)
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("feature-group", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let mask = self.mask.iter().zip(&other.mask).map(|(a, b)| *a || *b).collect();
        Ok(Self { shape: self.shape.clone(), mask })
    }

    pub fn complement(&self) -> Self {
        Self { shape: self.shape.clone(), mask: self.mask.iter().map(|m| !m).collect() }
    }

    pub fn mask_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        Tensor::new(self.shape.clone(), data).expect("mask matches shape")
    }
}

/// `(β, γ)` for one activation.
#[derive(Clone, Debug, PartialEq)]
pub struct CdPair<V> {
    pub beta: V,
    pub gamma: V,
}

impl<T: Scalar> CdPair<Tensor<T>> {
    /// `β + γ`.
    pub fn total(&self) -> Tensor<T> {
        self.beta.zip_map(&self.gamma, |a, b| a + b).expect("pair halves share a shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdScore<T> {
    pub beta_logit: T,
    pub gamma_logit: T,
    pub class_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Sigmoid,
    Tanh,
}

fn apply_nonlinearity<T: Scalar, B: Backend<T>>(b: &B, kind: Nonlinearity, v: &B::Value) -> Result<B::Value> {
    match kind {
        Nonlinearity::Sigmoid => b.sigmoid(v),
        Nonlinearity::Tanh => b.tanh(v),
    }
}

/// Which rows (leading axis) of `v` are entirely zero.
fn zero_rows<T: Scalar>(v: &Tensor<T>) -> Vec<bool> {
    let rows = v.shape().first().copied().unwrap_or(1).max(1);
    let width = v.numel() / rows;
    (0..rows)
        .map(|r| v.data()[r * width..(r + 1) * width].iter().all(|x| *x == T::zero()))
        .collect()
}

fn row_constant<T: Scalar>(shape: &[usize], flags: &[bool]) -> Tensor<T> {
    let width = numel(shape) / flags.len().max(1);
    let data = flags
        .iter()
        .flat_map(|&f| std::iter::repeat_n(if f { T::one() } else { T::zero() }, width))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Which halves of a batch row can be nonzero, fixed at the network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSide {
    /// γ is zero: the group covers the whole input.
    BetaOnly,
    /// β is zero: the group is empty.
    GammaOnly,
    Mixed,
}

/// Row sides read off the values of a pair. Rows that are zero on both
/// sides count as mixed.
pub fn row_sides<T: Scalar, B: Backend<T>>(b: &B, pair: &CdPair<B::Value>) -> Vec<RowSide> {
    let bz = zero_rows(&b.value(&pair.beta));
    let gz = zero_rows(&b.value(&pair.gamma));
    bz.iter()
        .zip(&gz)
        .map(|(&bz, &gz)| match (bz, gz) {
            (false, true) => RowSide::BetaOnly,
            (true, false) => RowSide::GammaOnly,
            _ => RowSide::Mixed,
        })
        .collect()
}

fn check_sides(sides: &[RowSide], rows: usize) -> Result<()> {
    if sides.len() != rows {
        return Err(Error::shape("cd", format!("{} row tags for {rows} rows", sides.len())));
    }
    Ok(())
}

/// `β = x ⊙ mask`, `γ = x ⊙ (1 − mask)`; `mask` broadcasts over leading batch axes.
pub fn cd_init<T: Scalar, B: Backend<T>>(b: &B, x: &B::Value, mask: &Tensor<T>) -> Result<CdPair<B::Value>> {
    let shape = b.shape(x);
    if shape.len() < mask.ndim() || shape[shape.len() - mask.ndim()..] != *mask.shape() {
        return Err(Error::shape("cd-init", format!("input {:?} mask {:?}", shape, mask.shape())));
    }
    let reps = numel(&shape) / mask.numel().max(1);
    let tile = |m: &Tensor<T>| {
        let data: Vec<T> = (0..reps).flat_map(|_| m.data().iter().copied()).collect();
        Tensor::new(shape.clone(), data).unwrap()
    };
    let keep = tile(mask);
    let rest = tile(&mask.map(|v| T::one() - v));
    Ok(CdPair { beta: b.mul_const(x, keep)?, gamma: b.mul_const(x, rest)? })
}

/// Add `bias` (already broadcast to the pre-activation shape) to `zβ`, `zγ`
/// in proportion to `|zβ|` and `|zγ|`.
///
/// Rows tagged β-only send the whole bias to β and γ-only rows to γ. In a
/// mixed row whose γ side is exactly zero the bias goes to β, and
/// symmetrically; a mixed row that is zero on both sides gives it to γ.
/// Units with `|zβ| + |zγ| = 0` split evenly.
pub fn split_bias<T: Scalar, B: Backend<T>>(
    b: &B,
    zb: B::Value,
    zg: B::Value,
    bias: &B::Value,
    sides: &[RowSide],
) -> Result<CdPair<B::Value>> {
    let vb = b.value(&zb);
    let vg = b.value(&zg);
    let shape = vb.shape().to_vec();
    let gz = zero_rows(&vg);
    let bz = zero_rows(&vb);
    let rows = gz.len();
    check_sides(sides, rows)?;
    let width = numel(&shape) / rows.max(1);
    let mut add_b = vec![T::zero(); numel(&shape)];
    let mut add_g = vec![T::zero(); numel(&shape)];
    let mut denom = vec![T::zero(); numel(&shape)];
    let mut special = false;
    for r in 0..rows {
        let span = r * width..(r + 1) * width;
        let to_beta = match sides[r] {
            RowSide::BetaOnly => Some(true),
            RowSide::GammaOnly => Some(false),
            RowSide::Mixed if bz[r] => Some(false),
            RowSide::Mixed if gz[r] => Some(true),
            RowSide::Mixed => None,
        };
        if let Some(to_beta) = to_beta {
            special = true;
            let (ab, ag) = if to_beta { (T::one(), T::zero()) } else { (T::zero(), T::one()) };
            for k in span {
                add_b[k] = ab;
                add_g[k] = ag;
                denom[k] = T::one();
            }
        } else {
            for k in span {
                if vb.data()[k] == T::zero() && vg.data()[k] == T::zero() {
                    special = true;
                    add_b[k] = T::half();
                    add_g[k] = T::half();
                    denom[k] = T::one();
                }
            }
        }
    }
    let ab = b.abs(&zb)?;
    let ag = b.abs(&zg)?;
    let mut total = b.add(&ab, &ag)?;
    let (mut nb, mut ng) = (ab, ag);
    if special {
        let t = |d: Vec<T>| Tensor::new(shape.clone(), d).unwrap();
        total = b.add(&total, &b.constant(t(denom)))?;
        nb = b.add(&nb, &b.constant(t(add_b)))?;
        ng = b.add(&ng, &b.constant(t(add_g)))?;
    }
    let fb = b.div(&nb, &total)?;
    let fg = b.div(&ng, &total)?;
    let sb = b.mul(&fb, bias)?;
    let sg = b.mul(&fg, bias)?;
    Ok(CdPair { beta: b.add(&zb, &sb)?, gamma: b.add(&zg, &sg)? })
}

/// Linear layer with `weight: [out, in]` over the last axis.
pub fn cd_linear<T: Scalar, B: Backend<T>>(
    b: &B,
    weight: &B::Value,
    bias: &B::Value,
    pair: &CdPair<B::Value>,
) -> Result<CdPair<B::Value>> {
    cd_linear_rows(b, weight, bias, pair, &row_sides(b, pair))
}

pub fn cd_linear_rows<T: Scalar, B: Backend<T>>(
    b: &B,
    weight: &B::Value,
    bias: &B::Value,
    pair: &CdPair<B::Value>,
    sides: &[RowSide],
) -> Result<CdPair<B::Value>> {
    let zb = b.linear(&pair.beta, weight)?;
    let zg = b.linear(&pair.gamma, weight)?;
    let shape = b.shape(&zb);
    let bias = b.broadcast_to(bias, &shape)?;
    split_bias(b, zb, zg, &bias, sides)
}

/// Convolution: the linear rule applied at every output position.
pub fn cd_conv2d<T: Scalar, B: Backend<T>>(
    b: &B,
    kernel: &B::Value,
    bias: &B::Value,
    stride: usize,
    pair: &CdPair<B::Value>,
    sides: &[RowSide],
) -> Result<CdPair<B::Value>> {
    let zb = b.conv2d(&pair.beta, kernel, stride)?;
    let zg = b.conv2d(&pair.gamma, kernel, stride)?;
    let shape = b.shape(&zb);
    let bias = channel_bias(b, bias, &shape)?;
    split_bias(b, zb, zg, &bias, sides)
}

/// `β' = relu(β)`, `γ' = relu(β + γ) − relu(β)`.
pub fn cd_relu<T: Scalar, B: Backend<T>>(b: &B, pair: &CdPair<B::Value>) -> Result<CdPair<B::Value>> {
    let beta = b.relu(&pair.beta)?;
    let sum = b.add(&pair.beta, &pair.gamma)?;
    let total = b.relu(&sum)?;
    Ok(CdPair { gamma: b.sub(&total, &beta)?, beta })
}

/// `β' = ½[(σ(β) − σ(0)) + (σ(β+γ) − σ(γ))]`, `γ' = σ(β+γ) − β'`.
/// Rows whose γ is exactly zero (and β is not) keep the whole activation in β.
pub fn cd_nonlinear<T: Scalar, B: Backend<T>>(
    b: &B,
    kind: Nonlinearity,
    pair: &CdPair<B::Value>,
) -> Result<CdPair<B::Value>> {
    cd_nonlinear_rows(b, kind, pair, &row_sides(b, pair))
}

pub fn cd_nonlinear_rows<T: Scalar, B: Backend<T>>(
    b: &B,
    kind: Nonlinearity,
    pair: &CdPair<B::Value>,
    sides: &[RowSide],
) -> Result<CdPair<B::Value>> {
    let sum = b.add(&pair.beta, &pair.gamma)?;
    let total = apply_nonlinearity(b, kind, &sum)?;
    let vb = zero_rows(&b.value(&pair.beta));
    let vg = zero_rows(&b.value(&pair.gamma));
    check_sides(sides, vg.len())?;
    let gz: Vec<bool> = sides
        .iter()
        .zip(vb.iter().zip(&vg))
        .map(|(side, (&bz, &gz))| match side {
            RowSide::BetaOnly => true,
            RowSide::GammaOnly => false,
            RowSide::Mixed => gz && !bz,
        })
        .collect();
    if gz.iter().all(|z| *z) {
        let gamma = b.sub(&total, &total)?;
        return Ok(CdPair { beta: total, gamma });
    }
    let at_zero = match kind {
        Nonlinearity::Sigmoid => T::half(),
        Nonlinearity::Tanh => T::zero(),
    };
    let sb = apply_nonlinearity(b, kind, &pair.beta)?;
    let sg = apply_nonlinearity(b, kind, &pair.gamma)?;
    let own = b.offset(&sb, -at_zero)?;
    let joint = b.sub(&total, &sg)?;
    let both = b.add(&own, &joint)?;
    let mut beta = b.scale(&both, T::half())?;
    if gz.iter().any(|z| *z) {
        let shape = b.shape(&total);
        let keep = row_constant::<T>(&shape, &gz);
        let rest = keep.map(|v| T::one() - v);
        let from_total = b.mul_const(&total, keep)?;
        let from_rule = b.mul_const(&beta, rest)?;
        beta = b.add(&from_total, &from_rule)?;
    }
    Ok(CdPair { gamma: b.sub(&total, &beta)?, beta })
}

/// Apply the same dropout mask to both halves.
pub fn cd_dropout<T: Scalar, B: Backend<T>>(
    b: &B,
    pair: &CdPair<B::Value>,
    mask: Option<Tensor<T>>,
) -> Result<CdPair<B::Value>> {
    match mask {
        None => Ok(pair.clone()),
        Some(m) => Ok(CdPair { beta: b.mul_const(&pair.beta, m.clone())?, gamma: b.mul_const(&pair.gamma, m)? }),
    }
}

/// Each window's winner is the argmax of `β + γ`; both halves are read there.
pub fn cd_maxpool<T: Scalar, B: Backend<T>>(
    b: &B,
    window: usize,
    stride: usize,
    pair: &CdPair<B::Value>,
) -> Result<CdPair<B::Value>> {
    let total = b.value(&pair.beta).zip_map(&b.value(&pair.gamma), |x, y| x + y)?;
    let (pooled, winners) = maxpool_argmax(&total, window, stride)?;
    Ok(CdPair {
        beta: b.gather(&pair.beta, winners.clone(), pooled.shape())?,
        gamma: b.gather(&pair.gamma, winners, pooled.shape())?,
    })
}

/// `(aβ + aγ)(bβ + bγ)`: own products stay on their side, the two cross
/// terms are shared equally.
pub fn cd_product<T: Scalar, B: Backend<T>>(
    b: &B,
    x: &CdPair<B::Value>,
    y: &CdPair<B::Value>,
) -> Result<CdPair<B::Value>> {
    let bb = b.mul(&x.beta, &y.beta)?;
    let gg = b.mul(&x.gamma, &y.gamma)?;
    let bg = b.mul(&x.beta, &y.gamma)?;
    let gb = b.mul(&x.gamma, &y.beta)?;
    let cross = b.add(&bg, &gb)?;
    let half = b.scale(&cross, T::half())?;
    Ok(CdPair { beta: b.add(&bb, &half)?, gamma: b.add(&gg, &half)? })
}

fn cd_add<T: Scalar, B: Backend<T>>(b: &B, x: &CdPair<B::Value>, y: &CdPair<B::Value>) -> Result<CdPair<B::Value>> {
    Ok(CdPair { beta: b.add(&x.beta, &y.beta)?, gamma: b.add(&x.gamma, &y.gamma)? })
}

fn cd_gate<T: Scalar, B: Backend<T>>(
    b: &B,
    gate: &[B::Value; 3],
    x: &CdPair<B::Value>,
    h: &CdPair<B::Value>,
    sides: &[RowSide],
) -> Result<CdPair<B::Value>> {
    let xb = b.linear(&x.beta, &gate[0])?;
    let hb = b.linear(&h.beta, &gate[1])?;
    let xg = b.linear(&x.gamma, &gate[0])?;
    let hg = b.linear(&h.gamma, &gate[1])?;
    let zb = b.add(&xb, &hb)?;
    let zg = b.add(&xg, &hg)?;
    let shape = b.shape(&zb);
    let bias = b.broadcast_to(&gate[2], &shape)?;
    split_bias(b, zb, zg, &bias, sides)
}

/// LSTM over `[B, T, D]` pairs, returning the decomposed final hidden state.
/// Steps whose total input row is zero leave the state untouched.
pub fn cd_lstm<T: Scalar, B: Backend<T>>(
    b: &B,
    gates: &[[B::Value; 3]],
    pair: &CdPair<B::Value>,
    sides: &[RowSide],
) -> Result<CdPair<B::Value>> {
    let total = b.value(&pair.beta).zip_map(&b.value(&pair.gamma), |x, y| x + y)?;
    let shape = total.shape().to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::shape("lstm", format!("expects a nonempty [batch, time, features] input, got {:?}", shape)));
    }
    let (batch, steps) = (shape[0], shape[1]);
    let hidden = b.shape(&gates[0][2])[0];
    let zero = || b.constant(Tensor::zeros(&[batch, hidden]));
    let mut h = CdPair { beta: zero(), gamma: zero() };
    let mut c = CdPair { beta: zero(), gamma: zero() };
    for t in 0..steps {
        let present = presence(&total, t);
        if present.is_all_zero() {
            continue;
        }
        let x = CdPair { beta: b.index_axis(&pair.beta, 1, t)?, gamma: b.index_axis(&pair.gamma, 1, t)? };
        let pre: Vec<CdPair<B::Value>> = gates.iter().map(|g| cd_gate(b, g, &x, &h, sides)).collect::<Result<_>>()?;
        let i = cd_nonlinear_rows(b, Nonlinearity::Sigmoid, &pre[0], sides)?;
        let f = cd_nonlinear_rows(b, Nonlinearity::Sigmoid, &pre[1], sides)?;
        let g = cd_nonlinear_rows(b, Nonlinearity::Tanh, &pre[2], sides)?;
        let o = cd_nonlinear_rows(b, Nonlinearity::Sigmoid, &pre[3], sides)?;
        let fc = cd_product(b, &f, &c)?;
        let ig = cd_product(b, &i, &g)?;
        let c_new = cd_add(b, &fc, &ig)?;
        let tc = cd_nonlinear_rows(b, Nonlinearity::Tanh, &c_new, sides)?;
        let h_new = cd_product(b, &o, &tc)?;
        if present.data().iter().all(|v| *v == T::one()) {
            h = h_new;
            c = c_new;
        } else {
            h = CdPair {
                beta: carry_absent(b, &present, &h_new.beta, &h.beta)?,
                gamma: carry_absent(b, &present, &h_new.gamma, &h.gamma)?,
            };
            c = CdPair {
                beta: carry_absent(b, &present, &c_new.beta, &c.beta)?,
                gamma: carry_absent(b, &present, &c_new.gamma, &c.gamma)?,
            };
        }
    }
    Ok(h)
}

/// Full and empty groups fix the side regardless of the input values.
pub(crate) fn group_side(group: &FeatureGroup, from_values: &RowSide) -> RowSide {
    if group.is_empty() {
        RowSide::GammaOnly
    } else if group.len() == group.mask().len() {
        RowSide::BetaOnly
    } else {
        *from_values
    }
}

impl<T: Scalar> Network<T> {
    /// Propagate a batched pair `[R, ..input_shape]` through every layer and
    /// return the pair after each one. Row sides are read from the input pair.
    pub fn cd_layers<B: Backend<T>>(
        &self,
        b: &B,
        params: &[BoundLayer<B::Value>],
        pair: CdPair<B::Value>,
        mode: Mode,
        seed: u64,
    ) -> Result<Vec<CdPair<B::Value>>> {
        let sides = row_sides(b, &pair);
        self.cd_layers_rows(b, params, pair, &sides, mode, seed)
    }

    /// [`Network::cd_layers`] with explicit row sides.
    pub fn cd_layers_rows<B: Backend<T>>(
        &self,
        b: &B,
        params: &[BoundLayer<B::Value>],
        pair: CdPair<B::Value>,
        sides: &[RowSide],
        mode: Mode,
        seed: u64,
    ) -> Result<Vec<CdPair<B::Value>>> {
        check_sides(sides, b.shape(&pair.beta).first().copied().unwrap_or(0))?;
        let mut cur = pair;
        let mut out = Vec::with_capacity(self.layers().len());
        for (index, (layer, bound)) in self.layers().iter().zip(params).enumerate() {
            cur = match (layer, bound) {
                (Layer::Linear { .. }, BoundLayer::Affine { weight, bias }) => {
                    cd_linear_rows(b, weight, bias, &cur, sides)?
                }
                (Layer::Conv2d { stride, .. }, BoundLayer::Affine { weight, bias }) => {
                    cd_conv2d(b, weight, bias, *stride, &cur, sides)?
                }
                (Layer::Relu, _) => cd_relu(b, &cur)?,
                (Layer::Sigmoid, _) => cd_nonlinear_rows(b, Nonlinearity::Sigmoid, &cur, sides)?,
                (Layer::Tanh, _) => cd_nonlinear_rows(b, Nonlinearity::Tanh, &cur, sides)?,
                (Layer::MaxPool2d { window, stride }, _) => cd_maxpool(b, *window, *stride, &cur)?,
                (Layer::Dropout { rate }, _) => {
                    cd_dropout(b, &cur, dropout_mask(&b.shape(&cur.beta), *rate, mode, seed, index))?
                }
                (Layer::Flatten, _) => {
                    let shape = b.shape(&cur.beta);
                    let flat = [shape[0], shape[1..].iter().product()];
                    CdPair { beta: b.reshape(&cur.beta, &flat)?, gamma: b.reshape(&cur.gamma, &flat)? }
                }
                (Layer::Lstm(_), BoundLayer::Lstm { gates }) => cd_lstm(b, gates, &cur, sides)?,
                _ => return Err(Error::UnsupportedLayer(format!("{} with mismatched parameters", layer.kind()))),
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Logit-level decomposition of a batched pair: `β`, `γ` of shape `[R, classes]`.
    pub fn cd_logits<B: Backend<T>>(
        &self,
        b: &B,
        params: &[BoundLayer<B::Value>],
        pair: CdPair<B::Value>,
    ) -> Result<CdPair<B::Value>> {
        Ok(self.cd_layers(b, params, pair, Mode::Eval, 0)?.pop().expect("network has layers"))
    }

    pub fn cd_logits_rows<B: Backend<T>>(
        &self,
        b: &B,
        params: &[BoundLayer<B::Value>],
        pair: CdPair<B::Value>,
        sides: &[RowSide],
    ) -> Result<CdPair<B::Value>> {
        Ok(self.cd_layers_rows(b, params, pair, sides, Mode::Eval, 0)?.pop().expect("network has layers"))
    }

    /// Per-layer decomposition for one sample and one group.
    pub fn cd_layerwise(
        &self,
        x: &Tensor<T>,
        group: &FeatureGroup,
        mode: Mode,
        seed: u64,
    ) -> Result<Vec<CdPair<Tensor<T>>>> {
        self.check_group(x, group)?;
        let xb = add_batch_axis(x)?;
        let pair = cd_init(&Eager, &xb, &group.mask_tensor())?;
        let sides = [group_side(group, &row_sides(&Eager, &pair)[0])];
        let params = self.bind(&Eager, false);
        self.cd_layers_rows(&Eager, &params, pair, &sides, mode, seed)?
            .into_iter()
            .map(|p| {
                let shape = p.beta.shape()[1..].to_vec();
                Ok(CdPair { beta: p.beta.reshape(&shape)?, gamma: p.gamma.reshape(&shape)? })
            })
            .collect()
    }

    fn check_group(&self, x: &Tensor<T>, group: &FeatureGroup) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::shape(
                "cd",
                format!("input {:?} does not match network input {:?}", x.shape(), self.input_shape()),
            ));
        }
        if group.shape() != x.shape() {
            return Err(Error::shape("cd", format!("group {:?} vs input {:?}", group.shape(), x.shape())));
        }
        Ok(())
    }

    /// Logit decompositions of one sample for many groups at once:
    /// `β`, `γ` of shape `[groups, classes]`.
    pub fn cd_groups(&self, x: &Tensor<T>, groups: &[FeatureGroup]) -> Result<CdPair<Tensor<T>>> {
        if groups.is_empty() {
            let empty = Tensor::new(vec![0, self.num_classes()], Vec::new())?;
            return Ok(CdPair { beta: empty.clone(), gamma: empty });
        }
        for g in groups {
            self.check_group(x, g)?;
        }
        let n = x.numel();
        let mut beta = Vec::with_capacity(groups.len() * n);
        let mut gamma = Vec::with_capacity(groups.len() * n);
        for g in groups {
            for (v, &m) in x.data().iter().zip(g.mask()) {
                let (bv, gv) = if m { (*v, T::zero()) } else { (T::zero(), *v) };
                beta.push(bv);
                gamma.push(gv);
            }
        }
        let mut shape = vec![groups.len()];
        shape.extend_from_slice(x.shape());
        let pair = CdPair { beta: Tensor::new(shape.clone(), beta)?, gamma: Tensor::new(shape, gamma)? };
        let sides: Vec<RowSide> =
            groups.iter().zip(row_sides(&Eager, &pair)).map(|(g, s)| group_side(g, &s)).collect();
        let params = self.bind(&Eager, false);
        self.cd_logits_rows(&Eager, &params, pair, &sides)
    }

    /// `(β, γ)` at `class_index` for `group`.
    pub fn cd_score(&self, x: &Tensor<T>, group: &FeatureGroup, class_index: usize) -> Result<CdScore<T>> {
        if class_index >= self.num_classes() {
            return Err(Error::invalid(format!("class {class_index} out of range for {} classes", self.num_classes())));
        }
        let pair = self.cd_groups(x, std::slice::from_ref(group))?;
        Ok(CdScore {
            beta_logit: pair.beta.data()[class_index],
            gamma_logit: pair.gamma.data()[class_index],
            class_index,
        })
    }

    /// `β(a ∪ b) − β(a) − β(b)` at `class_index`.
    pub fn interaction_score(
        &self,
        x: &Tensor<T>,
        a: &FeatureGroup,
        b: &FeatureGroup,
        class_index: usize,
    ) -> Result<T> {
        if !a.is_disjoint(b) {
            let shared = a.mask().iter().zip(b.mask()).filter(|(x, y)| **x && **y).count();
            return Err(Error::OverlappingGroups(shared));
        }
        if class_index >= self.num_classes() {
            return Err(Error::invalid(format!("class {class_index} out of range for {} classes", self.num_classes())));
        }
        let ab = a.union(b)?;
        let scores = self.cd_groups(x, &[ab, a.clone(), b.clone()])?;
        let k = self.num_classes();
        let at = |row: usize| scores.beta.data()[row * k + class_index];
        Ok(at(0) - at(1) - at(2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn pair(beta: &[f64], gamma: &[f64]) -> CdPair<Tensor<f64>> {
        let n = beta.len();
        CdPair { beta: t(&[1, n], beta), gamma: t(&[1, n], gamma) }
    }

    #[test]
    fn init_masks() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let p = cd_init(&Eager, &x, &t(&[3], &[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(p.beta.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(p.gamma.data(), &[0.0, 2.0, 3.0]);
    }

    #[test]
    fn linear_bias_split() {
        let w = t(&[1, 1], &[2.0]);
        let b = t(&[1], &[1.0]);
        let p = cd_linear(&Eager, &w, &b, &pair(&[1.0], &[3.0])).unwrap();
        assert!((p.beta.data()[0] - 2.25).abs() < 1e-12);
        assert!((p.gamma.data()[0] - 6.75).abs() < 1e-12);

        let p = cd_linear(&Eager, &w, &b, &pair(&[1.5], &[0.0])).unwrap();
        assert_eq!((p.beta.data()[0], p.gamma.data()[0]), (4.0, 0.0));
        let p = cd_linear(&Eager, &w, &b, &pair(&[0.0], &[1.5])).unwrap();
        assert_eq!((p.beta.data()[0], p.gamma.data()[0]), (0.0, 4.0));

        let p = cd_linear(&Eager, &w, &t(&[1], &[0.0]), &pair(&[1.0], &[3.0])).unwrap();
        assert_eq!((p.beta.data()[0], p.gamma.data()[0]), (2.0, 6.0));
    }

    #[test]
    fn cancelling_unit_splits_evenly() {
        let w = t(&[2, 2], &[1.0, 1.0, 1.0, 0.0]);
        let b = t(&[2], &[4.0, 4.0]);
        // unit 0 sees zero on both sides, unit 1 does not
        let p = cd_linear(&Eager, &w, &b, &pair(&[1.0, -1.0], &[2.0, -2.0])).unwrap();
        assert_eq!(p.beta.data()[0], 2.0);
        assert_eq!(p.gamma.data()[0], 2.0);
    }

    #[test]
    fn dead_rows_keep_both_identities() {
        // every hidden unit is dead, so the output layer sees zeros on both sides
        let net = Network::new(
            vec![
                Layer::Linear { weight: t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]), bias: t(&[2], &[-10.0, -10.0]) },
                Layer::Relu,
                Layer::Linear { weight: t(&[1, 2], &[1.0, 1.0]), bias: t(&[1], &[3.0]) },
            ],
            vec![2],
            1,
        )
        .unwrap();
        let x = t(&[2], &[1.0, 2.0]);
        let full = net.cd_score(&x, &FeatureGroup::full(&[2]), 0).unwrap();
        assert_eq!((full.beta_logit, full.gamma_logit), (3.0, 0.0));
        let empty = net.cd_score(&x, &FeatureGroup::empty(&[2]), 0).unwrap();
        assert_eq!((empty.beta_logit, empty.gamma_logit), (0.0, 3.0));
        let part = net.cd_score(&x, &FeatureGroup::from_indices(&[2], &[0]).unwrap(), 0).unwrap();
        assert_eq!((part.beta_logit, part.gamma_logit), (0.0, 3.0));
    }

    #[test]
    fn relu_rule() {
        let p = cd_relu(&Eager, &pair(&[-1.0, 2.0, 0.5], &[3.0, -5.0, 0.0])).unwrap();
        assert_eq!(p.beta.data(), &[0.0, 2.0, 0.5]);
        assert_eq!(p.gamma.data(), &[2.0, -2.0, 0.0]);
    }

    #[test]
    fn nonlinear_rule() {
        let p = cd_nonlinear(&Eager, Nonlinearity::Tanh, &pair(&[1.0], &[0.0])).unwrap();
        assert!((p.beta.data()[0] - 1f64.tanh()).abs() < 1e-15);
        assert_eq!(p.gamma.data()[0], 0.0);

        let p = cd_nonlinear(&Eager, Nonlinearity::Sigmoid, &pair(&[0.0], &[0.7])).unwrap();
        assert_eq!(p.beta.data()[0], 0.0);
        assert!((p.gamma.data()[0] - 1.0 / (1.0 + (-0.7f64).exp())).abs() < 1e-15);

        let p = cd_nonlinear(&Eager, Nonlinearity::Sigmoid, &pair(&[0.3, -2.0], &[1.1, 0.4])).unwrap();
        let expect_b = 0.5 * ((crate::ops::sigmoid(0.3) - 0.5) + (crate::ops::sigmoid(1.4) - crate::ops::sigmoid(1.1)));
        assert!((p.beta.data()[0] - expect_b).abs() < 1e-15);
        let total = p.total();
        assert!((total.data()[1] - crate::ops::sigmoid(-1.6)).abs() < 1e-15);
    }

    #[test]
    fn maxpool_follows_total() {
        let p = CdPair { beta: t(&[1, 1, 1, 2], &[1.0, 0.0]), gamma: t(&[1, 1, 1, 2], &[0.0, 3.0]) };
        let out = cd_maxpool(&Eager, 1, 1, &p).unwrap();
        assert_eq!(out.beta.data(), &[1.0, 0.0]);
        let p = CdPair { beta: t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]), gamma: t(&[1, 1, 2, 2], &[0.0, 3.0, 0.0, 0.0]) };
        let out = cd_maxpool(&Eager, 2, 2, &p).unwrap();
        assert_eq!((out.beta.data()[0], out.gamma.data()[0]), (0.0, 3.0));
    }

    #[test]
    fn dropout_shares_mask() {
        let p = pair(&[1.0, 2.0, 3.0, 4.0], &[0.5, -1.0, 2.0, 1.0]);
        assert_eq!(cd_dropout(&Eager, &p, None).unwrap(), p);
        let mask = dropout_mask::<f64>(&[1, 4], 0.5, Mode::Train, 3, 0).unwrap();
        let out = cd_dropout(&Eager, &p, Some(mask.clone())).unwrap();
        let direct = p.total().zip_map(&mask, |a, m| a * m).unwrap();
        assert_eq!(out.total(), direct);
    }

    #[test]
    fn product_splits_cross_terms() {
        let x = pair(&[2.0], &[3.0]);
        let y = pair(&[5.0], &[7.0]);
        let p = cd_product(&Eager, &x, &y).unwrap();
        assert_eq!(p.beta.data()[0], 10.0 + 0.5 * (14.0 + 15.0));
        assert_eq!(p.gamma.data()[0], 21.0 + 0.5 * (14.0 + 15.0));
    }

    #[test]
    fn relu_sum_interactions() {
        let net = Network::new(
            vec![
                Layer::Linear { weight: t(&[1, 2], &[1.0, 1.0]), bias: t(&[1], &[0.0]) },
                Layer::Relu,
            ],
            vec![2],
            1,
        )
        .unwrap();
        let a = FeatureGroup::from_indices(&[2], &[0]).unwrap();
        let b = FeatureGroup::from_indices(&[2], &[1]).unwrap();
        let x = t(&[2], &[1.0, 1.0]);
        assert_eq!(net.cd_score(&x, &a.union(&b).unwrap(), 0).unwrap().beta_logit, 2.0);
        assert_eq!(net.interaction_score(&x, &a, &b, 0).unwrap(), 0.0);
        let x = t(&[2], &[1.0, -1.0]);
        assert_eq!(net.interaction_score(&x, &a, &b, 0).unwrap(), -1.0);
        assert!(matches!(net.interaction_score(&x, &a, &a, 0), Err(Error::OverlappingGroups(1))));
    }
}
