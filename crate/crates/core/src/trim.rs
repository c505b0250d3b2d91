//! Transformation importance: attribute `s = M ⊙ T(x)` through `f ∘ T⁻¹`.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Eager};
use crate::cd::CdPair;
use crate::error::{Error, Result};
use crate::network::{BoundLayer, Mode, Network};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{numel, Tensor};
use crate::wavelet::{check_levels, dwt_forward_with, dwt_inverse_with, WaveletFilter};

/// Invertible (or pseudo-invertible) map applied to the last axis of the input.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform<T> {
    Identity,
    /// Real signal `[n]` to spectrum `[2, n]` (real and imaginary rows).
    Dft,
    Dwt { filter: WaveletFilter<T>, levels: usize },
    /// `s = P x` with `P: [k, n]`, inverted by `P⁺: [n, k]`.
    LinearProjection { p: Tensor<T>, p_pinv: Tensor<T> },
}

/// Inverse of a square matrix by Gauss-Jordan elimination with partial pivoting.
pub fn invert_square<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k] = m.shape() else {
        return Err(Error::shape("inverse", format!("expected a matrix, got {:?}", m.shape())));
    };
    if n != k {
        return Err(Error::shape("inverse", format!("matrix {:?} is not square", m.shape())));
    }
    let n = *n;
    let mut a: Vec<f64> = m.to_f64_vec();
    let mut inv: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        if a[pivot * n + col].abs() <= 1e-12 * scale {
            return Err(Error::domain("inverse", "matrix is singular"));
        }
        for j in 0..n {
            a.swap(col * n + j, pivot * n + j);
            inv.swap(col * n + j, pivot * n + j);
        }
        let d = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = a[i * n + col];
                if f != 0.0 {
                    for j in 0..n {
                        a[i * n + j] -= f * a[col * n + j];
                        inv[i * n + j] -= f * inv[col * n + j];
                    }
                }
            }
        }
    }
    Tensor::from_f64(vec![n, n], &inv)
}

impl<T: Scalar> Transform<T> {
    pub fn dwt(filter: WaveletFilter<T>, levels: usize) -> Self {
        Transform::Dwt { filter, levels }
    }

    /// Projection with a supplied pseudo-inverse, or the exact inverse of a
    /// square `P` when none is given.
    pub fn linear_projection(p: Tensor<T>, p_pinv: Option<Tensor<T>>) -> Result<Self> {
        let [k, n] = p.shape() else {
            return Err(Error::shape("projection", format!("P must be a matrix, got {:?}", p.shape())));
        };
        let p_pinv = match p_pinv {
            Some(q) => {
                if q.shape() != [*n, *k] {
                    return Err(Error::shape("projection", format!("pseudo-inverse {:?} for P {:?}", q.shape(), p.shape())));
                }
                q
            }
            None if k == n => invert_square(&p)
                .map_err(|_| Error::invalid("projection matrix is singular and no pseudo-inverse was given"))?,
            None => return Err(Error::invalid("non-square projection requires a pseudo-inverse")),
        };
        Ok(Transform::LinearProjection { p, p_pinv })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::Dft => "dft",
            Transform::Dwt { .. } => "dwt",
            Transform::LinearProjection { .. } => "linear-projection",
        }
    }

    /// Whether `invert(apply(x)) == x` up to rounding.
    pub fn is_invertible(&self) -> bool {
        !matches!(self, Transform::LinearProjection { .. })
    }

    /// Per-sample transformed shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Transform::Identity => Ok(input.to_vec()),
            Transform::Dft => match input {
                [n] if *n > 0 => Ok(vec![2, *n]),
                _ => Err(Error::shape("dft", format!("expects a 1-D signal, got {:?}", input))),
            },
            Transform::Dwt { levels, .. } => match input {
                [n] => {
                    check_levels(*n, *levels)?;
                    Ok(vec![*n])
                }
                _ => Err(Error::shape("dwt", format!("expects a 1-D signal, got {:?}", input))),
            },
            Transform::LinearProjection { p, .. } => match input {
                [n] if *n == p.shape()[1] => Ok(vec![p.shape()[0]]),
                _ => Err(Error::shape("projection", format!("P {:?} cannot act on {:?}", p.shape(), input))),
            },
        }
    }

    /// `T` on a batch `[R, ..]`.
    pub fn apply_with<B: Backend<T>>(&self, b: &B, x: &B::Value) -> Result<B::Value> {
        match self {
            Transform::Identity => Ok(x.clone()),
            Transform::Dft => b.dft(x),
            Transform::Dwt { filter, levels } => dwt_forward_with(b, &b.constant(filter.tensor()), x, *levels),
            Transform::LinearProjection { p, .. } => b.linear(x, &b.constant(p.clone())),
        }
    }

    /// `T⁻¹` (or `P⁺`) on a batch `[R, ..]`.
    pub fn invert_with<B: Backend<T>>(&self, b: &B, s: &B::Value) -> Result<B::Value> {
        match self {
            Transform::Identity => Ok(s.clone()),
            Transform::Dft => b.idft(s),
            Transform::Dwt { filter, levels } => dwt_inverse_with(b, &b.constant(filter.tensor()), s, *levels),
            Transform::LinearProjection { p_pinv, .. } => b.linear(s, &b.constant(p_pinv.clone())),
        }
    }

    fn batched(&self, x: &Tensor<T>, f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let out = f(&x.reshape(&shape)?)?;
        out.reshape(&out.shape()[1..])
    }

    /// `s = T(x)` for one sample.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.output_shape(x.shape())?;
        self.batched(x, |v| self.apply_with(&Eager, v))
    }

    /// `x' = T⁻¹(s)` for one sample.
    pub fn invert(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        self.batched(s, |v| self.invert_with(&Eager, v))
    }

    /// `x − T⁻¹(T(x))`.
    pub fn residual(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let back = self.invert(&self.apply(x)?)?;
        x.zip_map(&back, |a, b| a - b)
    }
}

/// 1-D frequency of DFT bin `k` for length `n`.
pub fn bin_frequency(k: usize, n: usize) -> usize {
    k.min(n - k)
}

/// Mask over a length-`n` spectrum `[2, n]` selecting bins whose frequency
/// lies in `[lo, hi)`; the Nyquist bin is included when `hi` is the Nyquist
/// frequency.
pub fn band_mask<T: Scalar>(n: usize, lo: usize, hi: usize) -> Result<Tensor<T>> {
    let nyquist = n / 2;
    if n == 0 || lo >= hi || hi > nyquist {
        return Err(Error::invalid(format!("band [{lo}, {hi}) invalid for length {n} (Nyquist {nyquist})")));
    }
    let row: Vec<T> = (0..n)
        .map(|k| {
            let f = bin_frequency(k, n);
            if (lo <= f && f < hi) || (f == nyquist && hi == nyquist) {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let mut data = row.clone();
    data.extend(row);
    Tensor::new(vec![2, n], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionMethod {
    Cd,
    #[serde(alias = "ig")]
    IntegratedGradients,
}

impl AttributionMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Cd => "cd",
            Self::IntegratedGradients => "integrated-gradients",
        }
    }
}

impl std::str::FromStr for AttributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cd" => Ok(Self::Cd),
            "ig" | "integrated-gradients" => Ok(Self::IntegratedGradients),
            other => Err(Error::Unsupported(format!("attribution method `{other}`"))),
        }
    }
}

/// Batched CD through `f ∘ T⁻¹` given transformed-space halves `[R, ..s]`.
/// `residual` (if any) is added to the γ side after inversion.
pub fn cd_through_inverse<T: Scalar, B: Backend<T>>(
    b: &B,
    net: &Network<T>,
    params: &[BoundLayer<B::Value>],
    invert: impl Fn(&B::Value) -> Result<B::Value>,
    s_beta: &B::Value,
    s_gamma: &B::Value,
    residual: Option<&B::Value>,
) -> Result<CdPair<B::Value>> {
    let beta = invert(s_beta)?;
    let mut gamma = invert(s_gamma)?;
    if let Some(r) = residual {
        let shape = b.shape(&gamma);
        gamma = b.add(&gamma, &b.broadcast_to(r, &shape)?)?;
    }
    net.cd_logits(b, params, CdPair { beta, gamma })
}

impl<T: Scalar> Network<T> {
    fn transformed(&self, transform: &Transform<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        if x.shape() != self.input_shape() {
            return Err(Error::shape("trim", format!("input {:?} vs network {:?}", x.shape(), self.input_shape())));
        }
        let s = transform.apply(x)?;
        let residual = if transform.is_invertible() { None } else { Some(transform.residual(x)?) };
        Ok((s, residual))
    }

    /// TRIM-CD logits for several transformed-space masks at once:
    /// `β`, `γ` of shape `[masks, classes]`.
    pub fn trim_cd(&self, transform: &Transform<T>, x: &Tensor<T>, masks: &[Tensor<T>]) -> Result<CdPair<Tensor<T>>> {
        let (s, residual) = self.transformed(transform, x)?;
        let mut beta = Vec::with_capacity(masks.len() * s.numel());
        let mut gamma = Vec::with_capacity(masks.len() * s.numel());
        for m in masks {
            if m.shape() != s.shape() {
                return Err(Error::shape("trim", format!("mask {:?} vs transformed {:?}", m.shape(), s.shape())));
            }
            for (v, w) in s.data().iter().zip(m.data()) {
                beta.push(*v * *w);
                gamma.push(*v * (T::one() - *w));
            }
        }
        let mut shape = vec![masks.len()];
        shape.extend_from_slice(s.shape());
        let sb = Tensor::new(shape.clone(), beta)?;
        let sg = Tensor::new(shape, gamma)?;
        let params = self.bind(&Eager, false);
        cd_through_inverse(&Eager, self, &params, |v| transform.invert_with(&Eager, v), &sb, &sg, residual.as_ref())
    }

    /// Integrated gradients of logit `class_index` of `f ∘ T⁻¹` at `s = T(x)`
    /// (midpoint rule, zero baseline unless given), in transformed space.
    pub fn integrated_gradients(
        &self,
        transform: &Transform<T>,
        x: &Tensor<T>,
        baseline: Option<&Tensor<T>>,
        class_index: usize,
        steps: usize,
    ) -> Result<Tensor<T>> {
        if steps == 0 {
            return Err(Error::invalid("integrated gradients needs at least one step"));
        }
        if class_index >= self.num_classes() {
            return Err(Error::invalid(format!("class {class_index} out of range")));
        }
        let (s, residual) = self.transformed(transform, x)?;
        let zero = Tensor::zeros(s.shape());
        let base = baseline.unwrap_or(&zero);
        if base.shape() != s.shape() {
            return Err(Error::shape("integrated-gradients", format!("baseline {:?} vs {:?}", base.shape(), s.shape())));
        }
        let delta = s.zip_map(base, |a, b| a - b)?;
        let n = s.numel();
        let mut path = Vec::with_capacity(steps * n);
        for k in 0..steps {
            let alpha = T::lit((k as f64 + 0.5) / steps as f64);
            path.extend(base.data().iter().zip(delta.data()).map(|(b, d)| *b + alpha * *d));
        }
        let mut shape = vec![steps];
        shape.extend_from_slice(s.shape());
        let tape = Tape::new();
        let sv = tape.param(Tensor::new(shape, path)?);
        let mut xv = transform.invert_with(&tape, &sv)?;
        if let Some(r) = residual {
            let xs = tape.shape(&xv);
            xv = tape.add(&xv, &tape.broadcast_to(&tape.constant(r), &xs)?)?;
        }
        let params = self.bind(&tape, false);
        let logits = self.forward_batch(&tape, &params, &xv, Mode::Eval, 0)?.pop().unwrap();
        let picked = tape.select_last(&logits, class_index)?;
        let out = tape.sum(&picked)?;
        let grads = tape.backward(out)?;
        let g = grads.get(sv).expect("path is a parameter");
        let scale = T::lit(1.0 / steps as f64);
        let data = (0..n)
            .map(|i| {
                let mean = (0..steps).map(|k| g.data()[k * n + i]).sum::<T>() * scale;
                mean * delta.data()[i]
            })
            .collect();
        Tensor::new(s.shape().to_vec(), data)
    }

    /// TRIM score of `mask` for `class_index` by the chosen method: CD `β` or
    /// the masked sum of integrated-gradients attributions.
    pub fn trim_attribution(
        &self,
        transform: &Transform<T>,
        x: &Tensor<T>,
        mask: &Tensor<T>,
        class_index: usize,
        method: AttributionMethod,
        ig_steps: usize,
    ) -> Result<T> {
        if class_index >= self.num_classes() {
            return Err(Error::invalid(format!("class {class_index} out of range")));
        }
        match method {
            AttributionMethod::Cd => {
                let pair = self.trim_cd(transform, x, std::slice::from_ref(mask))?;
                Ok(pair.beta.data()[class_index])
            }
            AttributionMethod::IntegratedGradients => {
                let attr = self.integrated_gradients(transform, x, None, class_index, ig_steps)?;
                if attr.shape() != mask.shape() {
                    return Err(Error::shape("trim", format!("mask {:?} vs transformed {:?}", mask.shape(), attr.shape())));
                }
                Ok(attr.data().iter().zip(mask.data()).map(|(a, m)| *a * *m).sum())
            }
        }
    }
}

/// Full mask over the transformed shape.
pub fn full_mask<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::ones(shape)
}

/// Mask with ones at `indices` (flat) over `shape`.
pub fn index_mask<T: Scalar>(shape: &[usize], indices: &[usize]) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); numel(shape)];
    for &i in indices {
        *data
            .get_mut(i)
            .ok_or_else(|| Error::shape("mask", format!("index {i} outside {:?}", shape)))? = T::one();
    }
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_mask_pairs_conjugate_bins() {
        let m = band_mask::<f64>(32, 3, 4).unwrap();
        let on: Vec<usize> = (0..32).filter(|&k| m.data()[k] == 1.0).collect();
        assert_eq!(on, vec![3, 29]);
        assert_eq!(m.data()[32 + 3], 1.0);
        assert!(band_mask::<f64>(32, 0, 16).unwrap().data().iter().all(|v| *v == 1.0));
        assert!(band_mask::<f64>(32, 4, 4).is_err());
        assert!(band_mask::<f64>(32, 0, 17).is_err());
    }

    #[test]
    fn bands_tile_the_spectrum() {
        let edges = [0, 2, 5, 9, 16];
        let mut cover = vec![0.0; 64];
        for w in edges.windows(2) {
            let m = band_mask::<f64>(32, w[0], w[1]).unwrap();
            for (c, v) in cover.iter_mut().zip(m.data()) {
                *c += v;
            }
        }
        assert!(cover.iter().all(|c| *c == 1.0));
    }

    #[test]
    fn gauss_jordan_inverse() {
        let p = Tensor::new(vec![3, 3], vec![2.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 3.0, 1.0]).unwrap();
        let inv = invert_square(&p).unwrap();
        let prod: Tensor<f64> = Eager.matmul(&p, &inv).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod.data()[i * 3 + j] - want).abs() < 1e-12);
            }
        }
        let singular = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(Transform::linear_projection(singular, None).is_err());
        let wide = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert!(Transform::linear_projection(wide, None).is_err());
    }

    #[test]
    fn projection_residual() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let pinv = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let t = Transform::linear_projection(p, Some(pinv)).unwrap();
        let r = t.residual(&Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[0.0, 4.0]);
    }
}
