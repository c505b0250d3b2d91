//! Periodic orthogonal wavelet filter bank and the wavelet-validity loss.

use std::f64::consts::{PI, SQRT_2};
use std::ops::Range;

use crate::backend::{Backend, Eager};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const DB2: [f64; 4] = [0.48296291314453416, 0.8365163037378079, 0.2241438680420134, -0.12940952255126037];

const DB5: [f64; 10] = [
    0.16010239797419293,
    0.6038292697971896,
    0.7243085284377729,
    0.13842814590132074,
    -0.24229488706638203,
    -0.032244869584638375,
    0.07757149384004572,
    -0.006241490212798274,
    -0.012580751999081999,
    0.0033357252854737712,
];

/// Lowpass filter `h`; the highpass is `g[n] = (−1)ⁿ h[N−1−n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletFilter<T> {
    pub h: Vec<T>,
}

impl<T: Scalar> WaveletFilter<T> {
    pub fn new(h: Vec<T>) -> Result<Self> {
        if h.is_empty() || !h.len().is_multiple_of(2) {
            return Err(Error::invalid(format!("filter length must be even and positive, got {}", h.len())));
        }
        Ok(Self { h })
    }

    pub fn haar() -> Self {
        Self { h: vec![T::lit(1.0 / SQRT_2); 2] }
    }

    pub fn db2() -> Self {
        Self { h: DB2.iter().map(|&v| T::lit(v)).collect() }
    }

    pub fn db5() -> Self {
        Self { h: DB5.iter().map(|&v| T::lit(v)).collect() }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "haar" | "db1" => Ok(Self::haar()),
            "db2" => Ok(Self::db2()),
            "db5" => Ok(Self::db5()),
            other => Err(Error::invalid(format!("unknown wavelet `{other}` (expected haar, db2 or db5)"))),
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn highpass(&self) -> Vec<T> {
        let n = self.h.len();
        (0..n)
            .map(|i| if i % 2 == 0 { self.h[n - 1 - i] } else { -self.h[n - 1 - i] })
            .collect()
    }

    pub fn tensor(&self) -> Tensor<T> {
        Tensor::from_vec(self.h.clone())
    }
}

/// Ranges of `[a_J, d_J, …, d_1]` within the concatenated coefficients.
pub fn scale_ranges(len: usize, levels: usize) -> Vec<Range<usize>> {
    let coarse = len >> levels;
    let mut out = Vec::with_capacity(levels + 1);
    out.push(0..coarse);
    let mut start = coarse;
    for j in (1..=levels).rev() {
        let n = len >> j;
        out.push(start..start + n);
        start += n;
    }
    out
}

pub fn check_levels(len: usize, levels: usize) -> Result<()> {
    if levels == 0 || levels >= usize::BITS as usize || len == 0 || !len.is_multiple_of(1usize << levels) {
        return Err(Error::invalid(format!("signal length {len} is not divisible by 2^{levels}")));
    }
    Ok(())
}

fn slice_last<T: Scalar, B: Backend<T>>(b: &B, v: &B::Value, range: Range<usize>) -> Result<B::Value> {
    let shape = b.shape(v);
    let n = *shape.last().unwrap();
    let rows = shape.iter().product::<usize>() / n.max(1);
    let width = range.len();
    let mut idx = Vec::with_capacity(rows * width);
    for r in 0..rows {
        idx.extend(range.clone().map(|k| r * n + k));
    }
    let mut out = shape.clone();
    *out.last_mut().unwrap() = width;
    b.gather(v, idx, &out)
}

/// `g` from `h` on a backend (differentiable in `h`).
pub fn highpass_of<T: Scalar, B: Backend<T>>(b: &B, h: &B::Value) -> Result<B::Value> {
    let n = b.shape(h)[0];
    let reversed = b.gather(h, (0..n).rev().collect(), &[n])?;
    let signs = Tensor::from_vec((0..n).map(|i| if i % 2 == 0 { T::one() } else { -T::one() }).collect());
    b.mul_const(&reversed, signs)
}

/// Multi-level periodic analysis over the last axis; returns `[a_J, d_J, …, d_1]`.
pub fn dwt_forward_with<T: Scalar, B: Backend<T>>(b: &B, h: &B::Value, x: &B::Value, levels: usize) -> Result<B::Value> {
    let len = *b.shape(x).last().ok_or_else(|| Error::shape("dwt", "rank-0 signal"))?;
    check_levels(len, levels)?;
    let g = highpass_of(b, h)?;
    let mut approx = x.clone();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let d = b.periodic_analysis(&approx, &g)?;
        approx = b.periodic_analysis(&approx, h)?;
        details.push(d);
    }
    let axis = b.shape(x).len() - 1;
    let mut parts: Vec<&B::Value> = vec![&approx];
    parts.extend(details.iter().rev());
    b.concat(&parts, axis)
}

/// Inverse of [`dwt_forward_with`] (the adjoint synthesis bank).
pub fn dwt_inverse_with<T: Scalar, B: Backend<T>>(b: &B, h: &B::Value, coeffs: &B::Value, levels: usize) -> Result<B::Value> {
    let len = *b.shape(coeffs).last().ok_or_else(|| Error::shape("dwt", "rank-0 coefficients"))?;
    check_levels(len, levels)?;
    let g = highpass_of(b, h)?;
    let ranges = scale_ranges(len, levels);
    let mut approx = slice_last(b, coeffs, ranges[0].clone())?;
    for r in &ranges[1..] {
        let d = slice_last(b, coeffs, r.clone())?;
        let lo = b.periodic_synthesis(&approx, h)?;
        let hi = b.periodic_synthesis(&d, &g)?;
        approx = b.add(&lo, &hi)?;
    }
    Ok(approx)
}

pub fn dwt_forward<T: Scalar>(filter: &WaveletFilter<T>, x: &Tensor<T>, levels: usize) -> Result<Tensor<T>> {
    dwt_forward_with(&Eager, &filter.tensor(), x, levels)
}

pub fn dwt_inverse<T: Scalar>(filter: &WaveletFilter<T>, coeffs: &Tensor<T>, levels: usize) -> Result<Tensor<T>> {
    dwt_inverse_with(&Eager, &filter.tensor(), coeffs, levels)
}

/// Per-scale coefficient arrays `[a_J, d_J, …, d_1]`.
pub fn split_scales<T: Scalar>(coeffs: &[T], levels: usize) -> Vec<Vec<T>> {
    scale_ranges(coeffs.len(), levels).into_iter().map(|r| coeffs[r].to_vec()).collect()
}

/// Number of frequencies `w` in `[0, π)` at which `ĥ` is checked.
pub const FREQUENCY_GRID: usize = 64;

/// Filter-validity terms of the wavelet loss.
#[derive(Clone, Debug)]
pub struct ConstraintTerms<V> {
    pub lowpass_sum: V,
    pub highpass_sum: V,
    pub unit_norm: V,
    pub frequency: V,
    pub orthogonality: V,
    pub total: V,
}

/// `(Σh − √2)² + (Σg)² + (‖h‖² − 1)² + Σ_w (|ĥ(w)|² + |ĥ(w+π)|² − 2)² + Σ_k (Σₙ h[n]h[n−2k] − δ_k)²`.
pub fn constraint_terms<T: Scalar, B: Backend<T>>(b: &B, h: &B::Value, grid: usize) -> Result<ConstraintTerms<B::Value>> {
    let n = b.shape(h)[0];
    let sq = |v: &B::Value| b.powi(v, 2);

    let s = b.sum(h)?;
    let lowpass_sum = sq(&b.offset(&s, T::lit(-SQRT_2))?)?;
    let g = highpass_of(b, h)?;
    let highpass_sum = sq(&b.sum(&g)?)?;
    let unit_norm = sq(&b.offset(&b.l2_norm_sq(h)?, -T::one())?)?;

    let response = |shift: f64| -> Result<B::Value> {
        let mut cos = Vec::with_capacity(grid * n);
        let mut sin = Vec::with_capacity(grid * n);
        for j in 0..grid {
            let w = PI * j as f64 / grid as f64 + shift;
            for k in 0..n {
                cos.push(T::lit((w * k as f64).cos()));
                sin.push(T::lit((w * k as f64).sin()));
            }
        }
        let c = b.constant(Tensor::new(vec![grid, n], cos)?);
        let s = b.constant(Tensor::new(vec![grid, n], sin)?);
        let re = b.matmul(&c, h)?;
        let im = b.matmul(&s, h)?;
        b.add(&sq(&re)?, &sq(&im)?)
    };
    let both = b.add(&response(0.0)?, &response(PI)?)?;
    let frequency = b.sum(&sq(&b.offset(&both, T::lit(-2.0))?)?)?;

    // shifts k = −(N/2 − 1) ..= N/2 − 1
    let half = (n / 2) as isize;
    let shifts: Vec<isize> = (1 - half..half).collect();
    let mut select = vec![T::zero(); shifts.len() * n * n];
    for (ki, &k) in shifts.iter().enumerate() {
        for i in 0..n {
            let j = i as isize - 2 * k;
            if (0..n as isize).contains(&j) {
                select[(ki * n + i) * n + j as usize] = T::one();
            }
        }
    }
    let select = b.constant(Tensor::new(vec![shifts.len() * n, n], select)?);
    let moved = b.reshape(&b.matmul(&select, h)?, &[shifts.len(), n])?;
    let tiled = b.broadcast_to(&b.reshape(h, &[1, n])?, &[shifts.len(), n])?;
    let corr = b.sum_last_axis(&b.mul(&moved, &tiled)?)?;
    let delta = Tensor::from_vec(shifts.iter().map(|&k| if k == 0 { T::one() } else { T::zero() }).collect());
    let orthogonality = b.sum(&sq(&b.sub(&corr, &b.constant(delta))?)?)?;

    let mut total = b.add(&lowpass_sum, &highpass_sum)?;
    for t in [&unit_norm, &frequency, &orthogonality] {
        total = b.add(&total, t)?;
    }
    Ok(ConstraintTerms { lowpass_sum, highpass_sum, unit_norm, frequency, orthogonality, total })
}

/// `λ‖Ψx‖₁` plus the filter-validity terms for one signal.
pub fn wavelet_loss<T: Scalar>(filter: &WaveletFilter<T>, x: &Tensor<T>, levels: usize, lambda: T) -> Result<T> {
    let h = filter.tensor();
    let c = dwt_forward(filter, x, levels)?;
    let sparsity = c.data().iter().map(|v| v.abs()).sum::<T>();
    Ok(lambda * sparsity + constraint_terms(&Eager, &h, FREQUENCY_GRID)?.total.item()?)
}

/// Constraint-term loss of a filter alone.
pub fn constraint_loss<T: Scalar>(filter: &WaveletFilter<T>) -> Result<T> {
    constraint_terms(&Eager, &filter.tensor(), FREQUENCY_GRID)?.total.item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haar_one_level() {
        let h = WaveletFilter::<f64>::haar();
        let c = dwt_forward(&h, &Tensor::from_vec(vec![1.0, 2.0]), 1).unwrap();
        assert!((c.data()[0] - 3.0 / SQRT_2).abs() < 1e-15);
        assert!((c.data()[1] + 1.0 / SQRT_2).abs() < 1e-15);
        let x = dwt_inverse(&h, &c, 1).unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-15 && (x.data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn known_filters_satisfy_constraints() {
        for f in [WaveletFilter::<f64>::haar(), WaveletFilter::db2(), WaveletFilter::db5()] {
            assert!(constraint_loss(&f).unwrap() <= 1e-10, "{:?}", f);
        }
        assert!(constraint_loss(&WaveletFilter::<f64>::haar()).unwrap() <= 1e-12);
    }

    #[test]
    fn doubled_haar_penalized() {
        let f = WaveletFilter::new(vec![2.0 / SQRT_2; 2]).unwrap();
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        assert!(wavelet_loss(&f, &x, 1, 0.0).unwrap() >= 11.0);
    }

    #[test]
    fn scale_layout() {
        assert_eq!(scale_ranges(16, 2), vec![0..4, 4..8, 8..16]);
        assert!(check_levels(12, 3).is_err());
    }
}
