//! Discrete Fourier transform: iterative radix-2 for power-of-two lengths,
//! direct O(n²) summation otherwise.

use crate::scalar::Scalar;

/// Unnormalized complex DFT. With `inverse` the kernel sign is flipped
/// (`e^{+2πi jk/n}`) but no `1/n` factor is applied.
pub fn dft_complex<T: Scalar>(re: &[T], im: &[T], inverse: bool) -> (Vec<T>, Vec<T>) {
    assert_eq!(re.len(), im.len(), "real and imaginary parts differ in length");
    let n = re.len();
    if n <= 1 {
        return (re.to_vec(), im.to_vec());
    }
    if n.is_power_of_two() {
        radix2(re, im, inverse)
    } else {
        naive(re, im, inverse)
    }
}

/// DFT of a real signal, returning (real, imaginary) parts.
pub fn dft_real<T: Scalar>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let zeros = vec![T::zero(); x.len()];
    dft_complex(x, &zeros, false)
}

/// Real part of the normalized inverse DFT.
pub fn idft_real<T: Scalar>(re: &[T], im: &[T]) -> Vec<T> {
    let n = T::from_usize_lossy(re.len());
    let (out, _) = dft_complex(re, im, true);
    out.into_iter().map(|v| v / n).collect()
}

fn twiddle<T: Scalar>(k: usize, n: usize, inverse: bool) -> (T, T) {
    let angle = T::TAU() * T::from_usize_lossy(k) / T::from_usize_lossy(n);
    let s = if inverse { angle.sin() } else { -angle.sin() };
    (angle.cos(), s)
}

fn naive<T: Scalar>(re: &[T], im: &[T], inverse: bool) -> (Vec<T>, Vec<T>) {
    let n = re.len();
    let mut out_re = vec![T::zero(); n];
    let mut out_im = vec![T::zero(); n];
    for k in 0..n {
        let (mut acc_re, mut acc_im) = (T::zero(), T::zero());
        for j in 0..n {
            let (c, s) = twiddle::<T>((j * k) % n, n, inverse);
            acc_re = acc_re + re[j] * c - im[j] * s;
            acc_im = acc_im + re[j] * s + im[j] * c;
        }
        out_re[k] = acc_re;
        out_im[k] = acc_im;
    }
    (out_re, out_im)
}

fn radix2<T: Scalar>(re: &[T], im: &[T], inverse: bool) -> (Vec<T>, Vec<T>) {
    let n = re.len();
    let bits = n.trailing_zeros();
    let mut a_re = vec![T::zero(); n];
    let mut a_im = vec![T::zero(); n];
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        a_re[j] = re[i];
        a_im[j] = im[i];
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let table: Vec<(T, T)> = (0..half).map(|k| twiddle(k * (n / len), n, inverse)).collect();
        for start in (0..n).step_by(len) {
            for (k, &(c, s)) in table.iter().enumerate() {
                let (u_re, u_im) = (a_re[start + k], a_im[start + k]);
                let (x_re, x_im) = (a_re[start + k + half], a_im[start + k + half]);
                let v_re = x_re * c - x_im * s;
                let v_im = x_re * s + x_im * c;
                a_re[start + k] = u_re + v_re;
                a_im[start + k] = u_im + v_im;
                a_re[start + k + half] = u_re - v_re;
                a_im[start + k + half] = u_im - v_im;
            }
        }
        len *= 2;
    }
    (a_re, a_im)
}
