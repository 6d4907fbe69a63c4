//! Radix-2 FFT and the per-channel causal convolution built on it.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Twiddle factors `exp(sign * 2 pi i k / n)` for `k < n / 2`, each evaluated directly.
pub fn twiddles(n: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n / 2)
        .map(|k| {
            if k == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64)
            }
        })
        .collect()
}

/// In-place iterative Cooley-Tukey transform. `buf.len()` must be a power of two.
pub fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    let table = twiddles(buf.len(), inverse);
    fft_with_table(buf, &table, inverse);
}

/// [`fft_in_place`] with a precomputed [`twiddles`] table for `buf.len()`.
pub fn fft_with_table(buf: &mut [Complex64], table: &[Complex64], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length {n} is not a power of two");
    assert_eq!(
        table.len(),
        n / 2,
        "twiddle table does not match length {n}"
    );
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for chunk in buf.chunks_mut(len) {
            let (lo, hi) = chunk.split_at_mut(half);
            for (k, (a, b)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                let t = *b * table[k * stride];
                *b = *a - t;
                *a += t;
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for x in buf.iter_mut() {
            *x *= scale;
        }
    }
}

/// Smallest power of two that is at least `2n`.
pub fn fft_len(n: usize) -> usize {
    (2 * n).max(1).next_power_of_two()
}

/// Per-channel causal convolution of two `[n, d]` column stacks.
///
/// Both columns of a channel go through one complex transform (kernel in the
/// real part, signal in the imaginary part) and are separated by conjugate
/// symmetry before the pointwise product.
pub(crate) fn causal_conv_raw(kernel: &[f64], signal: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    if n == 0 || d == 0 {
        return out;
    }
    let len = fft_len(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    let mut prod = vec![Complex64::new(0.0, 0.0); len];
    let (fwd, inv) = (twiddles(len, false), twiddles(len, true));
    for j in 0..d {
        buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for t in 0..n {
            buf[t] = Complex64::new(kernel[t * d + j], signal[t * d + j]);
        }
        fft_with_table(&mut buf, &fwd, false);
        for k in 0..len {
            let z = buf[k];
            let zc = buf[(len - k) % len].conj();
            let fk = (z + zc) * 0.5;
            let fs = (z - zc) * Complex64::new(0.0, -0.5);
            prod[k] = fk * fs;
        }
        fft_with_table(&mut prod, &inv, true);
        for t in 0..n {
            out[t * d + j] = prod[t].re;
        }
    }
    out
}

fn reverse_rows(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        out[t * d..(t + 1) * d].copy_from_slice(&x[(n - 1 - t) * d..(n - t) * d]);
    }
    out
}

/// Adjoint of the causal convolution with respect to one operand:
/// `adj[k] = sum_{t >= k} upstream[t] * other[t - k]`, computed as a reversed
/// causal convolution.
pub(crate) fn causal_conv_adjoint(upstream: &[f64], other: &[f64], n: usize, d: usize) -> Vec<f64> {
    let rev = reverse_rows(upstream, n, d);
    let conv = causal_conv_raw(&rev, other, n, d);
    reverse_rows(&conv, n, d)
}

fn check_conv_args(kernel: &Tensor, signal: &Tensor) -> Result<(usize, usize)> {
    if kernel.ndim() != 2 || kernel.shape() != signal.shape() {
        return Err(shape_err(
            "causal_convolve",
            format!(
                "kernel {:?} and signal {:?} must share a [n, d] shape",
                kernel.shape(),
                signal.shape()
            ),
        ));
    }
    if !kernel.is_finite() || !signal.is_finite() {
        return Err(Error::NonFinite("causal_convolve"));
    }
    Ok((kernel.shape()[0], kernel.shape()[1]))
}

/// `out[t, j] = sum_{k=0..=t} kernel[k, j] * signal[t - k, j]`, via a zero-padded FFT.
pub fn causal_convolve(kernel: &Tensor, signal: &Tensor) -> Result<Tensor> {
    let (n, d) = check_conv_args(kernel, signal)?;
    let out = causal_conv_raw(kernel.data(), signal.data(), n, d);
    Ok(Tensor::from_parts(vec![n, d], out))
}

pub(crate) fn validate_conv(kernel: &Tensor, signal: &Tensor) -> Result<(usize, usize)> {
    check_conv_args(kernel, signal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct(kernel: &Tensor, signal: &Tensor) -> Tensor {
        let (n, d) = (kernel.shape()[0], kernel.shape()[1]);
        let mut out = Tensor::zeros(&[n, d]);
        for t in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..=t {
                    acc += kernel.at(&[k, j]) * signal.at(&[t - k, j]);
                }
                out.set(&[t, j], acc);
            }
        }
        out
    }

    #[test]
    fn fft_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let orig: Vec<Complex64> = Tensor::randn(&[16], 1.0, &mut rng)
            .data()
            .iter()
            .map(|&x| Complex64::new(x, -x * 0.5))
            .collect();
        let mut buf = orig.clone();
        fft_in_place(&mut buf, false);
        fft_in_place(&mut buf, true);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn identity_and_zero_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let signal = Tensor::randn(&[9, 3], 1.0, &mut rng);
        let mut impulse = Tensor::zeros(&[9, 3]);
        for j in 0..3 {
            impulse.set(&[0, j], 1.0);
        }
        let out = causal_convolve(&impulse, &signal).unwrap();
        assert!(out.max_abs_diff(&signal) < 1e-12);
        let zero = causal_convolve(&Tensor::zeros(&[9, 3]), &signal).unwrap();
        assert!(zero.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn matches_direct_sum_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Tensor::randn(&[8, 3], 1.0, &mut rng);
        let s = Tensor::randn(&[8, 3], 1.0, &mut rng);
        let got = causal_convolve(&k, &s).unwrap();
        assert!(got.max_abs_diff(&direct(&k, &s)) < 1e-10);
    }

    #[test]
    fn adjoint_matches_direct_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d) = (11, 2);
        let g = Tensor::randn(&[n, d], 1.0, &mut rng);
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let adj = causal_conv_adjoint(g.data(), x.data(), n, d);
        for k in 0..n {
            for j in 0..d {
                let want: f64 = (k..n).map(|t| g.at(&[t, j]) * x.at(&[t - k, j])).sum();
                assert!((adj[k * d + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let a = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[4, 3]);
        assert!(matches!(causal_convolve(&a, &b), Err(Error::Shape { .. })));
        let mut c = Tensor::zeros(&[4, 2]);
        c.set(&[1, 1], f64::NAN);
        assert_eq!(
            causal_convolve(&a, &c),
            Err(Error::NonFinite("causal_convolve"))
        );
    }
}
