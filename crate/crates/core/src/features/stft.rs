//! Short-time Fourier analysis: framing, Hann window, magnitude spectra,
//! mel filterbank, and the matching overlap-add inverse used by the fallback
//! mel inversion.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Periodic Hann window of length `n`.
pub fn hann<F: Scalar>(n: usize) -> Vec<F> {
    (0..n)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            F::cast(0.5 * (1.0 - x.cos()))
        })
        .collect()
}

/// Number of analysis frames for a signal of length `t` (center padding).
pub fn frame_count(t: usize, hop: usize) -> usize {
    t / hop
}

/// Center-padded magnitude spectrogram, `frames x (window/2 + 1)`.
pub fn magnitude_frames<F: Scalar>(
    samples: &[F],
    window: usize,
    hop: usize,
) -> Result<Array2<F>> {
    if samples.len() < window {
        return Err(Error::TooShort {
            got: samples.len(),
            need: window,
        });
    }
    let n_frames = frame_count(samples.len(), hop);
    let n_bins = window / 2 + 1;
    let pad = window / 2;

    let mut padded = vec![F::zero(); samples.len() + window];
    padded[pad..pad + samples.len()].copy_from_slice(samples);

    let win = hann::<F>(window);
    let mut planner = FftPlanner::<F>::new();
    let fft = planner.plan_fft_forward(window);
    let mut out = Array2::zeros((n_frames, n_bins));
    let mut buf: Vec<Complex<F>> = vec![Complex::new(F::zero(), F::zero()); window];
    for n in 0..n_frames {
        let start = n * hop;
        for i in 0..window {
            buf[i] = Complex::new(padded[start + i] * win[i], F::zero());
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            out[[n, k]] = buf[k].norm();
        }
    }
    Ok(out)
}

/// HTK mel scale.
fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `bands x (window/2 + 1)`, peak-normalized.
pub fn mel_filterbank(
    bands: usize,
    window: usize,
    sample_rate: u32,
    fmin: f64,
    fmax: f64,
) -> Array2<f64> {
    let n_bins = window / 2 + 1;
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax.min(sample_rate as f64 / 2.0));
    let points: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (bands + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / window as f64;
    let mut fb = Array2::zeros((bands, n_bins));
    for m in 0..bands {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f <= left || f >= right {
                0.0
            } else if f <= center {
                (f - left) / (center - left)
            } else {
                (right - f) / (right - center)
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Moore-Penrose pseudo-inverse of the (wide, full-row-rank) filterbank:
/// `pinv = Mᵀ (M Mᵀ)⁻¹`, shape `(window/2 + 1) x bands`.
pub fn filterbank_pinv(fb: &Array2<f64>) -> Array2<f64> {
    let gram = fb.dot(&fb.t());
    let inv = invert(&gram);
    fb.t().dot(&inv)
}

/// Gauss-Jordan inverse with partial pivoting. Panics on a singular matrix;
/// the mel gram matrix is well conditioned for any sane band layout.
fn invert(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut aug = Array2::zeros((n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            aug[[i, j]] = a[[i, j]];
        }
        aug[[i, n + i]] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if aug[[r, col]].abs() > aug[[pivot, col]].abs() {
                pivot = r;
            }
        }
        assert!(aug[[pivot, col]].abs() > 1e-12, "singular matrix");
        if pivot != col {
            for j in 0..2 * n {
                let tmp = aug[[col, j]];
                aug[[col, j]] = aug[[pivot, j]];
                aug[[pivot, j]] = tmp;
            }
        }
        let diag = aug[[col, col]];
        for j in 0..2 * n {
            aug[[col, j]] /= diag;
        }
        for r in 0..n {
            if r != col {
                let factor = aug[[r, col]];
                if factor != 0.0 {
                    for j in 0..2 * n {
                        aug[[r, j]] -= factor * aug[[col, j]];
                    }
                }
            }
        }
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = aug[[i, n + j]];
        }
    }
    out
}

/// Overlap-add resynthesis from complex spectra (inverse of
/// `magnitude_frames` framing). Returns `n_frames * hop` samples.
pub fn overlap_add<F: Scalar>(spectra: &[Vec<Complex<F>>], window: usize, hop: usize) -> Vec<F> {
    let n_frames = spectra.len();
    let pad = window / 2;
    let total = n_frames * hop + window;
    let mut acc = vec![F::zero(); total];
    let mut norm = vec![F::zero(); total];
    let win = hann::<F>(window);
    let mut planner = FftPlanner::<F>::new();
    let ifft = planner.plan_fft_inverse(window);
    let scale = F::cast(1.0 / window as f64);
    let mut buf: Vec<Complex<F>> = vec![Complex::new(F::zero(), F::zero()); window];
    for (n, spec) in spectra.iter().enumerate() {
        // rebuild the full conjugate-symmetric spectrum
        let n_bins = window / 2 + 1;
        assert_eq!(spec.len(), n_bins);
        for k in 0..n_bins {
            buf[k] = spec[k];
        }
        for k in n_bins..window {
            buf[k] = spec[window - k].conj();
        }
        ifft.process(&mut buf);
        let start = n * hop;
        for i in 0..window {
            acc[start + i] += buf[i].re * scale * win[i];
            norm[start + i] += win[i] * win[i];
        }
    }
    let eps = F::cast(1e-8);
    let body = &acc[pad..pad + n_frames * hop];
    let norm_body = &norm[pad..pad + n_frames * hop];
    body.iter()
        .zip(norm_body)
        .map(|(&a, &w)| a / (w + eps))
        .collect()
}

/// Forward complex STFT with the same framing as `magnitude_frames`.
pub fn complex_frames<F: Scalar>(samples: &[F], window: usize, hop: usize) -> Vec<Vec<Complex<F>>> {
    let n_frames = frame_count(samples.len(), hop);
    let n_bins = window / 2 + 1;
    let pad = window / 2;
    let mut padded = vec![F::zero(); samples.len() + window];
    padded[pad..pad + samples.len()].copy_from_slice(samples);
    let win = hann::<F>(window);
    let mut planner = FftPlanner::<F>::new();
    let fft = planner.plan_fft_forward(window);
    let mut out = Vec::with_capacity(n_frames);
    let mut buf: Vec<Complex<F>> = vec![Complex::new(F::zero(), F::zero()); window];
    for n in 0..n_frames {
        let start = n * hop;
        for i in 0..window {
            buf[i] = Complex::new(padded[start + i] * win[i], F::zero());
        }
        fft.process(&mut buf);
        out.push(buf[..n_bins].to_vec());
    }
    out
}
