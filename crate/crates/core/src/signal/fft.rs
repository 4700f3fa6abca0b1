//! Real-signal spectral helpers on top of `rustfft`.
//!
//! All routines take a real buffer, transform it with a full complex FFT,
//! edit the non-negative frequency bins and mirror the edit onto the
//! conjugate bins so the inverse stays real.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::num_traits::{Float, FromPrimitive};
use rustfft::{Fft, FftNum, FftPlanner};

/// Sample type usable by the spectral routines (`f32` or `f64`).
pub trait Sample: FftNum + Float + FromPrimitive {}
impl<T: FftNum + Float + FromPrimitive> Sample for T {}

/// Forward/inverse plans for one transform length.
pub struct SpectralPlan<T: Sample> {
    len: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Sample> SpectralPlan<T> {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spectrum(&self, x: &[T]) -> Vec<Complex<T>> {
        assert_eq!(x.len(), self.len);
        let mut buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward.process(&mut buf);
        buf
    }

    /// Inverse transform, keeping the real part and applying the `1/n` scale.
    pub fn real_inverse(&self, mut buf: Vec<Complex<T>>, out: &mut [T]) {
        assert_eq!(buf.len(), self.len);
        self.inverse.process(&mut buf);
        let scale = T::one() / T::from_usize(self.len).unwrap();
        for (o, c) in out.iter_mut().zip(&buf) {
            *o = c.re * scale;
        }
    }

    /// Multiplies bin `k` (and its mirror `n - k`) by `gain(k)` for every
    /// `k` in `0..=n/2`, in place.
    pub fn apply_gain(&self, x: &mut [T], gain: impl Fn(usize) -> T) {
        let n = self.len;
        if n == 0 {
            return;
        }
        let mut spec = self.spectrum(x);
        for k in 0..=n / 2 {
            let g = gain(k);
            if g == T::one() {
                continue;
            }
            spec[k] = spec[k] * g;
            if k != 0 && n - k != k {
                spec[n - k] = spec[n - k] * g;
            }
        }
        self.real_inverse(spec, x);
    }
}

/// Center frequency of bin `k` for a length-`n` transform at rate `fs`.
#[inline]
pub fn bin_frequency(k: usize, n: usize, fs: f64) -> f64 {
    k as f64 * fs / n as f64
}

/// `iFFT(FFT(x))`, used to bound transform round-off.
pub fn round_trip<T: Sample>(x: &[T]) -> Vec<T> {
    let plan = SpectralPlan::new(x.len());
    let mut out = vec![T::zero(); x.len()];
    plan.real_inverse(plan.spectrum(x), &mut out);
    out
}

/// Zeroes every bin whose center frequency lies in `[f_min, f_max]`.
pub fn zero_band<T: Sample>(plan: &SpectralPlan<T>, x: &mut [T], fs: f64, f_min: f64, f_max: f64) {
    let n = plan.len();
    plan.apply_gain(x, |k| {
        let f = bin_frequency(k, n, fs);
        if f >= f_min && f <= f_max {
            T::zero()
        } else {
            T::one()
        }
    });
}

/// Keeps bins strictly inside `(lo, hi)` and zeroes the rest.
pub fn keep_band<T: Sample>(plan: &SpectralPlan<T>, x: &mut [T], fs: f64, lo: f64, hi: f64) {
    let n = plan.len();
    plan.apply_gain(x, |k| {
        let f = bin_frequency(k, n, fs);
        if f > lo && f < hi {
            T::one()
        } else {
            T::zero()
        }
    });
}

/// Band-limited resampling of one channel to `out_len` samples by
/// truncating (or zero-extending) the spectrum.
pub fn resample_channel<T: Sample>(x: &[T], out_len: usize) -> Vec<T> {
    let n = x.len();
    if out_len == n {
        return x.to_vec();
    }
    if n == 0 || out_len == 0 {
        return vec![T::zero(); out_len];
    }
    let spec = SpectralPlan::new(n).spectrum(x);
    let mut out_spec = vec![Complex::new(T::zero(), T::zero()); out_len];
    let keep = (n.min(out_len) - 1) / 2;
    out_spec[0] = spec[0];
    for k in 1..=keep {
        out_spec[k] = spec[k];
        out_spec[out_len - k] = spec[n - k];
    }
    // An even output length has a lone Nyquist bin; fold the pair of
    // source bins that map onto it into a real value.
    if out_len.is_multiple_of(2) && out_len < n {
        let k = out_len / 2;
        let two = T::one() + T::one();
        let folded = (spec[k] + spec[n - k]) / two;
        out_spec[k] = Complex::new(folded.re, T::zero());
    }
    let plan = SpectralPlan::new(out_len);
    let mut out = vec![T::zero(); out_len];
    plan.real_inverse(out_spec, &mut out);
    let ratio = T::from_usize(out_len).unwrap() / T::from_usize(n).unwrap();
    for v in &mut out {
        *v = *v * ratio;
    }
    out
}

/// Index of the largest-magnitude bin in `1..=n/2` (DC excluded).
pub fn peak_bin<T: Sample>(x: &[T]) -> usize {
    let spec = SpectralPlan::new(x.len()).spectrum(x);
    (1..=x.len() / 2)
        .max_by(|&a, &b| spec[a].norm().partial_cmp(&spec[b].norm()).unwrap())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_precision_f64_and_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 2, 7, 100, 256, 401] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = round_trip(&x);
            for (a, b) in x.iter().zip(&y) {
                assert!((a - b).abs() < 1e-10);
            }
            let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
            let yf = round_trip(&xf);
            for (a, b) in xf.iter().zip(&yf) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resample_keeps_tone_bin() {
        let fs_in = 1000.0;
        let x: Vec<f64> = (0..1000)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / fs_in).sin())
            .collect();
        let y = resample_channel(&x, 200);
        assert_eq!(y.len(), 200);
        // 200 samples at 200 Hz -> 1 Hz bins
        assert_eq!(peak_bin(&y), 10);
        // an exactly representable tone survives with its amplitude
        let expect: Vec<f64> = (0..200)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / 200.0).sin())
            .collect();
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
