//! Zero-phase band-pass filtering and the window preprocessing protocol.

use ndiff::Tensor;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Width in Hz of the raised-cosine edges of the pass band.
pub const TRANSITION_HZ: f64 = 2.0;
/// Leading segment dropped by [`preprocess`], in seconds.
pub const DISCARD_SECONDS: f64 = 0.020;
pub const BAND_LO_HZ: f64 = 5.0;
pub const BAND_HI_HZ: f64 = 95.0;

/// Frequency response of the band-pass mask at `f` Hz (`f >= 0`). The gain is
/// 1 on `[lo, hi]` and rolls off to 0 over [`TRANSITION_HZ`] outside it.
pub fn band_gain(f: f64, lo: f64, hi: f64) -> f64 {
    let edge = |d: f64| 0.5 * (1.0 + (std::f64::consts::PI * d / TRANSITION_HZ).cos());
    if f >= lo && f <= hi {
        1.0
    } else if f < lo && f > lo - TRANSITION_HZ {
        edge(lo - f)
    } else if f > hi && f < hi + TRANSITION_HZ {
        edge(f - hi)
    } else {
        0.0
    }
}

/// Zero-phase band-pass via FFT masking. Linear in `signal`.
pub fn bandpass_filter(signal: &[f64], fs: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(lo > 0.0 && lo < hi && hi < fs / 2.0) {
        return Err(Error::Invalid(format!(
            "invalid band [{lo}, {hi}] Hz for sampling rate {fs} Hz"
        )));
    }
    let n = signal.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fwd.process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *z *= band_gain(bin as f64 * fs / n as f64, lo, hi);
    }
    inv.process(&mut buf);
    Ok(buf.iter().map(|z| z.re / n as f64).collect())
}

/// Number of leading samples dropped at sampling rate `fs`.
pub fn discard_samples(fs: f64) -> usize {
    (DISCARD_SECONDS * fs).round() as usize
}

/// Band-passes each channel of a `(C, S_raw)` recording over 5–95 Hz, drops the
/// first 20 ms and keeps the next `target` samples.
pub fn preprocess(raw: &Tensor, fs: f64, target: usize) -> Result<Tensor> {
    if raw.ndim() != 2 {
        return Err(Error::Invalid(format!(
            "expected (C, S) raw signal, got {:?}",
            raw.shape()
        )));
    }
    let (c, s_raw) = (raw.shape()[0], raw.shape()[1]);
    let skip = discard_samples(fs);
    if s_raw < skip + target {
        return Err(Error::Invalid(format!(
            "raw length {s_raw} shorter than {skip} discarded + {target} kept samples"
        )));
    }
    let mut out = Vec::with_capacity(c * target);
    for ch in 0..c {
        let filtered = bandpass_filter(raw.row(ch), fs, BAND_LO_HZ, BAND_HI_HZ)?;
        out.extend_from_slice(&filtered[skip..skip + target]);
    }
    Ok(Tensor::new([c, target], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_profile() {
        assert_eq!(band_gain(0.0, 5.0, 95.0), 0.0);
        assert_eq!(band_gain(5.0, 5.0, 95.0), 1.0);
        assert!((band_gain(4.0, 5.0, 95.0) - 0.5).abs() < 1e-15);
        assert_eq!(band_gain(3.0, 5.0, 95.0), 0.0);
        assert_eq!(band_gain(97.5, 5.0, 95.0), 0.0);
    }

    #[test]
    fn rejects_invalid_band() {
        let x = vec![0.0; 16];
        assert!(bandpass_filter(&x, 1000.0, 0.0, 95.0).is_err());
        assert!(bandpass_filter(&x, 1000.0, 50.0, 40.0).is_err());
        assert!(bandpass_filter(&x, 1000.0, 5.0, 500.0).is_err());
    }

    #[test]
    fn dc_is_removed() {
        let x = vec![3.0; 500];
        let y = bandpass_filter(&x, 1000.0, 5.0, 95.0).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-3 * 3.0));
    }

    #[test]
    fn window_lengths() {
        let raw = Tensor::from_fn([2, 500], |i| (i as f64 * 0.3).sin());
        assert_eq!(preprocess(&raw, 1000.0, 440).unwrap().shape(), &[2, 440]);
        let exact = Tensor::from_fn([1, 460], |i| (i as f64 * 0.3).sin());
        assert_eq!(preprocess(&exact, 1000.0, 440).unwrap().shape(), &[1, 440]);
        let short = Tensor::from_fn([1, 459], |i| (i as f64 * 0.3).sin());
        assert!(preprocess(&short, 1000.0, 440).is_err());
    }
}
