//! Test-only signal generators and oracles. Kept independent of the
//! estimators under test: peak frequencies are found by direct evaluation of
//! the windowed DTFT rather than through the crate's FFT helpers.

use crate::scalar::Scalar;

pub fn sine<T: Scalar>(freq: f64, sr: u32, len: usize, amp: f64) -> Vec<T> {
    (0..len)
        .map(|n| T::lit(amp * (2.0 * std::f64::consts::PI * freq * n as f64 / sr as f64).sin()))
        .collect()
}

fn dtft_mag(x: &[f64], w: &[f64], freq: f64, sr: f64) -> f64 {
    let omega = 2.0 * std::f64::consts::PI * freq / sr;
    let (c, s) = (omega.cos(), -omega.sin());
    // phasor recurrence, renormalized periodically
    let (mut pr, mut pi) = (1.0f64, 0.0f64);
    let (mut re, mut im) = (0.0, 0.0);
    for (n, (&v, &wn)) in x.iter().zip(w).enumerate() {
        re += v * wn * pr;
        im += v * wn * pi;
        let nr = pr * c - pi * s;
        pi = pr * s + pi * c;
        pr = nr;
        if n % 1024 == 1023 {
            let ph = omega * (n + 1) as f64;
            pr = ph.cos();
            pi = -ph.sin();
        }
    }
    (re * re + im * im).sqrt()
}

/// Frequency of the strongest spectral component, found by a coarse DTFT
/// scan followed by golden-section refinement. Uses at most the central
/// 8192 samples.
pub fn peak_frequency_oracle<T: Scalar>(x: &[T], sr: f64) -> f64 {
    peak_frequency_in_band(x, sr, 0.0, sr / 2.0)
}

/// [`peak_frequency_oracle`] restricted to `[lo, hi)` Hz.
pub fn peak_frequency_in_band<T: Scalar>(x: &[T], sr: f64, lo: f64, hi: f64) -> f64 {
    let take = x.len().min(8192);
    let start = (x.len() - take) / 2;
    let seg: Vec<f64> = x[start..start + take].iter().map(|v| v.as_f64()).collect();
    let n = seg.len();
    let w: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let step = sr / n as f64;
    let mut best = (0.0, f64::MIN);
    let mut f = (lo / step).floor().max(1.0) * step;
    while f < hi {
        let m = dtft_mag(&seg, &w, f, sr);
        if m > best.1 {
            best = (f, m);
        }
        f += step;
    }
    let (mut lo, mut hi) = (best.0 - step, best.0 + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if dtft_mag(&seg, &w, a, sr) > dtft_mag(&seg, &w, b, sr) {
            hi = b;
        } else {
            lo = a;
        }
    }
    (lo + hi) / 2.0
}

pub fn rms<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().min(b.len());
    (a[..n]
        .iter()
        .zip(&b[..n])
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt()
}

/// Ratio of the energy of the best-fitting sinusoid at `freq` (free amplitude
/// and phase) to the energy of the residual, in dB.
pub fn tone_snr_db<T: Scalar>(x: &[T], freq: f64, sr: f64) -> f64 {
    let omega = 2.0 * std::f64::consts::PI * freq / sr;
    let (mut ss, mut cc, mut sc, mut xs, mut xc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (n, v) in x.iter().enumerate() {
        let v = v.as_f64();
        let (s, c) = (omega * n as f64).sin_cos();
        ss += s * s;
        cc += c * c;
        sc += s * c;
        xs += v * s;
        xc += v * c;
    }
    let det = ss * cc - sc * sc;
    let a = (xs * cc - xc * sc) / det;
    let b = (xc * ss - xs * sc) / det;
    let (mut sig, mut err) = (0.0, 0.0);
    for (n, v) in x.iter().enumerate() {
        let (s, c) = (omega * n as f64).sin_cos();
        let fit = a * s + b * c;
        sig += fit * fit;
        err += (v.as_f64() - fit).powi(2);
    }
    10.0 * (sig / err.max(1e-300)).log10()
}
