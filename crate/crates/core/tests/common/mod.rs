#![allow(dead_code)]

use tsmnet::audio::Waveform;
use tsmnet::dsp::{hann, RealFft};
use tsmnet::Scalar;

pub const SR: u32 = 22_050;

pub fn sine<T: Scalar>(freqs: &[f64], amp: f64, len: usize) -> Waveform<T> {
    let tau = 2.0 * std::f64::consts::PI;
    let s = (0..len)
        .map(|n| T::lit(freqs.iter().map(|f| amp * (tau * f * n as f64 / SR as f64).sin()).sum()))
        .collect();
    Waveform::new(s, SR).unwrap()
}

/// Strongest component between `lo` and `hi` Hz in the central 8192
/// samples, with parabolic refinement on the log magnitude.
pub fn band_peak<T: Scalar>(x: &[T], lo: f64, hi: f64) -> f64 {
    let n = 8192;
    let take = x.len().min(n);
    let start = (x.len() - take) / 2;
    let w: Vec<f64> = hann(take);
    let mut frame = vec![0.0f64; n];
    for i in 0..take {
        frame[i] = x[start + i].as_f64() * w[i];
    }
    let mag = RealFft::new(n).unwrap().forward(&frame).magnitudes();
    let bin = SR as f64 / n as f64;
    let (a, b) = ((lo / bin).ceil() as usize, ((hi / bin).floor() as usize).min(mag.len() - 2));
    let k = (a.max(1)..=b).max_by(|&i, &j| mag[i].total_cmp(&mag[j])).unwrap();
    let (l, c, r) = (mag[k - 1].ln(), mag[k].ln(), mag[k + 1].ln());
    let den = l - 2.0 * c + r;
    let off = if den < 0.0 { 0.5 * (l - r) / den } else { 0.0 };
    (k as f64 + off) * bin
}

pub fn snr_db(x: &[f32], y: &[f32]) -> f64 {
    let s: f64 = x.iter().map(|&a| (a as f64).powi(2)).sum();
    let e: f64 = x.iter().zip(y).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
    10.0 * (s / e.max(1e-300)).log10()
}
