//! Windowing, framing, overlap-add and STFT primitives.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied to the overlap-add window envelope before dividing by it.
pub const ENVELOPE_FLOOR: f64 = 1e-8;

/// Periodic Hann window, `w[n] = 0.5(1 − cos(2πn/N))`.
pub fn hann<T: Scalar>(frame_len: usize) -> Vec<T> {
    let n = frame_len as f64;
    (0..frame_len)
        .map(|i| T::lit(0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n).cos())))
        .collect()
}

/// Regular framing of a signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGrid {
    pub frame_len: usize,
    pub hop: usize,
    pub count: usize,
}

impl FrameGrid {
    /// Grid covering a signal of `len` samples; the last frame may run past
    /// the end and is zero-padded.
    pub fn for_signal(len: usize, frame_len: usize, hop: usize) -> Result<Self> {
        if frame_len == 0 || hop == 0 || hop > frame_len {
            return Err(Error::InvalidArgument(format!(
                "invalid frame grid: frame_len {frame_len}, hop {hop}"
            )));
        }
        if len < frame_len {
            return Err(Error::TooShort {
                needed: frame_len,
                got: len,
            });
        }
        Ok(Self {
            frame_len,
            hop,
            count: (len - frame_len).div_ceil(hop) + 1,
        })
    }

    /// Number of samples produced by overlap-adding `count` frames.
    pub fn span(&self) -> usize {
        (self.count - 1) * self.hop + self.frame_len
    }
}

/// Copies `frame_len` samples starting at `start` (which may be negative or
/// run past the end); out-of-range samples read as zero.
pub fn read_padded<T: Scalar>(signal: &[T], start: isize, out: &mut [T]) {
    for (i, o) in out.iter_mut().enumerate() {
        let j = start + i as isize;
        *o = if j >= 0 && (j as usize) < signal.len() {
            signal[j as usize]
        } else {
            T::zero()
        };
    }
}

/// Splits a signal into frames `signal[i·hop .. i·hop + frame_len]`.
pub fn frame<T: Scalar>(signal: &[T], grid: FrameGrid) -> Result<Vec<Vec<T>>> {
    if signal.len() < grid.frame_len {
        return Err(Error::TooShort {
            needed: grid.frame_len,
            got: signal.len(),
        });
    }
    Ok((0..grid.count)
        .map(|i| {
            let mut f = vec![T::zero(); grid.frame_len];
            read_padded(signal, (i * grid.hop) as isize, &mut f);
            f
        })
        .collect())
}

/// Accumulates windowed frames and the squared-window envelope.
///
/// Frames are assumed to already carry the analysis window (the same window
/// as `window`), so the result is `Σ w·frame / max(Σ w², floor)`.
pub struct OverlapAdd<T> {
    window: Vec<T>,
    hop: usize,
    acc: Vec<T>,
    envelope: Vec<T>,
    frames: usize,
}

impl<T: Scalar> OverlapAdd<T> {
    pub fn new(window: Vec<T>, hop: usize) -> Self {
        Self {
            window,
            hop,
            acc: Vec::new(),
            envelope: Vec::new(),
            frames: 0,
        }
    }

    /// Adds a frame at the next hop position.
    pub fn push(&mut self, frame: &[T]) {
        let offset = self.frames * self.hop;
        self.add_at(offset, frame);
        self.frames += 1;
    }

    fn add_at(&mut self, offset: usize, frame: &[T]) {
        let end = offset + frame.len();
        if self.acc.len() < end {
            self.acc.resize(end, T::zero());
            self.envelope.resize(end, T::zero());
        }
        for (i, (&s, &w)) in frame.iter().zip(&self.window).enumerate() {
            self.acc[offset + i] += s * w;
            self.envelope[offset + i] += w * w;
        }
    }

    pub fn finish(self) -> Vec<T> {
        let floor = T::lit(ENVELOPE_FLOOR);
        self.acc
            .into_iter()
            .zip(self.envelope)
            .map(|(a, e)| a / if e > floor { e } else { floor })
            .collect()
    }
}

/// Overlap-adds frames at `hop` spacing with envelope normalization.
pub fn overlap_add<T: Scalar>(frames: &[Vec<T>], hop: usize, window: &[T]) -> Result<Vec<T>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no frames to overlap-add".into()));
    }
    if hop == 0 {
        return Err(Error::InvalidArgument("hop must be positive".into()));
    }
    let len = frames[0].len();
    if len != window.len() || frames.iter().any(|f| f.len() != len) {
        return Err(Error::ShapeMismatch(
            "frames and window must all have the same length".into(),
        ));
    }
    let mut ola = OverlapAdd::new(window.to_vec(), hop);
    for f in frames {
        ola.push(f);
    }
    Ok(ola.finish())
}

/// Positive-frequency half of a real signal's DFT.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum<T> {
    pub bins: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexSpectrum<T> {
    pub fn magnitudes(&self) -> Vec<T> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    pub fn phases(&self) -> Vec<T> {
        self.bins.iter().map(|c| c.arg()).collect()
    }

    /// Frame length this spectrum was computed from.
    pub fn frame_len(&self) -> usize {
        (self.bins.len() - 1) * 2
    }
}

/// Forward/inverse real FFT of a fixed power-of-two length.
pub struct RealFft<T: Scalar> {
    len: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    buf: Vec<Complex<T>>,
}

impl<T: Scalar> RealFft<T> {
    pub fn new(len: usize) -> Result<Self> {
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "FFT length {len} is not a power of two"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            buf: vec![Complex::new(T::zero(), T::zero()); len],
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward(&mut self, frame: &[T]) -> ComplexSpectrum<T> {
        assert_eq!(frame.len(), self.len);
        for (b, &s) in self.buf.iter_mut().zip(frame) {
            *b = Complex::new(s, T::zero());
        }
        self.forward.process(&mut self.buf);
        ComplexSpectrum {
            bins: self.buf[..self.len / 2 + 1].to_vec(),
        }
    }

    /// Inverse transform, scaled by `1/N`, of a Hermitian-completed spectrum.
    pub fn inverse(&mut self, spectrum: &ComplexSpectrum<T>) -> Result<Vec<T>> {
        let half = self.len / 2;
        if spectrum.bins.len() != half + 1 {
            return Err(Error::ShapeMismatch(format!(
                "spectrum has {} bins, expected {}",
                spectrum.bins.len(),
                half + 1
            )));
        }
        for k in 0..=half {
            self.buf[k] = spectrum.bins[k];
        }
        for k in 1..half {
            self.buf[self.len - k] = spectrum.bins[k].conj();
        }
        self.inverse.process(&mut self.buf);
        let scale = T::one() / T::from_usize_lossy(self.len);
        Ok(self.buf.iter().map(|c| c.re * scale).collect())
    }
}

/// Short-time Fourier transform with frames at `i·hop` (tail zero-padded).
pub fn stft<T: Scalar>(
    signal: &[T],
    frame_len: usize,
    hop: usize,
    window: &[T],
) -> Result<Vec<ComplexSpectrum<T>>> {
    if window.len() != frame_len {
        return Err(Error::ShapeMismatch("window length differs from frame length".into()));
    }
    let grid = FrameGrid::for_signal(signal.len(), frame_len, hop)?;
    let mut fft = RealFft::new(frame_len)?;
    let mut buf = vec![T::zero(); frame_len];
    Ok((0..grid.count)
        .map(|i| {
            read_padded(signal, (i * hop) as isize, &mut buf);
            for (b, &w) in buf.iter_mut().zip(window) {
                *b *= w;
            }
            fft.forward(&buf)
        })
        .collect())
}

/// Inverse STFT by windowed overlap-add with envelope normalization.
pub fn istft<T: Scalar>(
    spectra: &[ComplexSpectrum<T>],
    frame_len: usize,
    hop: usize,
    window: &[T],
) -> Result<Vec<T>> {
    if spectra.is_empty() {
        return Err(Error::InvalidArgument("no spectra to invert".into()));
    }
    if window.len() != frame_len || hop == 0 {
        return Err(Error::ShapeMismatch("window length differs from frame length".into()));
    }
    let mut fft = RealFft::new(frame_len)?;
    let mut ola = OverlapAdd::new(window.to_vec(), hop);
    for s in spectra {
        ola.push(&fft.inverse(s)?);
    }
    Ok(ola.finish())
}

/// Wraps a phase into the principal interval (−π, π].
pub fn principal_arg<T: Scalar>(phase: T) -> T {
    let two_pi = T::PI() + T::PI();
    let mut p = phase - two_pi * ((phase + T::PI()) / two_pi).floor();
    // floor maps exactly −π to −π; fold it onto +π
    if p <= -T::PI() {
        p += two_pi;
    }
    p
}
