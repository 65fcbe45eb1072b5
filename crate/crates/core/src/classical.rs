//! Classical time-scale modification: plain overlap-add (OLA), waveform
//! similarity overlap-add (WSOLA) and the phase vocoder (PV-TSM).
//!
//! All three share one framing convention. Frame `i` is centred on input
//! sample `i·analysis_hop` and on output sample `i·synthesis_hop`, so the
//! output is an exact time dilation by `1/speed`; it is truncated to
//! `round(len/speed)` samples.

use serde::{Deserialize, Serialize};

use crate::dsp::{hann, principal_arg, read_padded, ComplexSpectrum, OverlapAdd, RealFft};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameters shared by the classical methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsmParams {
    /// Speed factor; output duration is input duration divided by it.
    pub speed: f64,
    pub frame_len: usize,
    pub synthesis_hop: usize,
    /// Half-width of the WSOLA position search, in samples.
    pub tolerance: usize,
    /// Identity phase locking for the phase vocoder.
    pub phase_lock: bool,
}

pub const MIN_SPEED: f64 = 0.25;
pub const MAX_SPEED: f64 = 4.0;

impl TsmParams {
    /// WSOLA defaults: 1024-sample frames, hop 512, tolerance 512.
    pub fn wsola(speed: f64) -> Self {
        Self {
            speed,
            frame_len: 1024,
            synthesis_hop: 512,
            tolerance: 512,
            phase_lock: false,
        }
    }

    /// OLA uses the WSOLA framing with the search disabled.
    pub fn ola(speed: f64) -> Self {
        Self {
            tolerance: 0,
            ..Self::wsola(speed)
        }
    }

    /// Phase vocoder defaults: 2048-sample frames, hop 512, no phase locking.
    pub fn pv(speed: f64) -> Self {
        Self {
            speed,
            frame_len: 2048,
            synthesis_hop: 512,
            tolerance: 0,
            phase_lock: false,
        }
    }

    /// The phase-locked vocoder used for the PV-TSM benchmark rows.
    pub fn pv_locked(speed: f64) -> Self {
        Self {
            phase_lock: true,
            ..Self::pv(speed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(MIN_SPEED..=MAX_SPEED).contains(&self.speed) {
            return bad(format!("speed {} outside [{MIN_SPEED}, {MAX_SPEED}]", self.speed));
        }
        if self.frame_len < 2 {
            return bad("frame_len must be at least 2".into());
        }
        if self.synthesis_hop == 0 || self.synthesis_hop > self.frame_len / 2 {
            return bad(format!(
                "synthesis_hop {} must be in [1, frame_len/2]",
                self.synthesis_hop
            ));
        }
        if self.tolerance > self.frame_len / 2 {
            return bad(format!("tolerance {} exceeds frame_len/2", self.tolerance));
        }
        Ok(())
    }

    /// `round(synthesis_hop · speed)`, at least 1.
    pub fn analysis_hop(&self) -> usize {
        ((self.synthesis_hop as f64 * self.speed).round() as usize).max(1)
    }
}

/// Output length for an input of `len` samples at `speed`.
pub fn target_len(len: usize, speed: f64) -> usize {
    ((len as f64 / speed).round() as usize).max(1)
}

struct Plan {
    target: usize,
    frames: usize,
    analysis_hop: usize,
    half: isize,
}

fn plan(len: usize, p: &TsmParams) -> Result<Plan> {
    p.validate()?;
    if len < p.frame_len {
        return Err(Error::TooShort {
            needed: p.frame_len,
            got: len,
        });
    }
    let target = target_len(len, p.speed);
    Ok(Plan {
        target,
        frames: target.div_ceil(p.synthesis_hop) + 1,
        analysis_hop: p.analysis_hop(),
        half: (p.frame_len / 2) as isize,
    })
}

fn finish<T: Scalar>(ola: OverlapAdd<T>, plan: &Plan) -> Vec<T> {
    let out = ola.finish();
    let start = plan.half as usize;
    out[start..start + plan.target].to_vec()
}

/// Overlap-add without synchronization. Suffers from phase interference on
/// periodic input whenever `speed ≠ 1`.
pub fn ola_stretch<T: Scalar>(x: &[T], p: &TsmParams) -> Result<Vec<T>> {
    let plan = plan(x.len(), p)?;
    let window: Vec<T> = hann(p.frame_len);
    let mut ola = OverlapAdd::new(window.clone(), p.synthesis_hop);
    let mut buf = vec![T::zero(); p.frame_len];
    for i in 0..plan.frames {
        read_padded(x, (i * plan.analysis_hop) as isize - plan.half, &mut buf);
        apply_window(&mut buf, &window);
        ola.push(&buf);
    }
    Ok(finish(ola, &plan))
}

fn apply_window<T: Scalar>(buf: &mut [T], window: &[T]) {
    for (b, &w) in buf.iter_mut().zip(window) {
        *b *= w;
    }
}

/// Finds the offset in `[-tolerance, tolerance]` whose frame best matches
/// `reference` by normalized cross-correlation. `segment` holds the
/// `frame_len + 2·tolerance` samples around the nominal position. Offsets are
/// visited as 0, −1, +1, −2, … and only a strictly better score replaces the
/// current one, so ties resolve toward zero.
fn best_offset(segment: &[f64], reference: &[f64], tolerance: usize) -> isize {
    let n = reference.len();
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    let mut prefix = Vec::with_capacity(segment.len() + 1);
    prefix.push(0.0f64);
    for &v in segment {
        prefix.push(prefix.last().unwrap() + v * v);
    }
    let score = |delta: isize| -> f64 {
        let start = (delta + tolerance as isize) as usize;
        let cand = &segment[start..start + n];
        let dot: f64 = cand.iter().zip(reference).map(|(a, b)| a * b).sum();
        let energy = (prefix[start + n] - prefix[start]).max(0.0);
        let denom = (energy * ref_energy).sqrt();
        if denom > 1e-12 {
            dot / denom
        } else {
            0.0
        }
    };
    let mut best = (0isize, score(0));
    for d in 1..=tolerance as isize {
        for delta in [-d, d] {
            let s = score(delta);
            if s > best.1 {
                best = (delta, s);
            }
        }
    }
    best.0
}

/// WSOLA: each analysis frame is shifted within `±tolerance` to best continue
/// the natural progression of the previously used frame.
pub fn wsola_stretch<T: Scalar>(x: &[T], p: &TsmParams) -> Result<Vec<T>> {
    let plan = plan(x.len(), p)?;
    let n = p.frame_len;
    let tol = p.tolerance;
    let window: Vec<T> = hann(n);
    let mut ola = OverlapAdd::new(window.clone(), p.synthesis_hop);
    let mut buf = vec![T::zero(); n];
    let mut segment = vec![T::zero(); n + 2 * tol];
    let mut reference = vec![T::zero(); n];
    let to_f64 = |v: &[T]| v.iter().map(|s| s.as_f64()).collect::<Vec<f64>>();

    let mut prev_start = -plan.half;
    for i in 0..plan.frames {
        let nominal = (i * plan.analysis_hop) as isize - plan.half;
        let start = if i == 0 || tol == 0 {
            nominal
        } else {
            read_padded(x, prev_start + p.synthesis_hop as isize, &mut reference);
            read_padded(x, nominal - tol as isize, &mut segment);
            nominal + best_offset(&to_f64(&segment), &to_f64(&reference), tol)
        };
        read_padded(x, start, &mut buf);
        apply_window(&mut buf, &window);
        ola.push(&buf);
        prev_start = start;
    }
    Ok(finish(ola, &plan))
}

/// Indices of local magnitude maxima (strictly above the two neighbours on
/// each side).
fn spectral_peaks<T: Scalar>(mag: &[T]) -> Vec<usize> {
    let n = mag.len();
    (0..n)
        .filter(|&k| {
            let m = mag[k];
            m > T::zero()
                && (1..=2).all(|d| {
                    (k < d || m > mag[k - d]) && (k + d >= n || m > mag[k + d])
                })
        })
        .collect()
}

/// For every bin, the peak whose region of influence contains it: the nearest
/// peak, ties going to the lower one.
fn nearest_peak(peaks: &[usize], bins: usize) -> Vec<usize> {
    let mut owner = vec![0; bins];
    if peaks.is_empty() {
        return (0..bins).collect();
    }
    let mut j = 0;
    for (k, o) in owner.iter_mut().enumerate() {
        while j + 1 < peaks.len() && peaks[j + 1].abs_diff(k) < peaks[j].abs_diff(k) {
            j += 1;
        }
        *o = peaks[j];
    }
    owner
}

/// Phase-vocoder TSM. Instantaneous frequencies come from the principal
/// value of each bin's phase increment over the analysis hop; synthesis phases
/// advance by `synthesis_hop` times that frequency. With `phase_lock`, bins
/// around each spectral peak keep their analysis phase offset to the peak.
pub fn pv_stretch<T: Scalar>(x: &[T], p: &TsmParams) -> Result<Vec<T>> {
    let plan = plan(x.len(), p)?;
    let n = p.frame_len;
    let mut fft = RealFft::new(n)?;
    let window: Vec<T> = hann(n);
    let bins = n / 2 + 1;
    let ha = T::from_usize_lossy(plan.analysis_hop);
    let hs = T::from_usize_lossy(p.synthesis_hop);
    let omega: Vec<T> = (0..bins)
        .map(|k| T::lit(2.0 * std::f64::consts::PI * k as f64 / n as f64))
        .collect();

    let mut ola = OverlapAdd::new(window.clone(), p.synthesis_hop);
    let mut buf = vec![T::zero(); n];
    let mut prev_phase = vec![T::zero(); bins];
    let mut synth_phase = vec![T::zero(); bins];
    for i in 0..plan.frames {
        read_padded(x, (i * plan.analysis_hop) as isize - plan.half, &mut buf);
        apply_window(&mut buf, &window);
        let spec = fft.forward(&buf);
        let mag = spec.magnitudes();
        let phase = spec.phases();
        if i == 0 {
            synth_phase.copy_from_slice(&phase);
        } else {
            for k in 0..bins {
                let dev = principal_arg(phase[k] - prev_phase[k] - omega[k] * ha);
                let inst = omega[k] + dev / ha;
                synth_phase[k] = principal_arg(synth_phase[k] + hs * inst);
            }
            if p.phase_lock {
                let peaks = spectral_peaks(&mag);
                let owner = nearest_peak(&peaks, bins);
                let locked: Vec<T> = (0..bins)
                    .map(|k| {
                        let pk = owner[k];
                        principal_arg(synth_phase[pk] + phase[k] - phase[pk])
                    })
                    .collect();
                synth_phase = locked;
            }
        }
        prev_phase = phase;
        let out = ComplexSpectrum {
            bins: mag
                .iter()
                .zip(&synth_phase)
                .map(|(&m, &ph)| rustfft::num_complex::Complex::from_polar(m, ph))
                .collect(),
        };
        ola.push(&fft.inverse(&out)?);
    }
    Ok(finish(ola, &plan))
}
