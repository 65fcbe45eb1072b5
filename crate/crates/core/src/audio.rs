//! Audio I/O: WAV load/save, band-limited resampling and the canonical mono
//! waveform type every other module consumes.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sample rate every neural model in the toolkit assumes.
pub const CANONICAL_RATE: u32 = 22_050;

/// Kaiser window shape parameter of the resampling filter.
pub const KAISER_BETA: f64 = 8.6;
/// Zero crossings of the sinc kernel on each side of its centre.
pub const ZERO_CROSSINGS: usize = 64;
/// Polyphase tables are cached only up to this many phases; beyond it the
/// kernel is evaluated on the fly.
const MAX_CACHED_PHASES: usize = 4096;

/// Mono PCM signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    /// Builds a waveform, rejecting empty or non-finite data.
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |m, s| if s.abs() > m { s.abs() } else { m })
    }

    /// Scales the signal down so that its peak is at most 1. Signals already
    /// inside [-1, 1] are returned unchanged.
    pub fn normalized(mut self) -> Self {
        let peak = self.peak();
        if peak > T::one() {
            for s in &mut self.samples {
                *s /= peak;
            }
        }
        self
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform {
            samples: self.samples.iter().map(|s| U::lit(s.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Fails with [`Error::SampleRateMismatch`] unless the rate equals `rate`.
    pub fn expect_rate(&self, rate: u32) -> Result<()> {
        if self.sample_rate != rate {
            return Err(Error::SampleRateMismatch {
                expected: rate,
                found: self.sample_rate,
            });
        }
        Ok(())
    }
}

/// Reads a 16-bit integer or 32-bit float WAV file with one or two channels.
/// Stereo is mixed down by averaging the channels.
pub fn load_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<Waveform<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = WavReader::new(std::io::BufReader::new(file))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels (only mono and stereo are supported)",
            spec.channels
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {fmt:?} samples (expected 16-bit PCM or 32-bit float)"
            )))
        }
    };
    let channels = spec.channels as usize;
    let samples: Vec<T> = interleaved
        .chunks_exact(channels)
        .map(|frame| T::lit(frame.iter().sum::<f64>() / channels as f64))
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Quantizes one sample to 16-bit PCM: clamp to [-1, 1], scale by 32768,
/// round half away from zero, saturate at the i16 range.
pub fn quantize_pcm16<T: Scalar>(s: T) -> i16 {
    let v = s.as_f64().clamp(-1.0, 1.0) * 32768.0;
    v.round().clamp(-32768.0, 32767.0) as i16
}

/// Writes a 16-bit PCM mono WAV at the waveform's sample rate.
pub fn write_wav<T: Scalar>(w: &Waveform<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = WavWriter::new(std::io::BufWriter::new(file), spec)?;
    for &s in &w.samples {
        writer.write_sample(quantize_pcm16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

/// Zeroth-order modified Bessel function of the first kind, by power series.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Windowed-sinc interpolation kernel for one resampling job.
struct SincKernel {
    cutoff: f64,
    half_width: f64,
    taps_each_side: isize,
    i0_beta: f64,
}

impl SincKernel {
    /// `ratio` is output rate over input rate.
    fn new(ratio: f64) -> Self {
        let cutoff = ratio.min(1.0);
        let half_width = ZERO_CROSSINGS as f64 / cutoff;
        Self {
            cutoff,
            half_width,
            taps_each_side: half_width.ceil() as isize,
            i0_beta: bessel_i0(KAISER_BETA),
        }
    }

    /// Kernel value at offset `t` measured in input samples.
    fn eval(&self, t: f64) -> f64 {
        if t.abs() >= self.half_width {
            return 0.0;
        }
        let x = self.cutoff * t;
        let sinc = if x == 0.0 {
            1.0
        } else {
            let px = std::f64::consts::PI * x;
            px.sin() / px
        };
        let r = t / self.half_width;
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / self.i0_beta;
        self.cutoff * sinc * window
    }

    /// Coefficients for an output sample whose position has fractional part
    /// `frac`, covering input offsets `-taps+1 ..= taps` from the floor.
    fn coefficients(&self, frac: f64) -> Vec<f64> {
        (-self.taps_each_side + 1..=self.taps_each_side)
            .map(|j| self.eval(frac - j as f64))
            .collect()
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn convolve_at<T: Scalar>(x: &[T], base: isize, taps: isize, coeffs: &[f64]) -> T {
    let mut acc = 0.0f64;
    for (idx, &c) in coeffs.iter().enumerate() {
        let k = base - taps + 1 + idx as isize;
        if k >= 0 && (k as usize) < x.len() {
            acc += x[k as usize].as_f64() * c;
        }
    }
    T::lit(acc)
}

/// Band-limited rate conversion with a Kaiser-windowed sinc (β = 8.6, 64 zero
/// crossings). Output length is `round(len · target / source)`.
pub fn resample<T: Scalar>(w: &Waveform<T>, target_rate: u32) -> Result<Waveform<T>> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    let source_rate = w.sample_rate;
    if target_rate == source_rate {
        return Ok(w.clone());
    }
    let out_len = ((w.len() as f64 * target_rate as f64 / source_rate as f64).round() as usize).max(1);
    let g = gcd(source_rate as u64, target_rate as u64);
    let phases = (target_rate as u64 / g) as usize;
    let step_num = source_rate as u64 / g;
    let kernel = SincKernel::new(target_rate as f64 / source_rate as f64);
    let x = &w.samples;
    let samples = if phases <= MAX_CACHED_PHASES {
        // Output n sits at input position n·step_num/phases.
        let table: Vec<Vec<f64>> = (0..phases)
            .map(|p| kernel.coefficients(p as f64 / phases as f64))
            .collect();
        (0..out_len)
            .map(|n| {
                let num = n as u64 * step_num;
                let base = (num / phases as u64) as isize;
                let phase = (num % phases as u64) as usize;
                convolve_at(x, base, kernel.taps_each_side, &table[phase])
            })
            .collect()
    } else {
        resample_positions(x, out_len, source_rate as f64 / target_rate as f64, &kernel)
    };
    Waveform::new(samples, target_rate)
}

fn resample_positions<T: Scalar>(x: &[T], out_len: usize, step: f64, kernel: &SincKernel) -> Vec<T> {
    (0..out_len)
        .map(|n| {
            let pos = n as f64 * step;
            let base = pos.floor();
            let coeffs = kernel.coefficients(pos - base);
            convolve_at(x, base as isize, kernel.taps_each_side, &coeffs)
        })
        .collect()
}

/// Resamples by an arbitrary ratio (output length over input length) and keeps
/// the original sample rate tag. Played back, this is naive speed change: the
/// duration scales by `ratio` and every frequency by `1/ratio`.
pub fn resample_by_ratio<T: Scalar>(w: &Waveform<T>, ratio: f64) -> Result<Waveform<T>> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid resampling ratio {ratio}")));
    }
    let out_len = ((w.len() as f64 * ratio).round() as usize).max(1);
    let kernel = SincKernel::new(ratio);
    let samples = resample_positions(&w.samples, out_len, 1.0 / ratio, &kernel);
    Waveform::new(samples, w.sample_rate)
}

/// Naive speed change by factor `speed` (> 1 is faster): the pitch-shifting
/// control against which the time-scale modification methods are compared.
pub fn naive_speed_change<T: Scalar>(w: &Waveform<T>, speed: f64) -> Result<Waveform<T>> {
    resample_by_ratio(w, 1.0 / speed)
}
