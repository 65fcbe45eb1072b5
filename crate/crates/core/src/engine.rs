//! Neural time-scale modification: encode, resize the Neuralgram along time,
//! decode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::{naive_speed_change, Waveform};
use crate::classical::{ola_stretch, pv_stretch, target_len, wsola_stretch, TsmParams, MAX_SPEED, MIN_SPEED};
use crate::error::{Error, Result};
use crate::model::{Autoencoder, Neuralgram};
use crate::scalar::Scalar;

/// How long inputs are split before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPolicy {
    /// Samples per chunk.
    pub chunk_len: usize,
    /// Latent steps shared by neighbouring chunks.
    pub overlap: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            chunk_len: 220_500,
            overlap: 4,
        }
    }
}

impl ChunkPolicy {
    /// Latent steps per chunk for a model with compression ratio `cr`.
    pub fn chunk_frames(&self, cr: usize) -> Result<usize> {
        let frames = self.chunk_len / cr;
        if frames <= 2 * self.overlap || frames < 2 {
            return Err(Error::InvalidArgument(format!(
                "chunk of {} samples holds {frames} latent steps at CR={cr}, need more than {}",
                self.chunk_len,
                (2 * self.overlap).max(1)
            )));
        }
        Ok(frames)
    }
}

fn check_speed(r: f64) -> Result<()> {
    if !(r.is_finite() && (MIN_SPEED..=MAX_SPEED).contains(&r)) {
        return Err(Error::InvalidArgument(format!(
            "speed {r} outside [{MIN_SPEED}, {MAX_SPEED}]"
        )));
    }
    Ok(())
}

/// Number of latent steps after scaling `frames` by speed `r`, rounding
/// halves up.
pub fn scaled_frames(frames: usize, r: f64) -> usize {
    ((frames as f64 / r + 0.5).floor() as usize).max(2)
}

#[inline]
fn catmull_rom<T: Scalar>(p0: T, p1: T, p2: T, p3: T, t: T) -> T {
    let half = T::lit(0.5);
    let t2 = t * t;
    let t3 = t2 * t;
    let a = p1 * T::lit(2.0);
    let b = p2 - p0;
    let c = p0 * T::lit(2.0) - p1 * T::lit(5.0) + p2 * T::lit(4.0) - p3;
    let d = (p1 - p2) * T::lit(3.0) + p3 - p0;
    half * (a + b * t + c * t2 + d * t3)
}

/// Resamples one channel to `out_len` points so that the endpoints map onto
/// each other. Virtual points beyond the ends continue the end segments
/// linearly, which keeps affine data affine.
pub fn resize_channel<T: Scalar>(x: &[T], out_len: usize) -> Vec<T> {
    let n = x.len();
    if n == 1 || out_len == 1 {
        return vec![x[0]; out_len];
    }
    let at = |i: isize| -> T {
        if i < 0 {
            x[0] * T::lit(2.0) - x[1]
        } else if i as usize >= n {
            x[n - 1] * T::lit(2.0) - x[n - 2]
        } else {
            x[i as usize]
        }
    };
    let step = (n - 1) as f64 / (out_len - 1) as f64;
    (0..out_len)
        .map(|j| {
            if j == out_len - 1 {
                return x[n - 1];
            }
            let pos = j as f64 * step;
            let i = pos.floor() as isize;
            let t = T::lit(pos - i as f64);
            catmull_rom(at(i - 1), at(i), at(i + 1), at(i + 2), t)
        })
        .collect()
}

/// Resizes every channel of `g` to `frames` steps.
pub fn resize_neuralgram<T: Scalar>(g: &Neuralgram<T>, frames: usize) -> Result<Neuralgram<T>> {
    if frames == 0 {
        return Err(Error::InvalidArgument("cannot resize a Neuralgram to zero steps".into()));
    }
    let mut data = Vec::with_capacity(g.channels() * frames);
    for c in 0..g.channels() {
        data.extend(resize_channel(g.channel(c), frames));
    }
    Neuralgram::new(g.channels(), data, g.compression_ratio())
}

/// Per-channel cubic rescaling of the time axis to `max(2, round(T / r))`
/// steps.
pub fn scale_neuralgram<T: Scalar>(g: &Neuralgram<T>, r: f64) -> Result<Neuralgram<T>> {
    check_speed(r)?;
    if g.frames() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: g.frames(),
        });
    }
    resize_neuralgram(g, scaled_frames(g.frames(), r))
}

/// Latent steps used when stretching `len` samples by `r`: the rounded
/// scaled length, raised if needed so the decoded audio covers
/// `round(len / r)` samples.
pub fn stretched_frames(len: usize, cr: usize, r: f64) -> usize {
    let frames = len.div_ceil(cr);
    scaled_frames(frames, r).max(target_len(len, r).div_ceil(cr))
}

fn crossfade_into<T: Scalar>(acc: &mut Vec<T>, next: &[T], overlap: usize) {
    let keep = acc.len() - overlap;
    for i in 0..overlap {
        let w = T::lit((i + 1) as f64 / (overlap + 1) as f64);
        acc[keep + i] = acc[keep + i] * (T::one() - w) + next[i] * w;
    }
    acc.extend_from_slice(&next[overlap..]);
}

/// Chunk start and end (in latent steps) covering `total` steps.
fn chunk_spans(total: usize, frames: usize, overlap: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + frames).min(total);
        spans.push((start, end));
        if end == total {
            return spans;
        }
        start = end - overlap;
    }
}

fn encode_chunked<T: Scalar>(model: &Autoencoder<T>, x: &Waveform<T>, policy: &ChunkPolicy) -> Result<Neuralgram<T>> {
    let cr = model.compression_ratio();
    let frames = policy.chunk_frames(cr)?;
    let total = x.len().div_ceil(cr);
    let mut channels: Option<Vec<Vec<T>>> = None;
    for (a, b) in chunk_spans(total, frames, policy.overlap) {
        let end = (b * cr).min(x.len());
        let piece = Waveform::new(x.samples()[a * cr..end].to_vec(), x.sample_rate())?;
        let g = model.encode(&piece)?;
        match channels.as_mut() {
            None => channels = Some((0..g.channels()).map(|c| g.channel(c).to_vec()).collect()),
            Some(chs) => {
                for (c, ch) in chs.iter_mut().enumerate() {
                    crossfade_into(ch, g.channel(c), policy.overlap);
                }
            }
        }
    }
    let chs = channels.expect("at least one chunk");
    Neuralgram::new(chs.len(), chs.concat(), cr)
}

fn decode_chunked<T: Scalar>(model: &Autoencoder<T>, g: &Neuralgram<T>, policy: &ChunkPolicy) -> Result<Vec<T>> {
    let cr = model.compression_ratio();
    let frames = policy.chunk_frames(cr)?;
    let mut out: Vec<T> = Vec::with_capacity(g.frames() * cr);
    for (i, (a, b)) in chunk_spans(g.frames(), frames, policy.overlap).into_iter().enumerate() {
        let mut data = Vec::with_capacity(g.channels() * (b - a));
        for c in 0..g.channels() {
            data.extend_from_slice(&g.channel(c)[a..b]);
        }
        let y = model.decode(&Neuralgram::new(g.channels(), data, cr)?)?;
        if i == 0 {
            out.extend_from_slice(y.samples());
        } else {
            crossfade_into(&mut out, y.samples(), policy.overlap * cr);
        }
    }
    Ok(out)
}

/// Neural time-scale modification of `x` by speed `r` (> 1 is faster).
/// The output holds exactly `round(len / r)` samples.
pub fn stretch<T: Scalar>(x: &Waveform<T>, r: f64, model: &Autoencoder<T>, policy: &ChunkPolicy) -> Result<Waveform<T>> {
    check_speed(r)?;
    x.expect_rate(model.config().sample_rate)?;
    let cr = model.compression_ratio();
    if x.len() < cr {
        return Err(Error::TooShort {
            needed: cr,
            got: x.len(),
        });
    }
    let target = target_len(x.len(), r);
    let frames = stretched_frames(x.len(), cr, r);
    let mut y = if x.len() <= policy.chunk_len {
        let g = resize_neuralgram(&model.encode(x)?, frames)?;
        model.decode(&g)?.into_samples()
    } else {
        let g = resize_neuralgram(&encode_chunked(model, x, policy)?, frames)?;
        decode_chunked(model, &g, policy)?
    };
    y.truncate(target);
    Waveform::new(y, x.sample_rate())
}

/// The evaluation speed grid: 0.50 to 0.95 in steps of 0.05 and 1.1 to 2.0
/// in steps of 0.1.
pub fn speed_grid() -> Vec<f64> {
    let slow = (10..20).map(|i| i as f64 / 20.0);
    let fast = (11..=20).map(|i| i as f64 / 10.0);
    slow.chain(fast).collect()
}

/// A time-scale modification method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Neural,
    Wsola,
    Pv,
    Ola,
    /// Naive resampling, which shifts pitch by the speed factor.
    Resample,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Neural, Method::Wsola, Method::Pv, Method::Ola, Method::Resample];

    pub fn name(self) -> &'static str {
        match self {
            Method::Neural => "neural",
            Method::Wsola => "wsola",
            Method::Pv => "pv",
            Method::Ola => "ola",
            Method::Resample => "resample",
        }
    }

    /// Runs the method. `model` is required for [`Method::Neural`] and
    /// ignored otherwise.
    pub fn apply<T: Scalar>(
        self,
        x: &Waveform<T>,
        r: f64,
        model: Option<&Autoencoder<T>>,
        policy: &ChunkPolicy,
    ) -> Result<Waveform<T>> {
        let classical = |f: fn(&[T], &TsmParams) -> Result<Vec<T>>, p: TsmParams| {
            Waveform::new(f(x.samples(), &p)?, x.sample_rate())
        };
        match self {
            Method::Neural => {
                let model = model.ok_or_else(|| Error::InvalidArgument("neural method needs a model".into()))?;
                stretch(x, r, model, policy)
            }
            Method::Wsola => classical(wsola_stretch, TsmParams::wsola(r)),
            Method::Pv => classical(pv_stretch, TsmParams::pv_locked(r)),
            Method::Ola => classical(ola_stretch, TsmParams::ola(r)),
            Method::Resample => {
                check_speed(r)?;
                naive_speed_change(x, r)
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}
