//! The Neuralgram autoencoder: a strided convolutional encoder that
//! compresses audio in time by the product of its strides, and a mirrored
//! transposed-convolution decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, CANONICAL_RATE};
use crate::autograd::{Eager, Ops};
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Padding, ParamStore, WnConv1d, WnConvTranspose1d};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compression ratios with named stride presets.
pub const SUPPORTED_RATIOS: [usize; 3] = [256, 512, 1024];

const EDGE_KERNEL: usize = 7;
const RESIDUAL_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Upsampling factors in decoder order; the encoder uses them reversed.
    pub stride_schedule: Vec<usize>,
    pub base_channels: usize,
    pub max_channels: usize,
    pub ngram_channels: usize,
    pub leaky_slope: f64,
    pub residual_dilations: Vec<usize>,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stride_schedule: vec![8, 8, 4, 2, 2],
            base_channels: 32,
            max_channels: 512,
            ngram_channels: 64,
            leaky_slope: 0.2,
            residual_dilations: vec![1, 3, 9],
            sample_rate: CANONICAL_RATE,
        }
    }
}

impl ModelConfig {
    /// Default channel plan with the stride schedule for a supported ratio.
    /// The presets are nested: each is the next smaller one plus a final
    /// 2× stage.
    pub fn preset(compression_ratio: usize) -> Result<Self> {
        let stride_schedule = match compression_ratio {
            256 => vec![8, 8, 4],
            512 => vec![8, 8, 4, 2],
            1024 => vec![8, 8, 4, 2, 2],
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unsupported compression ratio {other}; expected one of {SUPPORTED_RATIOS:?}"
                )))
            }
        };
        Ok(Self {
            stride_schedule,
            ..Self::default()
        })
    }

    /// Same strides, different widths.
    pub fn with_channels(mut self, base: usize, max: usize, ngram: usize) -> Self {
        self.base_channels = base;
        self.max_channels = max;
        self.ngram_channels = ngram;
        self
    }

    pub fn compression_ratio(&self) -> usize {
        self.stride_schedule.iter().product()
    }

    pub fn is_preset_ratio(&self) -> bool {
        SUPPORTED_RATIOS.contains(&self.compression_ratio())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.stride_schedule.is_empty() || self.stride_schedule.contains(&0) {
            return bad("stride schedule must be a non-empty list of positive integers");
        }
        if self.base_channels == 0 || self.max_channels == 0 || self.ngram_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.residual_dilations.contains(&0) {
            return bad("residual dilations must be positive");
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("leaky slope must be finite and non-negative");
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive");
        }
        Ok(())
    }

    /// Channel width after `i` encoder stages.
    pub fn channels_at(&self, i: usize) -> usize {
        let base = self.base_channels.saturating_mul(1usize.checked_shl(i as u32).unwrap_or(usize::MAX));
        base.min(self.max_channels)
    }

    fn depth(&self) -> usize {
        self.stride_schedule.len()
    }

    /// Latent length for an input of `len` samples.
    pub fn latent_len(&self, len: usize) -> usize {
        len.div_ceil(self.compression_ratio())
    }
}

/// Temporally compressed latent: `channels × frames`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Neuralgram<T> {
    channels: usize,
    frames: usize,
    data: Vec<T>,
    compression_ratio: usize,
}

impl<T: Scalar> Neuralgram<T> {
    pub fn new(channels: usize, data: Vec<T>, compression_ratio: usize) -> Result<Self> {
        if channels == 0 || data.is_empty() || !data.len().is_multiple_of(channels) {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot form a {channels}-channel Neuralgram",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("Neuralgram values must be finite".into()));
        }
        Ok(Self {
            channels,
            frames: data.len() / channels,
            data,
            compression_ratio,
        })
    }

    fn from_tensor(t: Tensor<T>, compression_ratio: usize) -> Result<Self> {
        let (b, c, _) = t.dims3();
        debug_assert_eq!(b, 1);
        Self::new(c, t.into_data(), compression_ratio)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn compression_ratio(&self) -> usize {
        self.compression_ratio
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.data[c * self.frames..(c + 1) * self.frames]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, self.channels, self.frames], self.data.clone()).expect("consistent shape")
    }
}

fn residual_layers(prefix: &str, ch: usize, dilations: &[usize]) -> Vec<(WnConv1d, WnConv1d)> {
    dilations
        .iter()
        .enumerate()
        .map(|(j, &d)| {
            (
                WnConv1d::same(format!("{prefix}.{j}.dil"), ch, ch, RESIDUAL_KERNEL, d),
                WnConv1d::same(format!("{prefix}.{j}.proj"), ch, ch, 1, 1),
            )
        })
        .collect()
}

fn residual_forward<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    layers: &[(WnConv1d, WnConv1d)],
    slope: T,
    mut x: O::Var,
) -> O::Var {
    for (dil, proj) in layers {
        let h = ops.leaky_relu(&x, slope);
        let h = dil.forward(ops, &h);
        let h = ops.leaky_relu(&h, slope);
        let h = proj.forward(ops, &h);
        x = ops.add(&x, &h);
    }
    x
}

struct Stage<L> {
    resample: L,
    residual: Vec<(WnConv1d, WnConv1d)>,
}

/// Layer geometry derived from a [`ModelConfig`].
struct Layout {
    enc_in: WnConv1d,
    enc_stages: Vec<Stage<WnConv1d>>,
    enc_out: WnConv1d,
    dec_in: WnConv1d,
    dec_stages: Vec<Stage<WnConvTranspose1d>>,
    dec_out: WnConv1d,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let n = cfg.depth();
        let enc_in = WnConv1d::same("enc.in".into(), 1, cfg.channels_at(0), EDGE_KERNEL, 1);
        let enc_stages = cfg
            .stride_schedule
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &s)| {
                let (cin, cout) = (cfg.channels_at(i), cfg.channels_at(i + 1));
                Stage {
                    resample: WnConv1d {
                        name: format!("enc.down{i}"),
                        in_channels: cin,
                        out_channels: cout,
                        kernel: 2 * s,
                        stride: s,
                        dilation: 1,
                        groups: 1,
                        padding: Padding::Zero(s / 2, s - s / 2),
                    },
                    residual: residual_layers(&format!("enc.res{i}"), cout, &cfg.residual_dilations),
                }
            })
            .collect();
        let enc_out = WnConv1d::same("enc.out".into(), cfg.channels_at(n), cfg.ngram_channels, EDGE_KERNEL, 1);
        let dec_in = WnConv1d::same("dec.in".into(), cfg.ngram_channels, cfg.channels_at(n), EDGE_KERNEL, 1);
        let dec_stages = cfg
            .stride_schedule
            .iter()
            .enumerate()
            .map(|(j, &s)| {
                let (cin, cout) = (cfg.channels_at(n - j), cfg.channels_at(n - j - 1));
                Stage {
                    resample: WnConvTranspose1d {
                        name: format!("dec.up{j}"),
                        in_channels: cin,
                        out_channels: cout,
                        kernel: 2 * s,
                        stride: s,
                        crop_left: s / 2,
                        crop_right: s - s / 2,
                    },
                    residual: residual_layers(&format!("dec.res{j}"), cout, &cfg.residual_dilations),
                }
            })
            .collect();
        let dec_out = WnConv1d::same("dec.out".into(), cfg.channels_at(0), 1, EDGE_KERNEL, 1);
        Self {
            enc_in,
            enc_stages,
            enc_out,
            dec_in,
            dec_stages,
            dec_out,
        }
    }

    fn convs(&self) -> Vec<&WnConv1d> {
        let mut out = vec![&self.enc_in];
        for st in &self.enc_stages {
            out.push(&st.resample);
            out.extend(st.residual.iter().flat_map(|(a, b)| [a, b]));
        }
        out.push(&self.enc_out);
        out.push(&self.dec_in);
        for st in &self.dec_stages {
            out.extend(st.residual.iter().flat_map(|(a, b)| [a, b]));
        }
        out.push(&self.dec_out);
        out
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<_> = self.convs().into_iter().flat_map(|c| c.param_shapes()).collect();
        out.extend(self.dec_stages.iter().flat_map(|st| st.resample.param_shapes()));
        out.sort();
        out
    }
}

/// Encoder and decoder parameters with their configuration.
pub struct Autoencoder<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Clone for Autoencoder<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: Layout::new(&self.config),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Autoencoder<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Autoencoder")
            .field("config", &self.config)
            .field("parameters", &self.params.numel())
            .finish()
    }
}

impl<T: Scalar> Autoencoder<T> {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: rand::Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = ParamStore::new();
        for c in layout.convs() {
            c.init(&mut params, rng);
        }
        for st in &layout.dec_stages {
            st.resample.init(&mut params, rng);
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        check_shapes(&layout.param_shapes(), &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Expected `(name, shape)` of every parameter, sorted by name.
    pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        Layout::new(config).param_shapes()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn compression_ratio(&self) -> usize {
        self.config.compression_ratio()
    }

    fn slope(&self) -> T {
        T::lit(self.config.leaky_slope)
    }

    /// Encoder on a `[B, 1, L]` value with `L` a multiple of the ratio.
    pub fn encode_ops<O: Ops<T>>(&self, ops: &mut O, x: &O::Var) -> O::Var {
        let slope = self.slope();
        let mut h = self.layout.enc_in.forward(ops, x);
        for st in &self.layout.enc_stages {
            let a = ops.leaky_relu(&h, slope);
            let a = st.resample.forward(ops, &a);
            h = residual_forward(ops, &st.residual, slope, a);
        }
        let a = ops.leaky_relu(&h, slope);
        let a = self.layout.enc_out.forward(ops, &a);
        ops.tanh(&a)
    }

    /// Decoder on a `[B, ngram_channels, T]` value; output `[B, 1, T·CR]`.
    pub fn decode_ops<O: Ops<T>>(&self, ops: &mut O, g: &O::Var) -> O::Var {
        let slope = self.slope();
        let mut h = self.layout.dec_in.forward(ops, g);
        for st in &self.layout.dec_stages {
            let a = ops.leaky_relu(&h, slope);
            let a = st.resample.forward(ops, &a);
            h = residual_forward(ops, &st.residual, slope, a);
        }
        let a = ops.leaky_relu(&h, slope);
        let a = self.layout.dec_out.forward(ops, &a);
        ops.tanh(&a)
    }

    /// Right-pads by reflection to a multiple of the compression ratio.
    pub fn pad_input(&self, samples: &[T]) -> Tensor<T> {
        let len = samples.len();
        let padded = self.config.latent_len(len) * self.compression_ratio();
        let x = Tensor::from_vec(&[1, 1, len], samples.to_vec()).expect("row vector");
        kernels::reflect_pad(&x, 0, padded - len)
    }

    fn check_input(&self, x: &Waveform<T>) -> Result<()> {
        x.expect_rate(self.config.sample_rate)?;
        let cr = self.compression_ratio();
        if x.len() < cr {
            return Err(Error::TooShort {
                needed: cr,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &Waveform<T>) -> Result<Neuralgram<T>> {
        self.check_input(x)?;
        let mut ops = Eager::new(&self.params);
        let input = ops.constant(self.pad_input(x.samples()));
        let g = self.encode_ops(&mut ops, &input);
        Neuralgram::from_tensor(g.into_owned(), self.compression_ratio())
    }

    /// Decodes to exactly `frames · CR` samples.
    pub fn decode(&self, g: &Neuralgram<T>) -> Result<Waveform<T>> {
        if g.compression_ratio() != self.compression_ratio() {
            return Err(Error::ShapeMismatch(format!(
                "Neuralgram has compression ratio {}, model expects {}",
                g.compression_ratio(),
                self.compression_ratio()
            )));
        }
        if g.channels() != self.config.ngram_channels {
            return Err(Error::ShapeMismatch(format!(
                "Neuralgram has {} channels, model expects {}",
                g.channels(),
                self.config.ngram_channels
            )));
        }
        let mut ops = Eager::new(&self.params);
        let input = ops.constant(g.to_tensor());
        let y = self.decode_ops(&mut ops, &input);
        Waveform::new(y.into_owned().into_data(), self.config.sample_rate)
    }

    /// `decode(encode(x))` truncated to the input length.
    pub fn reconstruct(&self, x: &Waveform<T>) -> Result<Waveform<T>> {
        let y = self.decode(&self.encode(x)?)?;
        let mut s = y.into_samples();
        s.truncate(x.len());
        Waveform::new(s, self.config.sample_rate)
    }
}

pub(crate) fn check_shapes<T: Scalar>(expected: &[(String, Vec<usize>)], params: &ParamStore<T>) -> Result<()> {
    for (name, shape) in expected {
        match params.get(name) {
            None => return Err(Error::ShapeMismatch(format!("missing parameter {name}"))),
            Some(t) if t.shape() != &shape[..] => {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    let known: std::collections::HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    if let Some((extra, _)) = params.iter().find(|(n, _)| !known.contains(n)) {
        return Err(Error::ShapeMismatch(format!("unexpected parameter {extra}")));
    }
    Ok(())
}
