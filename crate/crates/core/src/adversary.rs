//! Multi-scale waveform discriminators with hinge and feature-matching
//! losses.
//!
//! Losses return their value together with the gradient with respect to the
//! discriminator outputs, so the trainer can seed the tape with them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::autograd::{Eager, Ops};
use crate::error::{Error, Result};
use crate::model::check_shapes;
use crate::nn::{Padding, ParamStore, WnConv1d};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight of the feature-matching term in the generator objective.
pub const FM_WEIGHT: f64 = 10.0;

const STRIDED_LAYERS: usize = 4;
const STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Output widths of the first convolution and the four strided layers.
    pub channels: Vec<usize>,
    pub groups: usize,
    pub scales: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 64, 256, 1024, 1024],
            groups: 4,
            scales: 3,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn with_channels(mut self, channels: Vec<usize>) -> Self {
        self.channels = channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != STRIDED_LAYERS + 1 || self.channels.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "discriminator needs {} positive channel widths",
                STRIDED_LAYERS + 1
            )));
        }
        if self.groups == 0 || self.channels.iter().any(|c| c % self.groups != 0) {
            return Err(Error::InvalidArgument(format!(
                "discriminator widths {:?} must be multiples of the group count {}",
                self.channels, self.groups
            )));
        }
        if self.scales == 0 {
            return Err(Error::InvalidArgument("at least one discriminator scale is required".into()));
        }
        Ok(())
    }

    /// Input samples covered by one logit at the finest scale.
    pub fn patch_len(&self) -> usize {
        STRIDE.pow(STRIDED_LAYERS as u32)
    }

    /// Shortest accepted input.
    pub fn min_input_len(&self) -> usize {
        self.patch_len()
    }

    /// Number of feature maps per scale, logits included.
    pub fn feature_count(&self) -> usize {
        STRIDED_LAYERS + 3
    }
}

/// Outputs of one scale: every layer's activation, the last being logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutput<T> {
    pub feature_maps: Vec<Tensor<T>>,
}

impl<T: Scalar> DiscriminatorOutput<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.feature_maps.last().expect("at least one layer")
    }
}

fn layers(cfg: &DiscriminatorConfig, scale: usize) -> Vec<WnConv1d> {
    let p = |i: usize| format!("disc.{scale}.l{i}");
    let c = &cfg.channels;
    let mut out = vec![WnConv1d::same(p(0), 1, c[0], 15, 1)];
    for i in 0..STRIDED_LAYERS {
        out.push(WnConv1d {
            name: p(i + 1),
            in_channels: c[i],
            out_channels: c[i + 1],
            kernel: 10 * STRIDE + 1,
            stride: STRIDE,
            dilation: 1,
            groups: cfg.groups,
            padding: Padding::Zero(5 * STRIDE, 5 * STRIDE),
        });
    }
    let top = c[STRIDED_LAYERS];
    out.push(WnConv1d {
        name: p(STRIDED_LAYERS + 1),
        in_channels: top,
        out_channels: top,
        kernel: 5,
        stride: 1,
        dilation: 1,
        groups: 1,
        padding: Padding::Zero(2, 2),
    });
    out.push(WnConv1d {
        name: p(STRIDED_LAYERS + 2),
        in_channels: top,
        out_channels: 1,
        kernel: 3,
        stride: 1,
        dilation: 1,
        groups: 1,
        padding: Padding::Zero(1, 1),
    });
    out
}

/// Stack of identical discriminators, scale `k` seeing the input average
/// pooled `k` times.
pub struct MultiScaleDiscriminator<T: Scalar> {
    config: DiscriminatorConfig,
    params: ParamStore<T>,
    layers: Vec<Vec<WnConv1d>>,
}

impl<T: Scalar> Clone for MultiScaleDiscriminator<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layers: self.layers.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for MultiScaleDiscriminator<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MultiScaleDiscriminator")
            .field("config", &self.config)
            .field("parameters", &self.params.numel())
            .finish()
    }
}

impl<T: Scalar> MultiScaleDiscriminator<T> {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers: Vec<_> = (0..config.scales).map(|k| layers(&config, k)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for l in layers.iter().flatten() {
            l.init(&mut params, &mut rng);
        }
        Ok(Self { config, params, layers })
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        check_shapes(&Self::param_shapes(&config), &params)?;
        let layers = (0..config.scales).map(|k| layers(&config, k)).collect();
        Ok(Self { config, params, layers })
    }

    pub fn param_shapes(config: &DiscriminatorConfig) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<_> = (0..config.scales)
            .flat_map(|k| layers(config, k))
            .flat_map(|l| l.param_shapes())
            .collect();
        out.sort();
        out
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// All scales on a `[B, 1, L]` value; one feature list per scale.
    pub fn forward_ops<O: Ops<T>>(&self, ops: &mut O, x: &O::Var) -> Vec<Vec<O::Var>>
    where
        O::Var: Clone,
    {
        let slope = T::lit(self.config.leaky_slope);
        let mut input = x.clone();
        let mut out = Vec::with_capacity(self.config.scales);
        for (k, scale) in self.layers.iter().enumerate() {
            if k > 0 {
                input = ops.avg_pool(&input);
            }
            let mut feats = Vec::with_capacity(scale.len());
            let mut h = input.clone();
            for (i, layer) in scale.iter().enumerate() {
                h = layer.forward(ops, &h);
                if i + 1 < scale.len() {
                    h = ops.leaky_relu(&h, slope);
                }
                feats.push(h.clone());
            }
            out.push(feats);
        }
        out
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let needed = self.config.min_input_len();
        if len < needed {
            return Err(Error::TooShort { needed, got: len });
        }
        Ok(())
    }

    /// Evaluates every scale without recording gradients.
    pub fn discriminate_all(&self, x: &Tensor<T>) -> Result<Vec<DiscriminatorOutput<T>>> {
        self.check_len(x.dims3().2)?;
        let mut ops = Eager::new(&self.params);
        let input = ops.constant(x.clone());
        Ok(self
            .forward_ops(&mut ops, &input)
            .into_iter()
            .map(|f| DiscriminatorOutput {
                feature_maps: f.into_iter().map(|t| t.into_owned()).collect(),
            })
            .collect())
    }

    /// Output of scale `k` (0-based) for a single waveform.
    pub fn discriminate(&self, x: &Waveform<T>, k: usize) -> Result<DiscriminatorOutput<T>> {
        if k >= self.config.scales {
            return Err(Error::InvalidArgument(format!(
                "scale {k} out of range for {} scales",
                self.config.scales
            )));
        }
        let t = Tensor::from_vec(&[1, 1, x.len()], x.samples().to_vec())?;
        Ok(self.discriminate_all(&t)?.swap_remove(k))
    }
}

/// Sum over layers of the mean absolute difference, and its gradient with
/// respect to `a`.
pub fn feature_matching<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::ShapeMismatch("feature maps differ in count or shape".into()));
    }
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        total += x.mean_abs_diff(y);
        let n = T::from_usize_lossy(x.len().max(1));
        let mut g = x.clone();
        for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
            let d = *gv - yv;
            *gv = if d > T::zero() {
                T::one() / n
            } else if d < T::zero() {
                -T::one() / n
            } else {
                T::zero()
            };
        }
        grads.push(g);
    }
    Ok((total, grads))
}

pub fn feature_matching_loss<T: Scalar>(a: &DiscriminatorOutput<T>, b: &DiscriminatorOutput<T>) -> Result<T> {
    feature_matching(&a.feature_maps, &b.feature_maps).map(|(l, _)| l)
}

fn mean<T: Scalar>(v: impl Iterator<Item = T>, n: usize) -> T {
    v.sum::<T>() / T::from_usize_lossy(n.max(1))
}

/// `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`.
pub fn hinge_d_loss<T: Scalar>(real: &[T], fake: &[T]) -> T {
    mean(real.iter().map(|&r| (T::one() - r).max(T::zero())), real.len())
        + mean(fake.iter().map(|&f| (T::one() + f).max(T::zero())), fake.len())
}

/// Gradients of [`hinge_d_loss`] with respect to the real and fake logits.
pub fn hinge_d_grad<T: Scalar>(real: &[T], fake: &[T]) -> (Vec<T>, Vec<T>) {
    let nr = T::from_usize_lossy(real.len().max(1));
    let nf = T::from_usize_lossy(fake.len().max(1));
    let gr = real
        .iter()
        .map(|&r| if r < T::one() { -T::one() / nr } else { T::zero() })
        .collect();
    let gf = fake
        .iter()
        .map(|&f| if f > -T::one() { T::one() / nf } else { T::zero() })
        .collect();
    (gr, gf)
}

/// `−mean(fake)`.
pub fn hinge_g_loss<T: Scalar>(fake: &[T]) -> T {
    -mean(fake.iter().copied(), fake.len())
}

pub fn hinge_g_grad<T: Scalar>(fake: &[T]) -> Vec<T> {
    let n = T::from_usize_lossy(fake.len().max(1));
    vec![-T::one() / n; fake.len()]
}

/// Generator objective over all scales: adversarial term plus weighted
/// feature matching. Returns `(adv, fm)`.
pub fn generator_loss<T: Scalar>(
    fake: &[DiscriminatorOutput<T>],
    real: &[DiscriminatorOutput<T>],
) -> Result<(T, T)> {
    let mut adv = T::zero();
    let mut fm = T::zero();
    for (f, r) in fake.iter().zip(real) {
        adv += hinge_g_loss(f.logits().data());
        fm += feature_matching_loss(f, r)?;
    }
    Ok((adv, fm))
}

/// Discriminator objective summed over scales.
pub fn discriminator_loss<T: Scalar>(real: &[DiscriminatorOutput<T>], fake: &[DiscriminatorOutput<T>]) -> T {
    real.iter()
        .zip(fake)
        .map(|(r, f)| hinge_d_loss(r.logits().data(), f.logits().data()))
        .sum()
}
