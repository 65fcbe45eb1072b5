//! Parameter storage, weight-normalized convolution layers and the Adam
//! optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Ops;
use crate::kernels::{ConvSpec, ConvTransposeSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for weight directions.
pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// FNV-1a over names, shapes and the f64 bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.entries {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Inserts `{name}.v`, `{name}.g` and `{name}.b` for a weight-normalized
/// kernel of the given shape (output channels first). Directions are drawn
/// from `N(0, INIT_STD)`; gains start at 1 so every output channel begins
/// with a unit-norm effective kernel.
fn init_weight_norm<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: [usize; 3],
    bias_len: usize,
    rng: &mut R,
) {
    let v: Tensor<T> = normal_tensor(&shape, INIT_STD, rng);
    let g = vec![T::one(); shape[0]];
    store.insert(&format!("{name}.v"), v);
    store.insert(&format!("{name}.g"), Tensor::from_vec(&[shape[0]], g).expect("gain length"));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[bias_len]));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Reflect `(left, right)` samples before a valid convolution.
    Reflect(usize, usize),
    /// Zero padding folded into the convolution.
    Zero(usize, usize),
}

/// Weight-normalized 1-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct WnConv1d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl WnConv1d {
    /// Stride-1 convolution with "same" reflection padding.
    pub fn same(name: String, cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        Self {
            name,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride: 1,
            dilation,
            groups: 1,
            padding: Padding::Reflect(total / 2, total - total / 2),
        }
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels / self.groups, self.kernel]
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        init_weight_norm(store, &self.name, self.weight_shape(), self.out_channels, rng);
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{}.b", self.name), vec![self.out_channels]),
            (format!("{}.g", self.name), vec![self.out_channels]),
            (format!("{}.v", self.name), self.weight_shape().to_vec()),
        ]
    }

    pub fn forward<T: Scalar, O: Ops<T>>(&self, ops: &mut O, x: &O::Var) -> O::Var {
        let g = ops.param(&format!("{}.g", self.name));
        let v = ops.param(&format!("{}.v", self.name));
        let b = ops.param(&format!("{}.b", self.name));
        let w = ops.weight_norm(&g, &v);
        let mut spec = ConvSpec {
            stride: self.stride,
            dilation: self.dilation,
            pad_left: 0,
            pad_right: 0,
            groups: self.groups,
        };
        match self.padding {
            Padding::Reflect(l, r) if l + r > 0 => {
                let xp = ops.reflect_pad(x, l, r);
                ops.conv1d(&xp, &w, &b, spec)
            }
            Padding::Reflect(..) => ops.conv1d(x, &w, &b, spec),
            Padding::Zero(l, r) => {
                spec.pad_left = l;
                spec.pad_right = r;
                ops.conv1d(x, &w, &b, spec)
            }
        }
    }
}

/// Weight-normalized transposed convolution; weight layout `[out, in, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WnConvTranspose1d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub crop_left: usize,
    pub crop_right: usize,
}

impl WnConvTranspose1d {
    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels, self.kernel]
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        init_weight_norm(store, &self.name, self.weight_shape(), self.out_channels, rng);
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            (format!("{}.b", self.name), vec![self.out_channels]),
            (format!("{}.g", self.name), vec![self.out_channels]),
            (format!("{}.v", self.name), self.weight_shape().to_vec()),
        ]
    }

    pub fn forward<T: Scalar, O: Ops<T>>(&self, ops: &mut O, x: &O::Var) -> O::Var {
        let g = ops.param(&format!("{}.g", self.name));
        let v = ops.param(&format!("{}.v", self.name));
        let b = ops.param(&format!("{}.b", self.name));
        let w = ops.weight_norm(&g, &v);
        let spec = ConvTransposeSpec {
            stride: self.stride,
            crop_left: self.crop_left,
            crop_right: self.crop_right,
        };
        ops.conv_transpose1d(x, &w, &b, spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[(String, Tensor<T>)]) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(g.shape()));
                self.v.insert(name, Tensor::zeros(g.shape()));
            }
            let m = self.m.get_mut(name).expect("inserted").data_mut();
            let v = self.v.get_mut(name).expect("inserted").data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
