//! Forward and backward kernels for the operations the autograd tape records.
//!
//! Convolutions are lowered to GEMM through an im2col buffer; everything else
//! is a direct loop. All kernels are single-threaded with a fixed reduction
//! order, so results are bit-reproducible.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a 1-D convolution. Padding here is zero padding; reflection
/// padding is a separate operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            pad_left: 0,
            pad_right: 0,
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        let padded = len + self.pad_left + self.pad_right;
        let span = self.dilation * (kernel - 1) + 1;
        assert!(
            padded >= span,
            "convolution input of {len} samples is shorter than the kernel span {span}"
        );
        (padded - span) / self.stride + 1
    }
}

/// Geometry of a transposed convolution: the full output of length
/// `(L−1)·stride + K` is cropped by `crop_left`/`crop_right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTransposeSpec {
    pub stride: usize,
    pub crop_left: usize,
    pub crop_right: usize,
}

impl ConvTransposeSpec {
    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        (len - 1) * self.stride + kernel - self.crop_left - self.crop_right
    }
}

/// Fills `col` (`[cin_g·K, lout]`) from the channel block starting at `x`.
fn im2col<T: Scalar>(
    x: &[T],
    len: usize,
    cin_g: usize,
    kernel: usize,
    lout: usize,
    spec: &ConvSpec,
    col: &mut [T],
) {
    let pl = spec.pad_left as isize;
    for c in 0..cin_g {
        let row_in = &x[c * len..(c + 1) * len];
        for k in 0..kernel {
            let row = &mut col[(c * kernel + k) * lout..(c * kernel + k + 1) * lout];
            let off = (k * spec.dilation) as isize - pl;
            if spec.stride == 1 {
                // valid t: 0 <= t + off < len
                let t0 = (-off).clamp(0, lout as isize) as usize;
                let t1 = (len as isize - off).clamp(0, lout as isize) as usize;
                row[..t0].fill(T::zero());
                if t1 > t0 {
                    let s0 = (t0 as isize + off) as usize;
                    row[t0..t1].copy_from_slice(&row_in[s0..s0 + (t1 - t0)]);
                }
                row[t1.max(t0)..].fill(T::zero());
            } else {
                for (t, r) in row.iter_mut().enumerate() {
                    let j = (t * spec.stride) as isize + off;
                    *r = if j >= 0 && (j as usize) < len {
                        row_in[j as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
}

/// Scatter-adds `col` back into the channel block `dx` (inverse of im2col).
fn col2im<T: Scalar>(
    col: &[T],
    len: usize,
    cin_g: usize,
    kernel: usize,
    lout: usize,
    spec: &ConvSpec,
    dx: &mut [T],
) {
    let pl = spec.pad_left as isize;
    for c in 0..cin_g {
        let row_out = &mut dx[c * len..(c + 1) * len];
        for k in 0..kernel {
            let row = &col[(c * kernel + k) * lout..(c * kernel + k + 1) * lout];
            let off = (k * spec.dilation) as isize - pl;
            if spec.stride == 1 {
                let t0 = (-off).clamp(0, lout as isize) as usize;
                let t1 = (len as isize - off).clamp(0, lout as isize) as usize;
                if t1 > t0 {
                    let s0 = (t0 as isize + off) as usize;
                    for (o, &v) in row_out[s0..s0 + (t1 - t0)].iter_mut().zip(&row[t0..t1]) {
                        *o += v;
                    }
                }
            } else {
                for (t, &v) in row.iter().enumerate() {
                    let j = (t * spec.stride) as isize + off;
                    if j >= 0 && (j as usize) < len {
                        row_out[j as usize] += v;
                    }
                }
            }
        }
    }
}

fn is_pointwise(kernel: usize, spec: &ConvSpec) -> bool {
    kernel == 1 && spec.stride == 1 && spec.pad_left == 0 && spec.pad_right == 0
}

/// `y = conv1d(x, w) + bias` with `x: [B, Cin, L]`, `w: [Cout, Cin/groups, K]`.
pub fn conv1d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Tensor<T> {
    let (batch, cin, len) = x.dims3();
    let (cout, cin_g, kernel) = w.dims3();
    let groups = spec.groups;
    assert_eq!(cin, cin_g * groups, "input channels do not match weight");
    assert_eq!(cout % groups, 0);
    let cout_g = cout / groups;
    let lout = spec.out_len(len, kernel);
    let mut y = Tensor::zeros(&[batch, cout, lout]);
    let rows = cin_g * kernel;
    let pointwise = is_pointwise(kernel, spec);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); rows * lout] };
    let (xd, wd) = (x.data(), w.data());
    let yd = y.data_mut();
    for b in 0..batch {
        for g in 0..groups {
            let xs = &xd[(b * cin + g * cin_g) * len..(b * cin + (g + 1) * cin_g) * len];
            let cols: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, len, cin_g, kernel, lout, spec, &mut col);
                &col
            };
            let ws = &wd[g * cout_g * rows..(g + 1) * cout_g * rows];
            let ys = &mut yd[(b * cout + g * cout_g) * lout..(b * cout + (g + 1) * cout_g) * lout];
            T::gemm(
                cout_g, rows, lout, ws, rows as isize, 1, cols, lout as isize, 1, T::zero(), ys,
                lout as isize, 1,
            );
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut y, bias);
    }
    y
}

fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, bias: &Tensor<T>) {
    let (batch, ch, len) = y.dims3();
    let bd = bias.data();
    assert_eq!(bd.len(), ch);
    let yd = y.data_mut();
    for b in 0..batch {
        for c in 0..ch {
            for v in &mut yd[(b * ch + c) * len..(b * ch + c + 1) * len] {
                *v += bd[c];
            }
        }
    }
}

/// Sum of `dy` over batch and time, per channel.
pub fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (batch, ch, _) = dy.dims3();
    let mut db = Tensor::zeros(&[ch]);
    for b in 0..batch {
        for c in 0..ch {
            let s: T = dy.row(b, c).iter().copied().sum();
            db.data_mut()[c] += s;
        }
    }
    db
}

/// Gradients of [`conv1d`] with respect to its input and weight.
pub fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (batch, cin, len) = x.dims3();
    let (cout, cin_g, kernel) = w.dims3();
    let groups = spec.groups;
    let cout_g = cout / groups;
    let lout = dy.dims3().2;
    let rows = cin_g * kernel;
    let pointwise = is_pointwise(kernel, spec);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![T::zero(); rows * lout];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    for b in 0..batch {
        for g in 0..groups {
            let xs = &xd[(b * cin + g * cin_g) * len..(b * cin + (g + 1) * cin_g) * len];
            let dys = &dyd[(b * cout + g * cout_g) * lout..(b * cout + (g + 1) * cout_g) * lout];
            if let Some(dw) = dw.as_mut() {
                let cols: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, len, cin_g, kernel, lout, spec, &mut col);
                    &col
                };
                let dws = &mut dw.data_mut()[g * cout_g * rows..(g + 1) * cout_g * rows];
                // dW += dY · colᵀ
                T::gemm(
                    cout_g, lout, rows, dys, lout as isize, 1, cols, 1, lout as isize, T::one(),
                    dws, rows as isize, 1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let ws = &wd[g * cout_g * rows..(g + 1) * cout_g * rows];
                let dxs =
                    &mut dx.data_mut()[(b * cin + g * cin_g) * len..(b * cin + (g + 1) * cin_g) * len];
                if pointwise {
                    // dX += Wᵀ · dY directly
                    T::gemm(
                        rows, cout_g, lout, ws, 1, rows as isize, dys, lout as isize, 1, T::one(),
                        dxs, lout as isize, 1,
                    );
                } else {
                    T::gemm(
                        rows, cout_g, lout, ws, 1, rows as isize, dys, lout as isize, 1, T::zero(),
                        &mut col, lout as isize, 1,
                    );
                    col2im(&col, len, cin_g, kernel, lout, spec, dxs);
                }
            }
        }
    }
    (dx, dw)
}

/// `[Cout, Cin, K]` → `[Cout·K, Cin]`.
fn permute_transposed_weight<T: Scalar>(w: &Tensor<T>) -> Vec<T> {
    let (cout, cin, kernel) = w.dims3();
    let wd = w.data();
    let mut out = vec![T::zero(); wd.len()];
    for o in 0..cout {
        for i in 0..cin {
            for k in 0..kernel {
                out[(o * kernel + k) * cin + i] = wd[(o * cin + i) * kernel + k];
            }
        }
    }
    out
}

/// Transposed convolution, `x: [B, Cin, L]`, `w: [Cout, Cin, K]`:
/// `y[o, t·s + k − crop_left] += w[o, i, k] · x[i, t]`.
pub fn conv_transpose1d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvTransposeSpec,
) -> Tensor<T> {
    let (batch, cin, len) = x.dims3();
    let (cout, cin_w, kernel) = w.dims3();
    assert_eq!(cin, cin_w, "input channels do not match weight");
    let lout = spec.out_len(len, kernel);
    let wp = permute_transposed_weight(w);
    let rows = cout * kernel;
    let mut col = vec![T::zero(); rows * len];
    let mut y = Tensor::zeros(&[batch, cout, lout]);
    let xd = x.data();
    for b in 0..batch {
        let xs = &xd[b * cin * len..(b + 1) * cin * len];
        T::gemm(
            rows, cin, len, &wp, cin as isize, 1, xs, len as isize, 1, T::zero(), &mut col,
            len as isize, 1,
        );
        let yd = y.data_mut();
        for o in 0..cout {
            let yrow = &mut yd[(b * cout + o) * lout..(b * cout + o + 1) * lout];
            for k in 0..kernel {
                let crow = &col[(o * kernel + k) * len..(o * kernel + k + 1) * len];
                for (t, &v) in crow.iter().enumerate() {
                    let p = (t * spec.stride + k) as isize - spec.crop_left as isize;
                    if p >= 0 && (p as usize) < lout {
                        yrow[p as usize] += v;
                    }
                }
            }
        }
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut y, bias);
    }
    y
}

/// Gradients of [`conv_transpose1d`] with respect to its input and weight.
pub fn conv_transpose1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvTransposeSpec,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (batch, cin, len) = x.dims3();
    let (cout, _, kernel) = w.dims3();
    let lout = dy.dims3().2;
    let rows = cout * kernel;
    let wp = permute_transposed_weight(w);
    let mut dcol = vec![T::zero(); rows * len];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dwp = need_dw.then(|| vec![T::zero(); rows * cin]);
    let (xd, dyd) = (x.data(), dy.data());
    for b in 0..batch {
        for o in 0..cout {
            let dyrow = &dyd[(b * cout + o) * lout..(b * cout + o + 1) * lout];
            for k in 0..kernel {
                let crow = &mut dcol[(o * kernel + k) * len..(o * kernel + k + 1) * len];
                for (t, c) in crow.iter_mut().enumerate() {
                    let p = (t * spec.stride + k) as isize - spec.crop_left as isize;
                    *c = if p >= 0 && (p as usize) < lout {
                        dyrow[p as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
        let xs = &xd[b * cin * len..(b + 1) * cin * len];
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[b * cin * len..(b + 1) * cin * len];
            T::gemm(
                cin, rows, len, &wp, 1, cin as isize, &dcol, len as isize, 1, T::zero(), dxs,
                len as isize, 1,
            );
        }
        if let Some(dwp) = dwp.as_mut() {
            T::gemm(
                rows, len, cin, &dcol, len as isize, 1, xs, 1, len as isize, T::one(), dwp,
                cin as isize, 1,
            );
        }
    }
    let dw = dwp.map(|dwp| {
        let mut dw = Tensor::zeros(w.shape());
        let cin_w = w.dims3().1;
        let d = dw.data_mut();
        for o in 0..cout {
            for i in 0..cin_w {
                for k in 0..kernel {
                    d[(o * cin_w + i) * kernel + k] = dwp[(o * kernel + k) * cin_w + i];
                }
            }
        }
        dw
    });
    (dx, dw)
}

/// Index into a length-`len` signal under symmetric (whole-sample) reflection,
/// folding repeatedly when the padding exceeds the signal.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, left: usize, right: usize) -> Tensor<T> {
    let (batch, ch, len) = x.dims3();
    let lout = len + left + right;
    let mut y = Tensor::zeros(&[batch, ch, lout]);
    let yd = y.data_mut();
    for b in 0..batch {
        for c in 0..ch {
            let src = x.row(b, c);
            let dst = &mut yd[(b * ch + c) * lout..(b * ch + c + 1) * lout];
            dst[left..left + len].copy_from_slice(src);
            for i in (0..left).chain(left + len..lout) {
                dst[i] = src[reflect_index(i as isize - left as isize, len)];
            }
        }
    }
    y
}

pub fn reflect_pad_backward<T: Scalar>(dy: &Tensor<T>, len: usize, left: usize) -> Tensor<T> {
    let (batch, ch, _) = dy.dims3();
    let mut dx = Tensor::zeros(&[batch, ch, len]);
    let dxd = dx.data_mut();
    for b in 0..batch {
        for c in 0..ch {
            let src = dy.row(b, c);
            let dst = &mut dxd[(b * ch + c) * len..(b * ch + c + 1) * len];
            for (i, &v) in src.iter().enumerate() {
                dst[reflect_index(i as isize - left as isize, len)] += v;
            }
        }
    }
    dx
}

/// Average pooling with kernel 4, stride 2 and one sample of left padding
/// that is excluded from the average. Output length is `ceil(L/2)`.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (batch, ch, len) = x.dims3();
    let lout = len.div_ceil(2);
    let mut y = Tensor::zeros(&[batch, ch, lout]);
    let yd = y.data_mut();
    for b in 0..batch {
        for c in 0..ch {
            let src = x.row(b, c);
            for (i, o) in yd[(b * ch + c) * lout..(b * ch + c + 1) * lout].iter_mut().enumerate() {
                let (lo, hi) = pool_window(i, len);
                let s: T = src[lo..hi].iter().copied().sum();
                *o = s / T::from_usize_lossy(hi - lo);
            }
        }
    }
    y
}

fn pool_window(i: usize, len: usize) -> (usize, usize) {
    let lo = (2 * i).saturating_sub(1);
    let hi = (2 * i + 3).min(len);
    (lo, hi)
}

pub fn avg_pool_backward<T: Scalar>(dy: &Tensor<T>, len: usize) -> Tensor<T> {
    let (batch, ch, lout) = dy.dims3();
    let mut dx = Tensor::zeros(&[batch, ch, len]);
    let dxd = dx.data_mut();
    for b in 0..batch {
        for c in 0..ch {
            let src = dy.row(b, c);
            let dst = &mut dxd[(b * ch + c) * len..(b * ch + c + 1) * len];
            for (i, &g) in src.iter().enumerate().take(lout) {
                let (lo, hi) = pool_window(i, len);
                let share = g / T::from_usize_lossy(hi - lo);
                for d in &mut dst[lo..hi] {
                    *d += share;
                }
            }
        }
    }
    dx
}

/// `w[o, …] = g[o] · v[o, …] / ‖v[o, …]‖`.
pub fn weight_norm<T: Scalar>(g: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
    let rows = v.shape()[0];
    assert_eq!(g.len(), rows, "one gain per output channel");
    let per = v.len() / rows;
    let mut w = v.clone();
    for (o, chunk) in w.data_mut().chunks_mut(per).enumerate() {
        let norm = chunk.iter().map(|&a| a * a).sum::<T>().sqrt();
        let scale = g.data()[o] / norm;
        for a in chunk {
            *a *= scale;
        }
    }
    w
}

/// Gradients of [`weight_norm`] with respect to `g` and `v`.
pub fn weight_norm_backward<T: Scalar>(g: &Tensor<T>, v: &Tensor<T>, dw: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let rows = v.shape()[0];
    let per = v.len() / rows;
    let mut dg = Tensor::zeros(g.shape());
    let mut dv = Tensor::zeros(v.shape());
    for o in 0..rows {
        let vs = &v.data()[o * per..(o + 1) * per];
        let dws = &dw.data()[o * per..(o + 1) * per];
        let norm = vs.iter().map(|&a| a * a).sum::<T>().sqrt();
        // projection of dw on the unit direction v/‖v‖
        let proj = vs.iter().zip(dws).map(|(&a, &d)| a * d).sum::<T>() / norm;
        dg.data_mut()[o] = proj;
        let scale = g.data()[o] / norm;
        for ((out, &a), &d) in dv.data_mut()[o * per..(o + 1) * per].iter_mut().zip(vs).zip(dws) {
            *out = scale * (d - proj * a / norm);
        }
    }
    (dg, dv)
}
