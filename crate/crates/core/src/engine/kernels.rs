//! Forward and backward kernels for every operator the fusion network uses.
//!
//! Feature maps are `[H, W, C]` row-major (channels innermost). Each kernel
//! visits pixels in a fixed order, so results are bit-reproducible.

use super::gemm::{conv_narrow, gemm_acc, weight_grad_narrow, View};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const L2_NORM_EPS: f64 = 1e-12;

fn expect_shape<T: Element>(t: &Tensor<T>, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::invalid(format!(
            "{what}: expected shape {shape:?}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "{what}: operand shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Output columns `x` whose tap `kx` lands inside `[0, w)`, as `(x0, count)`.
#[inline]
fn tap_span(kx: usize, radius: usize, w: usize) -> (usize, usize) {
    let x0 = radius.saturating_sub(kx);
    let x1 = (w + radius).saturating_sub(kx).min(w);
    (x0, x1.saturating_sub(x0))
}

#[inline]
fn tap_coord(pos: usize, tap: usize, radius: usize, len: usize) -> Option<usize> {
    let p = (pos + tap).checked_sub(radius)?;
    (p < len).then_some(p)
}

// ---------------------------------------------------------------------------
// Dense convolution

/// Validates `x: [H, W, Cin]`, `kernel: [k, k, Cin, Cout]`, `bias: [Cout]`.
/// Returns `(H, W, Cin, Cout, k)`.
fn conv2d_dims<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, w, cin) = x.hwc("conv2d input")?;
    let &[k, k2, kin, cout] = kernel.shape() else {
        return Err(Error::invalid(format!(
            "conv2d kernel: expected [k, k, Cin, Cout], got {:?}",
            kernel.shape()
        )));
    };
    if k != k2 || k % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv2d kernel: spatial size must be odd and square, got {k}x{k2}"
        )));
    }
    if kin != cin {
        return Err(Error::invalid(format!(
            "conv2d: input has Cin = {cin} channels but the kernel expects {kin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::invalid(format!(
            "conv2d bias: expected [Cout = {cout}], got {:?}",
            bias.shape()
        )));
    }
    Ok((h, w, cin, cout, k))
}

/// Gathers every `k x k` neighbourhood into a row: `[H * W, k * k * Cin]`,
/// zero outside the image. Column order matches the kernel layout.
fn im2col<T: Element>(xd: &[T], h: usize, w: usize, cin: usize, k: usize) -> Vec<T> {
    let r = k / 2;
    let cols = k * k * cin;
    let mut out = vec![T::zero(); h * w * cols];
    for y in 0..h {
        for ky in 0..k {
            let Some(iy) = tap_coord(y, ky, r, h) else { continue };
            for kx in 0..k {
                let (x0, n) = tap_span(kx, r, w);
                let ix0 = x0 + kx - r;
                let tap = (ky * k + kx) * cin;
                for i in 0..n {
                    let src = &xd[(iy * w + ix0 + i) * cin..][..cin];
                    out[(y * w + x0 + i) * cols + tap..][..cin].copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the image.
fn col2im<T: Element>(cols_data: &[T], h: usize, w: usize, cin: usize, k: usize) -> Vec<T> {
    let r = k / 2;
    let cols = k * k * cin;
    let mut out = vec![T::zero(); h * w * cin];
    for y in 0..h {
        for ky in 0..k {
            let Some(iy) = tap_coord(y, ky, r, h) else { continue };
            for kx in 0..k {
                let (x0, n) = tap_span(kx, r, w);
                let ix0 = x0 + kx - r;
                let tap = (ky * k + kx) * cin;
                for i in 0..n {
                    let src = &cols_data[(y * w + x0 + i) * cols + tap..][..cin];
                    for (d, &v) in out[(iy * w + ix0 + i) * cin..][..cin].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d<T: Element>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, cin, cout, k) = conv2d_dims(x, kernel, bias)?;
    let mut out = Vec::with_capacity(h * w * cout);
    for _ in 0..h * w {
        out.extend_from_slice(bias.data());
    }
    if conv_narrow(x.data(), (h, w, cin, k), kernel.data(), cout, &mut out) {
        return Tensor::new(vec![h, w, cout], out);
    }
    // The kernel [k, k, Cin, Cout] is a (k*k*Cin) x Cout matrix.
    let rows = k * k * cin;
    let patches;
    let a = if k == 1 {
        x.data()
    } else {
        patches = im2col(x.data(), h, w, cin, k);
        &patches
    };
    gemm_acc(
        h * w,
        rows,
        cout,
        a,
        View::new(0, rows, 1),
        kernel.data(),
        View::new(0, cout, 1),
        &mut out,
        View::new(0, cout, 1),
    );
    Tensor::new(vec![h, w, cout], out)
}

/// `[k, k, Cin, Cout]` -> `[k, k, Cout, Cin]` with both spatial axes
/// reversed: convolving the output gradient with it gives the input gradient.
fn flip_transpose<T: Element>(kd: &[T], k: usize, cin: usize, cout: usize) -> Vec<T> {
    let mut out = vec![T::zero(); kd.len()];
    for ky in 0..k {
        for kx in 0..k {
            let src = (ky * k + kx) * cin * cout;
            let dst = ((k - 1 - ky) * k + (k - 1 - kx)) * cout * cin;
            for ci in 0..cin {
                for co in 0..cout {
                    out[dst + co * cin + ci] = kd[src + ci * cout + co];
                }
            }
        }
    }
    out
}

/// Returns gradients with respect to `(input, kernel, bias)`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (gx, gk, gb) = conv2d_backward_select(x, kernel, bias, grad_out, true)?;
    Ok((gx.expect("requested"), gk, gb))
}

/// As [`conv2d_backward`], skipping the input gradient unless `want_input`.
pub(crate) fn conv2d_backward_select<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (h, w, cin, cout, k) = conv2d_dims(x, kernel, bias)?;
    expect_shape(grad_out, &[h, w, cout], "conv2d grad")?;
    let gd = grad_out.data();
    let mut gb = vec![T::zero(); cout];
    for g in gd.chunks_exact(cout) {
        for (b, &v) in gb.iter_mut().zip(g) {
            *b += v;
        }
    }

    let gx = if want_input {
        let mut gx = vec![T::zero(); x.numel()];
        let flipped = flip_transpose(kernel.data(), k, cin, cout);
        if !conv_narrow(gd, (h, w, cout, k), &flipped, cin, &mut gx) {
            // gpatches = g K^T, folded back onto the input.
            let rows = k * k * cin;
            let mut gp = vec![T::zero(); h * w * rows];
            gemm_acc(h * w, cout, rows, gd, View::new(0, cout, 1), kernel.data(), View::new(0, 1, cout), &mut gp, View::new(0, rows, 1));
            gx = if k == 1 { gp } else { col2im(&gp, h, w, cin, k) };
        }
        Some(Tensor::new(x.shape().to_vec(), gx)?)
    } else {
        None
    };

    let mut gk = vec![T::zero(); kernel.numel()];
    if !weight_grad_narrow(x.data(), (h, w, cin, k), gd, cout, &mut gk) {
        // gK = patches^T g
        let rows = k * k * cin;
        let patches;
        let a = if k == 1 {
            x.data()
        } else {
            patches = im2col(x.data(), h, w, cin, k);
            &patches
        };
        gemm_acc(rows, h * w, cout, a, View::new(0, 1, rows), gd, View::new(0, cout, 1), &mut gk, View::new(0, cout, 1));
    }
    Ok((gx, Tensor::new(kernel.shape().to_vec(), gk)?, Tensor::new(vec![cout], gb)?))
}

// ---------------------------------------------------------------------------
// Depthwise 3x3 convolution

fn depthwise_dims<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (h, w, c) = x.hwc("depthwise conv input")?;
    expect_shape(kernel, &[3, 3, c], "depthwise conv kernel")?;
    expect_shape(bias, &[c], "depthwise conv bias")?;
    Ok((h, w, c))
}

pub fn depthwise_conv3x3<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = depthwise_dims(x, kernel, bias)?;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * c..][..c];
            o.copy_from_slice(bias.data());
            for ky in 0..3 {
                let Some(iy) = tap_coord(y, ky, 1, h) else { continue };
                for kx in 0..3 {
                    let Some(ix) = tap_coord(xx, kx, 1, w) else { continue };
                    let xin = &xd[(iy * w + ix) * c..][..c];
                    let tap = &kd[(ky * 3 + kx) * c..][..c];
                    for ((o, &a), &b) in o.iter_mut().zip(xin).zip(tap) {
                        *o += a * b;
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

pub fn depthwise_conv3x3_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (h, w, c) = depthwise_dims(x, kernel, bias)?;
    expect_shape(grad_out, &[h, w, c], "depthwise conv grad")?;
    let xd = x.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); x.numel()];
    let mut gk = vec![T::zero(); kernel.numel()];
    let mut gb = vec![T::zero(); c];
    for y in 0..h {
        for xx in 0..w {
            let g = &gd[(y * w + xx) * c..][..c];
            for (b, &v) in gb.iter_mut().zip(g) {
                *b += v;
            }
            for ky in 0..3 {
                let Some(iy) = tap_coord(y, ky, 1, h) else { continue };
                for kx in 0..3 {
                    let Some(ix) = tap_coord(xx, kx, 1, w) else { continue };
                    let base = (iy * w + ix) * c;
                    let toff = (ky * 3 + kx) * c;
                    let taps = &kd[toff..][..c];
                    for ((d, &gv), &kv) in gx[base..][..c].iter_mut().zip(g).zip(taps) {
                        *d += gv * kv;
                    }
                    let xin = &xd[base..][..c];
                    for ((d, &gv), &xv) in gk[toff..][..c].iter_mut().zip(g).zip(xin) {
                        *d += gv * xv;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![c], gb)?,
    ))
}

// ---------------------------------------------------------------------------
// Layer normalization over the channel axis

/// Per-pixel statistics kept from the forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (h, w, c) = x.hwc("layer_norm input")?;
    expect_shape(gamma, &[c], "layer_norm gamma")?;
    expect_shape(beta, &[c], "layer_norm beta")?;
    let eps = T::from_f64(LAYER_NORM_EPS);
    let n = T::from_f64(c as f64);
    let mut out = vec![T::zero(); x.numel()];
    let mut mean = Vec::with_capacity(h * w);
    let mut inv_std = Vec::with_capacity(h * w);
    for (px, o) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mu = px.iter().copied().sum::<T>() / n;
        let var = px.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let rs = (var + eps).sqrt().recip();
        for (((o, &v), &g), &b) in o.iter_mut().zip(px).zip(gamma.data()).zip(beta.data()) {
            *o = (v - mu) * rs * g + b;
        }
        mean.push(mu);
        inv_std.push(rs);
    }
    Ok((Tensor::new(vec![h, w, c], out)?, NormStats { mean, inv_std }))
}

pub fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (_, _, c) = x.hwc("layer_norm input")?;
    same_shape(x, grad_out, "layer_norm grad")?;
    let n = T::from_f64(c as f64);
    let mut gx = vec![T::zero(); x.numel()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for (i, ((px, g), gxp)) in x
        .data()
        .chunks_exact(c)
        .zip(grad_out.data().chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
        .enumerate()
    {
        let mu = stats.mean[i];
        let rs = stats.inv_std[i];
        for ch in 0..c {
            xhat[ch] = (px[ch] - mu) * rs;
            dxhat[ch] = g[ch] * gamma.data()[ch];
            gg[ch] += g[ch] * xhat[ch];
            gb[ch] += g[ch];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = dot(&dxhat, &xhat) / n;
        for ch in 0..c {
            gxp[ch] = rs * (dxhat[ch] - mean_d - xhat[ch] * mean_dx);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(vec![c], gg)?,
        Tensor::new(vec![c], gb)?,
    ))
}

// ---------------------------------------------------------------------------
// Softmax

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "softmax: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(xd[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (xd[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_backward<T: Element>(y: &Tensor<T>, axis: usize, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(y, grad_out, "softmax grad")?;
    let (outer, n, inner) = axis_split(y.shape(), axis)?;
    let yd = y.data();
    let gd = grad_out.data();
    let mut gx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut s = T::zero();
            for j in 0..n {
                s += yd[at(j)] * gd[at(j)];
            }
            for j in 0..n {
                gx[at(j)] = yd[at(j)] * (gd[at(j)] - s);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), gx)
}

// ---------------------------------------------------------------------------
// Element-wise

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

#[inline]
pub fn gelu_scalar<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_derivative<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| gelu_scalar(x.data()[i]))
}

pub fn gelu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x, grad_out, "gelu grad")?;
    Ok(Tensor::from_fn(x.shape(), |i| {
        gelu_derivative(x.data()[i]) * grad_out.data()[i]
    }))
}

// ---------------------------------------------------------------------------
// Channel bookkeeping

pub fn channel_slice<T: Element>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc("channel_slice input")?;
    if start + len > c || len == 0 {
        return Err(Error::invalid(format!(
            "channel_slice: range {start}..{} outside {c} channels",
            start + len
        )));
    }
    let mut out = Vec::with_capacity(h * w * len);
    for px in x.data().chunks_exact(c) {
        out.extend_from_slice(&px[start..start + len]);
    }
    Tensor::new(vec![h, w, len], out)
}

pub fn channel_slice_backward<T: Element>(
    input_shape: &[usize],
    start: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let c = input_shape[2];
    let len = grad_out.shape()[2];
    let mut gx = Tensor::zeros(input_shape);
    for (dst, src) in gx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(grad_out.data().chunks_exact(len))
    {
        dst[start..start + len].copy_from_slice(src);
    }
    Ok(gx)
}

pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return Err(Error::invalid("concat_channels: no inputs"));
    };
    let (h, w, _) = first.hwc("concat_channels input")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (ph, pw, pc) = p.hwc("concat_channels input")?;
        if (ph, pw) != (h, w) {
            return Err(Error::invalid(format!(
                "concat_channels: spatial size {ph}x{pw} differs from {h}x{w}"
            )));
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(h * w * total);
    for px in 0..h * w {
        for (p, &pc) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[px * pc..][..pc]);
        }
    }
    Tensor::new(vec![h, w, total], out)
}

// ---------------------------------------------------------------------------
// Transposed (channel) attention primitives

/// Divides every channel by its L2 norm taken over all pixels.
pub fn l2_normalize_channels<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (_, _, c) = x.hwc("l2_normalize input")?;
    let eps = T::from_f64(L2_NORM_EPS);
    let mut sq = vec![T::zero(); c];
    for px in x.data().chunks_exact(c) {
        for (s, &v) in sq.iter_mut().zip(px) {
            *s += v * v;
        }
    }
    let norms: Vec<T> = sq.into_iter().map(|s| s.sqrt().max(eps)).collect();
    let mut out = x.data().to_vec();
    for px in out.chunks_exact_mut(c) {
        for (v, &n) in px.iter_mut().zip(&norms) {
            *v /= n;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, norms))
}

pub fn l2_normalize_channels_backward<T: Element>(
    y: &Tensor<T>,
    norms: &[T],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape(y, grad_out, "l2_normalize grad")?;
    let c = norms.len();
    let eps = T::from_f64(L2_NORM_EPS);
    let mut proj = vec![T::zero(); c];
    for (py, pg) in y.data().chunks_exact(c).zip(grad_out.data().chunks_exact(c)) {
        for ch in 0..c {
            proj[ch] += py[ch] * pg[ch];
        }
    }
    let mut gx = vec![T::zero(); y.numel()];
    for ((gxp, py), pg) in gx
        .chunks_exact_mut(c)
        .zip(y.data().chunks_exact(c))
        .zip(grad_out.data().chunks_exact(c))
    {
        for ch in 0..c {
            gxp[ch] = if norms[ch] > eps {
                (pg[ch] - py[ch] * proj[ch]) / norms[ch]
            } else {
                pg[ch] / eps
            };
        }
    }
    Tensor::new(y.shape().to_vec(), gx)
}

/// `G[i, j] = sum_p key[p, i] * query[p, j]` for `[H, W, c]` inputs; shape `[c, c]`.
pub fn channel_gram<T: Element>(key: &Tensor<T>, query: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, c) = key.hwc("channel_gram key")?;
    same_shape(key, query, "channel_gram")?;
    let n = key.numel() / c;
    let mut g = vec![T::zero(); c * c];
    gemm_acc(c, n, c, key.data(), View::new(0, 1, c), query.data(), View::new(0, c, 1), &mut g, View::new(0, c, 1));
    Tensor::new(vec![c, c], g)
}

pub fn channel_gram_backward<T: Element>(
    key: &Tensor<T>,
    query: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, _, c) = key.hwc("channel_gram key")?;
    expect_shape(grad_out, &[c, c], "channel_gram grad")?;
    let gd = grad_out.data();
    let n = key.numel() / c;
    let rows = View::new(0, c, 1);
    let mut gk = vec![T::zero(); key.numel()];
    let mut gq = vec![T::zero(); query.numel()];
    // gk = Q G^T, gq = K G
    gemm_acc(n, c, c, query.data(), rows, gd, View::new(0, 1, c), &mut gk, rows);
    gemm_acc(n, c, c, key.data(), rows, gd, View::new(0, c, 1), &mut gq, rows);
    Ok((
        Tensor::new(key.shape().to_vec(), gk)?,
        Tensor::new(query.shape().to_vec(), gq)?,
    ))
}

/// `out[p, i] = sum_j attn[i, j] * value[p, j]`.
pub fn attend<T: Element>(attn: &Tensor<T>, value: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = value.hwc("attend value")?;
    expect_shape(attn, &[c, c], "attend map")?;
    let rows = View::new(0, c, 1);
    let mut out = vec![T::zero(); value.numel()];
    // out = V A^T
    gemm_acc(h * w, c, c, value.data(), rows, attn.data(), View::new(0, 1, c), &mut out, rows);
    Tensor::new(vec![h, w, c], out)
}

pub fn attend_backward<T: Element>(
    attn: &Tensor<T>,
    value: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, _, c) = value.hwc("attend value")?;
    same_shape(value, grad_out, "attend grad")?;
    let n = value.numel() / c;
    let rows = View::new(0, c, 1);
    let mut ga = vec![T::zero(); c * c];
    let mut gv = vec![T::zero(); value.numel()];
    // ga = G^T V, gv = G A
    gemm_acc(c, n, c, grad_out.data(), View::new(0, 1, c), value.data(), rows, &mut ga, rows);
    gemm_acc(n, c, c, grad_out.data(), rows, attn.data(), rows, &mut gv, rows);
    Ok((Tensor::new(vec![c, c], ga)?, Tensor::new(value.shape().to_vec(), gv)?))
}

/// Multiplies every element of `x` by `scales[index]`.
pub fn scale_by_element<T: Element>(x: &Tensor<T>, scales: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
    let Some(&s) = scales.data().get(index) else {
        return Err(Error::invalid(format!(
            "scale_by_element: index {index} outside {} scales",
            scales.numel()
        )));
    };
    Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] * s))
}

// ---------------------------------------------------------------------------
// Reductions and losses

pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum())
}

pub fn mse<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(pred, target, "mse")?;
    let mut acc = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = (p - t).as_f64();
        acc += d * d;
    }
    Ok(Tensor::scalar(T::from_f64(acc / pred.numel() as f64)))
}
