//! Forward and backward kernels over plain tensors.
//!
//! These are the single source of truth for the math: the autodiff tape calls
//! them for both passes, and the no-gradient inference path calls the forward
//! kernels directly. Hot kernels (`conv2d` and its backward pair) split work
//! across disjoint output regions, so the parallel and sequential paths are
//! bitwise identical; the `*_seq` twins exist for the benchmark suite and as
//! the fallback when the `parallel` feature is off.

use crate::error::{Error, Result};
use crate::parallel::{fill_chunks, fill_chunks_seq};
use crate::scalar::Scalar;
use crate::tensor::{require_same_shape, Tensor};

pub(crate) fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape()))),
    }
}

pub(crate) fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::shape(op, format!("expected rank 4, got {:?}", t.shape()))),
    }
}

/// Output extent of a padded strided convolution along one axis.
pub fn conv_out_len(in_len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (in_len + 2 * pad - k) / stride + 1
}

/// Range of output positions whose receptive field stays inside the input:
/// all `o` in `lo..hi` with `0 <= o*stride + off < in_len`.
#[inline]
fn valid_out_span(out_len: usize, stride: usize, off: isize, in_len: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize + stride - 1) / stride
    };
    let max_i = in_len as isize - 1 - off;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i as usize) / stride + 1;
    (lo.min(out_len), hi.min(out_len))
}

struct Conv2dGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    stride: usize,
    pad: usize,
}

fn conv2d_geom<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGeom> {
    let (batch, c_in, h, w) = dims4("conv2d", input)?;
    let (c_out, kc, kh, kw) = dims4("conv2d", kernel)?;
    if kc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", c_in, kc),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {}x{} exceeds padded input {}x{}",
                kh,
                kw,
                h + 2 * pad,
                w + 2 * pad
            ),
        ));
    }
    Ok(Conv2dGeom {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        h_out: conv_out_len(h, kh, stride, pad),
        w_out: conv_out_len(w, kw, stride, pad),
        stride,
        pad,
    })
}

/// Unfolds one image `[C, H, W]` into the patch matrix `[C*kh*kw, N]` with
/// `N = h_out * w_out`; out-of-bounds taps stay zero.
fn im2col<T: Scalar>(g: &Conv2dGeom, image: &[T], col: &mut [T]) {
    let n = g.h_out * g.w_out;
    for v in col.iter_mut() {
        *v = T::zero();
    }
    for ci in 0..g.c_in {
        let in_c = ci * g.h * g.w;
        for r in 0..g.kh {
            let off_y = r as isize - g.pad as isize;
            let (oy_lo, oy_hi) = valid_out_span(g.h_out, g.stride, off_y, g.h);
            for s in 0..g.kw {
                let off_x = s as isize - g.pad as isize;
                let (ox_lo, ox_hi) = valid_out_span(g.w_out, g.stride, off_x, g.w);
                if ox_lo >= ox_hi {
                    continue;
                }
                let kk = (ci * g.kh + r) * g.kw + s;
                let row = &mut col[kk * n..(kk + 1) * n];
                let ix_lo = ((ox_lo * g.stride) as isize + off_x) as usize;
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * g.stride) as isize + off_y) as usize;
                    let src = in_c + iy * g.w + ix_lo;
                    let dst = oy * g.w_out + ox_lo;
                    if g.stride == 1 {
                        row[dst..dst + (ox_hi - ox_lo)]
                            .copy_from_slice(&image[src..src + (ox_hi - ox_lo)]);
                    } else {
                        for (i, slot) in row[dst..dst + (ox_hi - ox_lo)].iter_mut().enumerate() {
                            *slot = image[src + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// `out (m x n) += a (m x k) * b (k x n)`, k-major so each B row streams once
/// while the output tile stays cache-resident. The inner update runs over
/// independent lanes, so it vectorizes under strict float semantics.
fn gemm_accumulate<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for ki in 0..k {
        let brow = &b[ki * n..(ki + 1) * n];
        for mi in 0..m {
            let av = a[mi * k + ki];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[mi * n..(mi + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn conv2d_fill_image<T: Scalar>(g: &Conv2dGeom, input: &[T], kernel: &[T], b: usize, out: &mut [T]) {
    let n = g.h_out * g.w_out;
    let k = g.c_in * g.kh * g.kw;
    let image = &input[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
    let mut col = vec![T::zero(); k * n];
    im2col(g, image, &mut col);
    gemm_accumulate(out, kernel, &col, g.c_out, k, n);
}

/// 2D convolution with zero padding, no bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geom(input, kernel, stride, pad)?;
    let mut out = Tensor::zeros(&[g.batch, g.c_out, g.h_out, g.w_out]);
    let image = g.c_out * g.h_out * g.w_out;
    fill_chunks(out.data_mut(), image, |b, chunk| {
        conv2d_fill_image(&g, input.data(), kernel.data(), b, chunk)
    });
    Ok(out)
}

/// Sequential twin of [`conv2d`].
pub fn conv2d_seq<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geom(input, kernel, stride, pad)?;
    let mut out = Tensor::zeros(&[g.batch, g.c_out, g.h_out, g.w_out]);
    let image = g.c_out * g.h_out * g.w_out;
    fill_chunks_seq(out.data_mut(), image, |b, chunk| {
        conv2d_fill_image(&g, input.data(), kernel.data(), b, chunk)
    });
    Ok(out)
}

/// Folds a patch-matrix gradient back onto one image (the adjoint of
/// [`im2col`]); overlapping taps accumulate.
fn col2im_add<T: Scalar>(g: &Conv2dGeom, d_col: &[T], d_image: &mut [T]) {
    let n = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        let in_c = ci * g.h * g.w;
        for r in 0..g.kh {
            let off_y = r as isize - g.pad as isize;
            let (oy_lo, oy_hi) = valid_out_span(g.h_out, g.stride, off_y, g.h);
            for s in 0..g.kw {
                let off_x = s as isize - g.pad as isize;
                let (ox_lo, ox_hi) = valid_out_span(g.w_out, g.stride, off_x, g.w);
                if ox_lo >= ox_hi {
                    continue;
                }
                let kk = (ci * g.kh + r) * g.kw + s;
                let row = &d_col[kk * n..(kk + 1) * n];
                let ix_lo = ((ox_lo * g.stride) as isize + off_x) as usize;
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * g.stride) as isize + off_y) as usize;
                    let dst = in_c + iy * g.w + ix_lo;
                    let src = oy * g.w_out + ox_lo;
                    if g.stride == 1 {
                        let target = &mut d_image[dst..dst + (ox_hi - ox_lo)];
                        for (t, &v) in target.iter_mut().zip(&row[src..src + (ox_hi - ox_lo)]) {
                            *t += v;
                        }
                    } else {
                        for (i, &v) in row[src..src + (ox_hi - ox_lo)].iter().enumerate() {
                            d_image[dst + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_input_image<T: Scalar>(
    g: &Conv2dGeom,
    grad_out: &[T],
    kernel: &[T],
    b: usize,
    d_image: &mut [T],
) {
    let n = g.h_out * g.w_out;
    let k = g.c_in * g.kh * g.kw;
    let g_img = &grad_out[b * g.c_out * n..(b + 1) * g.c_out * n];
    // d_col = kernel^T (k x m) * grad (m x n)
    let mut d_col = vec![T::zero(); k * n];
    for mi in 0..g.c_out {
        let grow = &g_img[mi * n..(mi + 1) * n];
        let krow = &kernel[mi * k..(mi + 1) * k];
        for (kk, &kv) in krow.iter().enumerate() {
            if kv == T::zero() {
                continue;
            }
            let drow = &mut d_col[kk * n..(kk + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += kv * gv;
            }
        }
    }
    col2im_add(g, &d_col, d_image);
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_shape);
    let g = conv2d_geom(&probe, kernel, stride, pad)?;
    let mut d_in = Tensor::zeros(input_shape);
    let image = g.c_in * g.h * g.w;
    let go = grad_out.data();
    fill_chunks(d_in.data_mut(), image, |b, chunk| {
        conv2d_bwd_input_image(&g, go, kernel.data(), b, chunk)
    });
    Ok(d_in)
}

/// Sequential twin of [`conv2d_backward_input`].
pub fn conv2d_backward_input_seq<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_shape);
    let g = conv2d_geom(&probe, kernel, stride, pad)?;
    let mut d_in = Tensor::zeros(input_shape);
    let image = g.c_in * g.h * g.w;
    let go = grad_out.data();
    fill_chunks_seq(d_in.data_mut(), image, |b, chunk| {
        conv2d_bwd_input_image(&g, go, kernel.data(), b, chunk)
    });
    Ok(d_in)
}

/// Per-image kernel-gradient contribution: `grad (m x n) * col^T (n x k)`.
fn conv2d_bwd_kernel_partial<T: Scalar>(
    g: &Conv2dGeom,
    grad_out: &[T],
    input: &[T],
    b: usize,
) -> Vec<T> {
    let n = g.h_out * g.w_out;
    let k = g.c_in * g.kh * g.kw;
    let image = &input[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
    let g_img = &grad_out[b * g.c_out * n..(b + 1) * g.c_out * n];
    let mut col = vec![T::zero(); k * n];
    im2col(g, image, &mut col);
    // Transposed patches make the inner update a contiguous row operation.
    let mut col_t = vec![T::zero(); n * k];
    for kk in 0..k {
        for ni in 0..n {
            col_t[ni * k + kk] = col[kk * n + ni];
        }
    }
    let mut partial = vec![T::zero(); g.c_out * k];
    for ni in 0..n {
        let crow = &col_t[ni * k..(ni + 1) * k];
        for mi in 0..g.c_out {
            let gv = g_img[mi * n + ni];
            if gv == T::zero() {
                continue;
            }
            let prow = &mut partial[mi * k..(mi + 1) * k];
            for (p, &cv) in prow.iter_mut().zip(crow) {
                *p += gv * cv;
            }
        }
    }
    partial
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_backward_kernel<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(kernel_shape);
    let g = conv2d_geom(input, &probe, stride, pad)?;
    let partials = crate::parallel::map_indexed(g.batch, |b| {
        conv2d_bwd_kernel_partial(&g, grad_out.data(), input.data(), b)
    });
    Ok(reduce_kernel_partials(kernel_shape, partials))
}

/// Sequential twin of [`conv2d_backward_kernel`].
pub fn conv2d_backward_kernel_seq<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(kernel_shape);
    let g = conv2d_geom(input, &probe, stride, pad)?;
    let partials = crate::parallel::map_indexed_seq(g.batch, |b| {
        conv2d_bwd_kernel_partial(&g, grad_out.data(), input.data(), b)
    });
    Ok(reduce_kernel_partials(kernel_shape, partials))
}

/// Sums per-image contributions in batch order (thread-count independent).
fn reduce_kernel_partials<T: Scalar>(kernel_shape: &[usize], partials: Vec<Vec<T>>) -> Tensor<T> {
    let mut d_k = Tensor::zeros(kernel_shape);
    for partial in partials {
        for (d, &p) in d_k.data_mut().iter_mut().zip(&partial) {
            *d += p;
        }
    }
    d_k
}

fn conv1d_check<T: Scalar>(kernel: &Tensor<T>) -> Result<usize> {
    let k = match *kernel.shape() {
        [k] => k,
        _ => {
            return Err(Error::shape(
                "conv1d_channels",
                format!("kernel must be rank 1, got {:?}", kernel.shape()),
            ))
        }
    };
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "conv1d_channels kernel size must be odd, got {}",
            k
        )));
    }
    Ok(k)
}

fn conv1d_row<T: Scalar>(row: &[T], kernel: &[T], out: &mut [T]) {
    let c = row.len();
    let k = kernel.len();
    let pad = (k - 1) / 2;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (j, &kv) in kernel.iter().enumerate() {
            let src = i as isize + j as isize - pad as isize;
            if src >= 0 && (src as usize) < c {
                acc += kv * row[src as usize];
            }
        }
        *o = acc;
    }
}

/// 1D convolution across the channel axis with zero padding `(k-1)/2` and no
/// bias; the cross-channel interaction step of the channel-attention module.
pub fn conv1d_channels<T: Scalar>(v: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    conv1d_check(kernel)?;
    if v.shape().len() != 1 {
        return Err(Error::shape(
            "conv1d_channels",
            format!("expected rank 1 input, got {:?}", v.shape()),
        ));
    }
    let mut out = Tensor::zeros(v.shape());
    conv1d_row(v.data(), kernel.data(), out.data_mut());
    Ok(out)
}

/// [`conv1d_channels`] applied independently to every row of a `[B, C]` tensor.
pub fn conv1d_rows<T: Scalar>(v: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    conv1d_check(kernel)?;
    let (b, c) = dims2("conv1d_rows", v)?;
    let mut out = Tensor::zeros(&[b, c]);
    for (orow, irow) in out.data_mut().chunks_mut(c).zip(v.data().chunks(c)) {
        conv1d_row(irow, kernel.data(), orow);
    }
    Ok(out)
}

/// Gradients of [`conv1d_rows`]: `(d_input, d_kernel)`.
pub fn conv1d_rows_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    v: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c) = dims2("conv1d_rows_backward", v)?;
    let k = kernel.len();
    let pad = (k - 1) / 2;
    let mut d_in = Tensor::zeros(&[b, c]);
    let mut d_k = Tensor::zeros(&[k]);
    let g = grad_out.data();
    let kd = kernel.data();
    let vd = v.data();
    for row in 0..b {
        let base = row * c;
        for i in 0..c {
            let gi = g[base + i];
            for (j, &kv) in kd.iter().enumerate() {
                let src = i as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < c {
                    d_in.data_mut()[base + src as usize] += kv * gi;
                    d_k.data_mut()[j] += gi * vd[base + src as usize];
                }
            }
        }
    }
    Ok((d_in, d_k))
}

/// Spatial mean per channel: `[B, C, H, W] -> [B, C]`.
pub fn global_average_pool<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4("global_average_pool", f)?;
    if h * w == 0 {
        return Err(Error::shape("global_average_pool", "empty spatial extent"));
    }
    let inv = T::from_f64(1.0) / T::from_f64((h * w) as f64);
    let mut out = Tensor::zeros(&[b, c]);
    let data = f.data();
    for (plane_idx, o) in out.data_mut().iter_mut().enumerate() {
        let base = plane_idx * h * w;
        let mut acc = T::zero();
        for v in &data[base..base + h * w] {
            acc += *v;
        }
        *o = acc * inv;
    }
    Ok(out)
}

/// Gradient of [`global_average_pool`] with respect to its input.
pub fn global_average_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let inv = T::from_f64(1.0) / T::from_f64((h * w) as f64);
    let mut d_in = Tensor::zeros(input_shape);
    for (plane_idx, chunk) in d_in.data_mut().chunks_mut(h * w).enumerate() {
        let g = grad_out.data()[plane_idx] * inv;
        for v in chunk {
            *v = g;
        }
    }
    Ok(d_in)
}

/// Fully connected layer: `out = x W^T + b` with `x: [B, D]`, `w: [N, D]`, `b: [N]`.
pub fn affine<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, d) = dims2("affine", x)?;
    let (n, wd) = dims2("affine", w)?;
    if wd != d || b.len() != n {
        return Err(Error::shape(
            "affine",
            format!(
                "x {:?} with w {:?} and b {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    let mut out = Tensor::zeros(&[batch, n]);
    let xd = x.data();
    let wdt = w.data();
    let bd = b.data();
    for i in 0..batch {
        let xrow = &xd[i * d..(i + 1) * d];
        let orow = &mut out.data_mut()[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let wrow = &wdt[j * d..(j + 1) * d];
            let mut acc = bd[j];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += *xv * *wv;
            }
            *o = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`affine`]: `(d_x, d_w, d_b)`.
pub fn affine_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (batch, d) = dims2("affine_backward", x)?;
    let (n, _) = dims2("affine_backward", w)?;
    let g = grad_out.data();
    let mut d_x = Tensor::zeros(&[batch, d]);
    let mut d_w = Tensor::zeros(&[n, d]);
    let mut d_b = Tensor::zeros(&[n]);
    for i in 0..batch {
        let grow = &g[i * n..(i + 1) * n];
        let xrow = &x.data()[i * d..(i + 1) * d];
        {
            let dxrow = &mut d_x.data_mut()[i * d..(i + 1) * d];
            for (j, &gv) in grow.iter().enumerate() {
                let wrow = &w.data()[j * d..(j + 1) * d];
                for (dx, wv) in dxrow.iter_mut().zip(wrow) {
                    *dx += gv * *wv;
                }
            }
        }
        for (j, &gv) in grow.iter().enumerate() {
            let dwrow = &mut d_w.data_mut()[j * d..(j + 1) * d];
            for (dw, xv) in dwrow.iter_mut().zip(xrow) {
                *dw += gv * *xv;
            }
            d_b.data_mut()[j] += gv;
        }
    }
    Ok((d_x, d_w, d_b))
}

/// Numerically stable softmax over the last axis of a rank-1 or rank-2 tensor.
pub fn softmax<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, n) = match *z.shape() {
        [n] => (1, n),
        [b, n] => (b, n),
        _ => {
            return Err(Error::shape(
                "softmax",
                format!("expected rank 1 or 2, got {:?}", z.shape()),
            ))
        }
    };
    if n == 0 {
        return Err(Error::shape("softmax", "empty input"));
    }
    let mut out = Tensor::zeros(z.shape());
    for (orow, irow) in out
        .data_mut()
        .chunks_mut(n)
        .zip(z.data().chunks(n))
        .take(rows)
    {
        let max = irow.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(irow) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// Gradient of [`softmax`] given its output `y`: `d_z = y * (g - <g, y>)` per row.
pub fn softmax_backward<T: Scalar>(grad_out: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *y.shape().last().unwrap();
    let mut d_z = Tensor::zeros(y.shape());
    for ((drow, grow), yrow) in d_z
        .data_mut()
        .chunks_mut(n)
        .zip(grad_out.data().chunks(n))
        .zip(y.data().chunks(n))
    {
        let mut dot = T::zero();
        for (g, yv) in grow.iter().zip(yrow) {
            dot += *g * *yv;
        }
        for ((d, g), yv) in drow.iter_mut().zip(grow).zip(yrow) {
            *d = *yv * (*g - dot);
        }
    }
    Ok(d_z)
}

/// Elementwise logistic function; output strictly in (0, 1) for finite input.
pub fn sigmoid<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(z.shape());
    for (o, &v) in out.data_mut().iter_mut().zip(z.data()) {
        *o = T::one() / (T::one() + (-v).exp());
    }
    out
}

/// Elementwise rectifier.
pub fn relu<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(z.shape());
    for (o, &v) in out.data_mut().iter_mut().zip(z.data()) {
        *o = if v > T::zero() { v } else { T::zero() };
    }
    out
}

/// Channel-axis concatenation of two feature maps with equal batch and
/// spatial extents; `a`'s channels come first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, ca, ha, wa) = dims4("concat_channels", a)?;
    let (bb, cb, hb, wb) = dims4("concat_channels", b)?;
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[ba, ca + cb, ha, wa]);
    let plane = ha * wa;
    let (asz, bsz) = (ca * plane, cb * plane);
    for i in 0..ba {
        let dst = &mut out.data_mut()[i * (asz + bsz)..(i + 1) * (asz + bsz)];
        dst[..asz].copy_from_slice(&a.data()[i * asz..(i + 1) * asz]);
        dst[asz..].copy_from_slice(&b.data()[i * bsz..(i + 1) * bsz]);
    }
    Ok(out)
}

/// Elementwise product of same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_same_shape("mul", a.shape(), b.shape())?;
    let mut out = Tensor::zeros(a.shape());
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = x * y;
    }
    Ok(out)
}

/// Elementwise sum of same-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_same_shape("add", a.shape(), b.shape())?;
    let mut out = Tensor::zeros(a.shape());
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = x + y;
    }
    Ok(out)
}

/// Elementwise difference `a - b` of same-shape tensors.
pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_same_shape("sub", a.shape(), b.shape())?;
    let mut out = Tensor::zeros(a.shape());
    for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = x - y;
    }
    Ok(out)
}

/// Multiplies every element by a constant.
pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let mut out = Tensor::zeros(a.shape());
    for (o, &x) in out.data_mut().iter_mut().zip(a.data()) {
        *o = x * c;
    }
    out
}

/// Adds a constant to every element.
pub fn add_scalar<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let mut out = Tensor::zeros(a.shape());
    for (o, &x) in out.data_mut().iter_mut().zip(a.data()) {
        *o = x + c;
    }
    out
}

/// Rescales each channel plane of `f: [B, C, H, W]` by `weights: [B, C]`.
pub fn scale_channels<T: Scalar>(f: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4("scale_channels", f)?;
    let (wb, wc) = dims2("scale_channels", weights)?;
    if wb != b || wc != c {
        return Err(Error::shape(
            "scale_channels",
            format!("map {:?} with weights {:?}", f.shape(), weights.shape()),
        ));
    }
    let mut out = Tensor::zeros(f.shape());
    let plane = h * w;
    for (idx, (ochunk, ichunk)) in out
        .data_mut()
        .chunks_mut(plane)
        .zip(f.data().chunks(plane))
        .enumerate()
    {
        let a = weights.data()[idx];
        for (o, &v) in ochunk.iter_mut().zip(ichunk) {
            *o = a * v;
        }
    }
    Ok(out)
}

/// Gradients of [`scale_channels`]: `(d_f, d_weights)`.
pub fn scale_channels_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    f: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, _, h, w) = dims4("scale_channels_backward", f)?;
    let plane = h * w;
    let mut d_f = Tensor::zeros(f.shape());
    let mut d_w = Tensor::zeros(weights.shape());
    for (idx, ((dchunk, gchunk), fchunk)) in d_f
        .data_mut()
        .chunks_mut(plane)
        .zip(grad_out.data().chunks(plane))
        .zip(f.data().chunks(plane))
        .enumerate()
    {
        let a = weights.data()[idx];
        let mut acc = T::zero();
        for ((d, &g), &v) in dchunk.iter_mut().zip(gchunk).zip(fchunk) {
            *d = a * g;
            acc += g * v;
        }
        d_w.data_mut()[idx] = acc;
    }
    Ok((d_f, d_w))
}

/// Selects whole leading-axis slices by index: `out[m] = x[idx[m]]`.
pub fn gather_leading<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    if x.shape().is_empty() {
        return Err(Error::shape("gather_leading", "rank 0 input"));
    }
    let b = x.shape()[0];
    let item: usize = x.shape()[1..].iter().product();
    for &i in idx {
        if i >= b {
            return Err(Error::shape(
                "gather_leading",
                format!("index {} out of range 0..{}", i, b),
            ));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    let mut out = Tensor::zeros(&shape);
    for (m, &i) in idx.iter().enumerate() {
        out.data_mut()[m * item..(m + 1) * item]
            .copy_from_slice(&x.data()[i * item..(i + 1) * item]);
    }
    Ok(out)
}

/// One element per row: `out[m] = x[m, idx[m]]` for `x: [M, N]`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (m, n) = dims2("gather_rows", x)?;
    if idx.len() != m {
        return Err(Error::shape(
            "gather_rows",
            format!("{} rows but {} indices", m, idx.len()),
        ));
    }
    let mut out = Tensor::zeros(&[m]);
    for (row, &col) in idx.iter().enumerate() {
        if col >= n {
            return Err(Error::shape(
                "gather_rows",
                format!("column {} out of range 0..{}", col, n),
            ));
        }
        out.data_mut()[row] = x.data()[row * n + col];
    }
    Ok(out)
}

/// Elementwise `ln(max(x, floor))`; the clamp keeps cross-entropy finite.
pub fn log_clamped<T: Scalar>(x: &Tensor<T>, floor: T) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o = if v > floor { v.ln() } else { floor.ln() };
    }
    out
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}
