//! Forward and backward kernels on raw NCHW buffers.
//!
//! Everything here is single-threaded and iterates in a fixed order, so a
//! given input always produces bit-identical output.

use crate::{Real, Result, Tensor, TensorError};

/// Spatial output size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

// Half-open range of output columns whose tap `kj` lands inside the input row.
fn valid_cols(kj: usize, stride: usize, padding: usize, width: usize, out_w: usize) -> (usize, usize) {
    let start = if kj >= padding {
        0
    } else {
        (padding - kj).div_ceil(stride)
    };
    if width + padding < kj + 1 {
        return (0, 0);
    }
    let end = ((width - 1 + padding - kj) / stride + 1).min(out_w);
    (start.min(end), end)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let plane_len = h * w;
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &img[ci * plane_len..(ci + 1) * plane_len];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * hw_out..][..hw_out];
                let (ox0, ox1) = valid_cols(kj, stride, padding, w, wo);
                for oy in 0..ho {
                    let out = &mut row[oy * wo..(oy + 1) * wo];
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h || ox0 >= ox1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..ox0].fill(T::zero());
                    out[ox1..].fill(T::zero());
                    if stride == 1 {
                        let ix0 = ox0 + kj - padding;
                        out[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate().take(ox1).skip(ox0) {
                            *o = src[ox * stride + kj - padding];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    img: &mut [T],
) {
    let plane_len = h * w;
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut img[ci * plane_len..(ci + 1) * plane_len];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * hw_out..][..hw_out];
                let (ox0, ox1) = valid_cols(kj, stride, padding, w, wo);
                if ox0 >= ox1 {
                    continue;
                }
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        let ix = ox * stride + kj - padding;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution with square kernels and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, geom: ConvGeometry) -> Result<ConvDims> {
    let (n, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c || kh != kw {
        return Err(TensorError::Shape {
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let k = kh;
    let ho = conv_out_size(h, k, geom.stride, geom.padding);
    let wo = conv_out_size(w, k, geom.stride, geom.padding);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvDims {
            n,
            c,
            h,
            w,
            o,
            k,
            ho,
            wo,
        }),
        _ => Err(TensorError::Shape {
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        }),
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, weight, geom)?;
    if let Some(b) = bias {
        if b.shape() != [d.o] {
            return Err(TensorError::Shape {
                left: b.shape().to_vec(),
                right: vec![d.o],
            });
        }
    }
    let ckk = d.c * d.k * d.k;
    let hw_out = d.ho * d.wo;
    let mut out = Tensor::zeros(&[d.n, d.o, d.ho, d.wo]);
    let mut col = vec![T::zero(); ckk * hw_out];
    let in_len = d.c * d.h * d.w;
    let wdata = weight.data();
    for ni in 0..d.n {
        let img = &x.data()[ni * in_len..(ni + 1) * in_len];
        let dst = &mut out.data_mut()[ni * d.o * hw_out..(ni + 1) * d.o * hw_out];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(hw_out).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let direct = d.k == 1 && geom.stride == 1 && geom.padding == 0;
        let cols: &[T] = if direct {
            img
        } else {
            im2col(img, d.c, d.h, d.w, d.k, geom.stride, geom.padding, d.ho, d.wo, &mut col);
            &col
        };
        T::gemm(
            d.o,
            ckk,
            hw_out,
            T::one(),
            wdata,
            ckk as isize,
            1,
            cols,
            hw_out as isize,
            1,
            beta,
            dst,
            hw_out as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of a convolution; each output is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let d = conv_dims(x, weight, geom)?;
    let ckk = d.c * d.k * d.k;
    let hw_out = d.ho * d.wo;
    let in_len = d.c * d.h * d.w;
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| Tensor::zeros(weight.shape()));
    let mut db = need[2].then(|| Tensor::zeros(&[d.o]));
    let direct = d.k == 1 && geom.stride == 1 && geom.padding == 0;
    let mut col = vec![T::zero(); ckk * hw_out];
    for ni in 0..d.n {
        let gy = &grad_out.data()[ni * d.o * hw_out..(ni + 1) * d.o * hw_out];
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in gy.chunks(hw_out).enumerate() {
                let s: T = chunk.iter().copied().sum();
                db.data_mut()[oc] = db.data()[oc] + s;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let img = &x.data()[ni * in_len..(ni + 1) * in_len];
            let cols: &[T] = if direct {
                img
            } else {
                im2col(img, d.c, d.h, d.w, d.k, geom.stride, geom.padding, d.ho, d.wo, &mut col);
                &col
            };
            T::gemm(
                d.o,
                hw_out,
                ckk,
                T::one(),
                gy,
                hw_out as isize,
                1,
                cols,
                1,
                hw_out as isize,
                T::one(),
                dw.data_mut(),
                ckk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[ni * in_len..(ni + 1) * in_len];
            if direct {
                T::gemm(
                    ckk,
                    d.o,
                    hw_out,
                    T::one(),
                    weight.data(),
                    1,
                    ckk as isize,
                    gy,
                    hw_out as isize,
                    1,
                    T::zero(),
                    dst,
                    hw_out as isize,
                    1,
                );
            } else {
                T::gemm(
                    ckk,
                    d.o,
                    hw_out,
                    T::one(),
                    weight.data(),
                    1,
                    ckk as isize,
                    gy,
                    hw_out as isize,
                    1,
                    T::zero(),
                    &mut col,
                    hw_out as isize,
                    1,
                );
                col2im(&col, d.c, d.h, d.w, d.k, geom.stride, geom.padding, d.ho, d.wo, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Per-(sample, channel) mean and inverse standard deviation.
fn instance_stats<T: Real>(x: &Tensor<T>, eps: T) -> Result<Vec<(T, T)>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = T::from_usize(hw).unwrap();
    Ok((0..n * c)
        .map(|plane| {
            let p = &x.data()[plane * hw..(plane + 1) * hw];
            let mean = p.iter().copied().sum::<T>() / count;
            let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            (mean, (var + eps).sqrt().recip())
        })
        .collect())
}

/// Instance normalization with per-channel affine parameters.
pub fn instance_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::Shape {
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let hw = h * w;
    let stats = instance_stats(x, eps)?;
    let mut out = x.clone();
    for (plane, (chunk, &(mean, inv))) in out.data_mut().chunks_mut(hw).zip(&stats).enumerate() {
        let ch = plane % c;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for v in chunk {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

pub fn instance_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (_, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = T::from_usize(hw).unwrap();
    let stats = instance_stats(x, eps)?;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for (plane, &(mean, inv)) in stats.iter().enumerate() {
        let ch = plane % c;
        let g = gamma.data()[ch];
        let xs = &x.data()[plane * hw..(plane + 1) * hw];
        let gy = &grad_out.data()[plane * hw..(plane + 1) * hw];
        let mut sum_gy = T::zero();
        let mut sum_gy_xhat = T::zero();
        for (&xv, &gv) in xs.iter().zip(gy) {
            let xhat = (xv - mean) * inv;
            sum_gy = sum_gy + gv;
            sum_gy_xhat = sum_gy_xhat + gv * xhat;
        }
        dgamma.data_mut()[ch] = dgamma.data()[ch] + sum_gy_xhat;
        dbeta.data_mut()[ch] = dbeta.data()[ch] + sum_gy;
        let dst = &mut dx.data_mut()[plane * hw..(plane + 1) * hw];
        for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gy) {
            let xhat = (xv - mean) * inv;
            *d = g * inv * (gv - sum_gy / count - xhat * sum_gy_xhat / count);
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn upsample_nearest2x_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for y in 0..2 * h {
            let srow = &src[(plane * h + y / 2) * w..][..w];
            let drow = &mut dst[(plane * 2 * h + y) * 2 * w..][..2 * w];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h2, w2) = grad_out.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let g = grad_out.data();
    let d = dx.data_mut();
    for plane in 0..n * c {
        for y in 0..h2 {
            for x in 0..w2 {
                let i = (plane * h + y / 2) * w + x / 2;
                d[i] = d[i] + g[(plane * h2 + y) * w2 + x];
            }
        }
    }
    Ok(dx)
}

/// 2x2 max pooling with stride 2; also returns the flat argmax of each window.
pub fn max_pool2x2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0; n * c * ho * wo];
    let src = x.data();
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (plane * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (plane * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out.data_mut()[o] = src[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

/// Per-sample Gram matrices `F Fᵀ / (C·H·W)` of an NCHW tensor, shape `[N, C, C]`.
pub fn gram_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let scale = T::one() / T::from_usize((c * hw).max(1)).unwrap();
    let mut out = Tensor::zeros(&[n, c, c]);
    for ni in 0..n {
        let f = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        T::gemm(
            c,
            hw,
            c,
            scale,
            f,
            hw as isize,
            1,
            f,
            1,
            hw as isize,
            T::zero(),
            &mut out.data_mut()[ni * c * c..(ni + 1) * c * c],
            c as isize,
            1,
        );
    }
    Ok(out)
}

pub fn gram_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let scale = T::one() / T::from_usize((c * hw).max(1)).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut sym = vec![T::zero(); c * c];
    for ni in 0..n {
        let g = &grad_out.data()[ni * c * c..(ni + 1) * c * c];
        for i in 0..c {
            for j in 0..c {
                sym[i * c + j] = g[i * c + j] + g[j * c + i];
            }
        }
        let f = &x.data()[ni * c * hw..(ni + 1) * c * hw];
        T::gemm(
            c,
            c,
            hw,
            scale,
            &sym,
            c as isize,
            1,
            f,
            hw as isize,
            1,
            T::zero(),
            &mut dx.data_mut()[ni * c * hw..(ni + 1) * c * hw],
            hw as isize,
            1,
        );
    }
    Ok(dx)
}

/// Channel-wise concatenation of NCHW tensors sharing N, H and W.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or(TensorError::Empty)?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(TensorError::Shape {
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total_c * hw);
    for ni in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            data.extend_from_slice(&p.data()[ni * pc * hw..(ni + 1) * pc * hw]);
        }
    }
    Tensor::new(&[n, total_c, h, w], data)
}

/// Splits a channel-concatenated gradient back into its parts.
pub fn split_channels<T: Real>(x: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.dims4()?;
    debug_assert_eq!(channels.iter().sum::<usize>(), c);
    let hw = h * w;
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
    for ni in 0..n {
        let mut offset = ni * c * hw;
        for (out, &pc) in outs.iter_mut().zip(channels) {
            out.extend_from_slice(&x.data()[offset..offset + pc * hw]);
            offset += pc * hw;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &pc)| Tensor::new(&[n, pc, h, w], d))
        .collect()
}
