//! Low-level numeric kernels shared by the tape ops: im2col convolution,
//! same-padded max pooling and 2x bilinear resampling.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4, ArrayViewMut3};

use crate::scalar::Real;

pub fn conv_out_size(h: usize, k: usize, pad: usize, stride: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unfold one sample (C, H, W) into a (C*k*k, Ho*Wo) patch matrix.
pub fn im2col<F: Real>(
    x: &ArrayView3<F>,
    k: usize,
    pad: usize,
    stride: usize,
) -> Array2<F> {
    let (c_in, h, w) = x.dim();
    let ho = conv_out_size(h, k, pad, stride);
    let wo = conv_out_size(w, k, pad, stride);
    let mut cols = Array2::<F>::zeros((c_in * k * k, ho * wo));
    // per-sample views of a batched tensor are not always standard layout
    let owned;
    let xs = match x.as_slice() {
        Some(s) => s,
        None => {
            owned = x.to_owned();
            owned.as_slice().expect("contiguous cols")
        }
    };
    let cs = cols.as_slice_mut().expect("contiguous cols");
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_base = (c * h + iy as usize) * w;
                    let dst_base = row_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[dst_base + ox] = xs[src_base + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a (C*k*k, Ho*Wo) patch-gradient matrix back onto a (C, H, W) image,
/// accumulating overlaps.
pub fn col2im_acc<F: Real>(
    cols: &Array2<F>,
    mut dx: ArrayViewMut3<F>,
    k: usize,
    pad: usize,
    stride: usize,
) {
    let (c_in, h, w) = dx.dim();
    let ho = conv_out_size(h, k, pad, stride);
    let wo = conv_out_size(w, k, pad, stride);
    let cs = cols.as_slice().expect("contiguous cols");
    let dxs = dx.as_slice_mut().expect("contiguous grad");
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let row_base = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (c * h + iy as usize) * w;
                    let src_base = row_base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dxs[dst_base + ix as usize] += cs[src_base + ox];
                    }
                }
            }
        }
    }
}

/// Batched convolution. `w` is (Cout, Cin, k, k), bias (if any) is added by
/// the caller. Returns (N, Cout, Ho, Wo).
pub fn conv2d_forward<F: Real>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    pad: usize,
    stride: usize,
) -> Array4<F> {
    let (n, _c_in, h, wid) = x.dim();
    let (c_out, c_in_w, k, _) = w.dim();
    let ho = conv_out_size(h, k, pad, stride);
    let wo = conv_out_size(wid, k, pad, stride);
    let w2 = w
        .to_shape((c_out, c_in_w * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut out = Array4::<F>::zeros((n, c_out, ho, wo));
    for i in 0..n {
        let cols = im2col(&x.slice(s![i, .., .., ..]), k, pad, stride);
        let prod = w2.dot(&cols); // (Cout, Ho*Wo)
        let prod3 = prod.into_shape_with_order((c_out, ho, wo)).unwrap();
        out.slice_mut(s![i, .., .., ..]).assign(&prod3);
    }
    out
}

/// Gradients of conv2d. Returns (dx, dw); the bias gradient is the spatial
/// sum of dout and is handled by the caller.
pub fn conv2d_backward<F: Real>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    dout: &ArrayView4<F>,
    pad: usize,
    stride: usize,
) -> (Array4<F>, Array4<F>) {
    let (n, c_in, h, wid) = x.dim();
    let (c_out, _, k, _) = w.dim();
    let (_, _, ho, wo) = dout.dim();
    let w2 = w
        .to_shape((c_out, c_in * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut dx = Array4::<F>::zeros((n, c_in, h, wid));
    let mut dw2 = Array2::<F>::zeros((c_out, c_in * k * k));
    for i in 0..n {
        let cols = im2col(&x.slice(s![i, .., .., ..]), k, pad, stride);
        let dout2 = dout
            .slice(s![i, .., .., ..])
            .to_shape((c_out, ho * wo))
            .unwrap()
            .to_owned();
        dw2 = dw2 + dout2.dot(&cols.t());
        let dcols = w2.t().dot(&dout2);
        col2im_acc(&dcols, dx.slice_mut(s![i, .., .., ..]), k, pad, stride);
    }
    let dw = dw2.into_shape_with_order((c_out, c_in, k, k)).unwrap();
    (dx, dw)
}

/// Same-padded max pool (stride 1, odd kernel). Returns the pooled map and
/// the flat argmax index (iy * W + ix) per output element.
pub fn maxpool_same_forward<F: Real>(
    x: &ArrayView4<F>,
    k: usize,
) -> (Array4<F>, Vec<u32>) {
    let (n, c, h, w) = x.dim();
    let pad = k / 2;
    let mut out = Array4::<F>::zeros((n, c, h, w));
    let mut argmax = vec![0u32; n * c * h * w];
    for i in 0..n {
        for ch in 0..c {
            let plane = x.slice(s![i, ch, .., ..]);
            let ps = plane.as_slice().expect("contiguous plane");
            for oy in 0..h {
                let y_lo = oy.saturating_sub(pad);
                let y_hi = (oy + pad).min(h - 1);
                for ox in 0..w {
                    let x_lo = ox.saturating_sub(pad);
                    let x_hi = (ox + pad).min(w - 1);
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0u32;
                    for iy in y_lo..=y_hi {
                        for ix in x_lo..=x_hi {
                            let v = ps[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = (iy * w + ix) as u32;
                            }
                        }
                    }
                    out[[i, ch, oy, ox]] = best;
                    argmax[((i * c + ch) * h + oy) * w + ox] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_same_backward<F: Real>(
    dout: &ArrayView4<F>,
    argmax: &[u32],
) -> Array4<F> {
    let (n, c, h, w) = dout.dim();
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    let ds = dout.as_slice().expect("contiguous dout");
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for o in 0..h * w {
                dxs[base + argmax[base + o] as usize] += ds[base + o];
            }
        }
    }
    dx
}

/// Per-axis source indices and weights of 2x bilinear upsampling
/// (half-pixel centers, edges clamped).
fn upsample_taps(len_in: usize) -> Vec<(usize, usize, f64, f64)> {
    let mut taps = Vec::with_capacity(2 * len_in);
    for o in 0..2 * len_in {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let floor = src.floor();
        let frac = src - floor;
        let i0 = floor.max(0.0) as usize;
        let i1 = ((floor as isize + 1).max(0) as usize).min(len_in - 1);
        let i0 = i0.min(len_in - 1);
        taps.push((i0, i1, 1.0 - frac, frac));
    }
    taps
}

pub fn upsample2x_forward<F: Real>(x: &ArrayView4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = Array4::<F>::zeros((n, c, 2 * h, 2 * w));
    for i in 0..n {
        for ch in 0..c {
            let plane = x.slice(s![i, ch, .., ..]);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let v = plane[[y0, x0]] * F::real(wy0 * wx0)
                        + plane[[y0, x1]] * F::real(wy0 * wx1)
                        + plane[[y1, x0]] * F::real(wy1 * wx0)
                        + plane[[y1, x1]] * F::real(wy1 * wx1);
                    out[[i, ch, oy, ox]] = v;
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward<F: Real>(dout: &ArrayView4<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c, _, _) = dout.dim();
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            let mut plane = dx.slice_mut(s![i, ch, .., ..]);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let g = dout[[i, ch, oy, ox]];
                    plane[[y0, x0]] += g * F::real(wy0 * wx0);
                    plane[[y0, x1]] += g * F::real(wy0 * wx1);
                    plane[[y1, x0]] += g * F::real(wy1 * wx0);
                    plane[[y1, x1]] += g * F::real(wy1 * wx1);
                }
            }
        }
    }
    dx
}

/// Direct bilinear resize to an arbitrary size (used for dataset resizing,
/// not part of the differentiable graph).
pub fn resize_bilinear<F: Real>(x: &ArrayView3<F>, h_out: usize, w_out: usize) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut out = Array3::<F>::zeros((c, h_out, w_out));
    let sy = h as f64 / h_out as f64;
    let sx = w as f64 / w_out as f64;
    for oy in 0..h_out {
        let src_y = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (src_y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = src_y - y0 as f64;
        for ox in 0..w_out {
            let src_x = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (src_x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = src_x - x0 as f64;
            for ch in 0..c {
                let v = x[[ch, y0, x0]].to_f64_() * (1.0 - fy) * (1.0 - fx)
                    + x[[ch, y0, x1]].to_f64_() * (1.0 - fy) * fx
                    + x[[ch, y1, x0]].to_f64_() * fy * (1.0 - fx)
                    + x[[ch, y1, x1]].to_f64_() * fy * fx;
                out[[ch, oy, ox]] = F::real(v);
            }
        }
    }
    out
}
