//! CPU tensor primitives for the U-Net: stride-1 same-padding convolution via
//! im2col + GEMM, 2x2 stride-2 transposed convolution, 2x2 max pooling, ReLU,
//! instance normalization and channel concatenation. All layouts are NCHW.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};

/// im2col for stride-1 convolution with symmetric zero padding.
/// Output shape (IC*K*K, OH*OW) with OH = H + 2p - K + 1.
fn im2col(x: &ndarray::ArrayView3<f32>, k: usize, pad: usize, col: &mut Array2<f32>) {
    let (ic, h, w) = x.dim();
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    col.fill(0.0);
    let xs = x.as_slice().expect("im2col: input must be contiguous");
    let cs = col.as_slice_mut().expect("im2col: col must be contiguous");
    for c in 0..ic {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                // valid output columns: iw = ow' + kj - pad in [0, w)
                let lo = pad.saturating_sub(kj);
                let hi = (w + pad - kj).min(ow);
                if lo >= hi {
                    continue;
                }
                for o_row in 0..oh {
                    let ih = o_row + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    let iw0 = lo + kj - pad;
                    let src = (c * h + ih) * w + iw0;
                    let dst = row * (oh * ow) + o_row * ow + lo;
                    let n = hi - lo;
                    cs[dst..dst + n].copy_from_slice(&xs[src..src + n]);
                }
            }
        }
    }
}

/// Scatter-add the column matrix back into an image gradient.
fn col2im(col: &Array2<f32>, k: usize, pad: usize, dx: &mut ndarray::ArrayViewMut3<f32>) {
    let (ic, h, w) = dx.dim();
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let cs = col.as_slice().expect("col2im: col must be contiguous");
    let xs = dx.as_slice_mut().expect("col2im: dx must be contiguous");
    for c in 0..ic {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let lo = pad.saturating_sub(kj);
                let hi = (w + pad - kj).min(ow);
                if lo >= hi {
                    continue;
                }
                for o_row in 0..oh {
                    let ih = o_row + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    let iw0 = lo + kj - pad;
                    let dst = (c * h + ih) * w + iw0;
                    let src = row * (oh * ow) + o_row * ow + lo;
                    for i in 0..(hi - lo) {
                        xs[dst + i] += cs[src + i];
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution. `w` has shape (OC, IC, K, K), `b` shape (OC).
pub fn conv2d_forward(x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>, pad: usize) -> Array4<f32> {
    let (batch, ic, h, wd) = x.dim();
    let (oc, wic, k, _) = w.dim();
    assert_eq!(ic, wic, "conv2d: channel mismatch");
    let oh = h + 2 * pad + 1 - k;
    let ow = wd + 2 * pad + 1 - k;
    let wmat: ArrayView2<f32> = w.view().into_shape_with_order((oc, ic * k * k)).unwrap();
    let mut col = Array2::<f32>::zeros((ic * k * k, oh * ow));
    let mut y = Array4::<f32>::zeros((batch, oc, oh, ow));
    for bi in 0..batch {
        im2col(&x.index_axis(Axis(0), bi), k, pad, &mut col);
        let mut y2 = y
            .index_axis_mut(Axis(0), bi)
            .into_shape_with_order((oc, oh * ow))
            .unwrap();
        general_mat_mul(1.0, &wmat, &col.view(), 0.0, &mut y2);
        for c in 0..oc {
            y2.row_mut(c).mapv_inplace(|v| v + b[c]);
        }
    }
    y
}

/// Backward pass of [`conv2d_forward`]. Returns (dx, dw, db).
pub fn conv2d_backward(
    x: &Array4<f32>,
    w: &Array4<f32>,
    dout: &Array4<f32>,
    pad: usize,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (batch, ic, _, _) = x.dim();
    let (oc, _, k, _) = w.dim();
    let (_, _, oh, ow) = dout.dim();
    let wmat: ArrayView2<f32> = w.view().into_shape_with_order((oc, ic * k * k)).unwrap();
    let mut col = Array2::<f32>::zeros((ic * k * k, oh * ow));
    let mut colgrad = Array2::<f32>::zeros((ic * k * k, oh * ow));
    let mut dx = Array4::<f32>::zeros(x.raw_dim());
    let mut dw2 = Array2::<f32>::zeros((oc, ic * k * k));
    let mut db = Array1::<f32>::zeros(oc);
    for bi in 0..batch {
        let d2 = dout
            .index_axis(Axis(0), bi)
            .into_shape_with_order((oc, oh * ow))
            .unwrap();
        im2col(&x.index_axis(Axis(0), bi), k, pad, &mut col);
        general_mat_mul(1.0, &d2, &col.t(), 1.0, &mut dw2);
        general_mat_mul(1.0, &wmat.t(), &d2, 0.0, &mut colgrad);
        col2im(&colgrad, k, pad, &mut dx.index_axis_mut(Axis(0), bi));
        for c in 0..oc {
            db[c] += d2.row(c).sum();
        }
    }
    let dw = dw2.into_shape_with_order((oc, ic, k, k)).unwrap();
    (dx, dw, db)
}

/// 2x2 stride-2 transposed convolution. `w` has shape (IC, OC, 2, 2).
pub fn convt2_forward(x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>) -> Array4<f32> {
    let (batch, ic, h, wd) = x.dim();
    let (wic, oc, _, _) = w.dim();
    assert_eq!(ic, wic, "convt2: channel mismatch");
    let w2: ArrayView2<f32> = w.view().into_shape_with_order((ic, oc * 4)).unwrap();
    let mut y = Array4::<f32>::zeros((batch, oc, 2 * h, 2 * wd));
    let mut tmp = Array2::<f32>::zeros((oc * 4, h * wd));
    for bi in 0..batch {
        let x2 = x
            .index_axis(Axis(0), bi)
            .into_shape_with_order((ic, h * wd))
            .unwrap();
        general_mat_mul(1.0, &w2.t(), &x2, 0.0, &mut tmp);
        let mut yb = y.index_axis_mut(Axis(0), bi);
        for c in 0..oc {
            for di in 0..2 {
                for dj in 0..2 {
                    let t = tmp.row((c * 2 + di) * 2 + dj);
                    for i in 0..h {
                        for j in 0..wd {
                            yb[[c, 2 * i + di, 2 * j + dj]] = t[i * wd + j] + b[c];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Backward pass of [`convt2_forward`]. Returns (dx, dw, db).
pub fn convt2_backward(
    x: &Array4<f32>,
    w: &Array4<f32>,
    dout: &Array4<f32>,
) -> (Array4<f32>, Array4<f32>, Array1<f32>) {
    let (batch, ic, h, wd) = x.dim();
    let (_, oc, _, _) = w.dim();
    let w2: ArrayView2<f32> = w.view().into_shape_with_order((ic, oc * 4)).unwrap();
    let mut dx = Array4::<f32>::zeros(x.raw_dim());
    let mut dw2 = Array2::<f32>::zeros((ic, oc * 4));
    let mut db = Array1::<f32>::zeros(oc);
    let mut dtmp = Array2::<f32>::zeros((oc * 4, h * wd));
    for bi in 0..batch {
        let db_out = dout.index_axis(Axis(0), bi);
        for c in 0..oc {
            for di in 0..2 {
                for dj in 0..2 {
                    let mut t = dtmp.row_mut((c * 2 + di) * 2 + dj);
                    for i in 0..h {
                        for j in 0..wd {
                            t[i * wd + j] = db_out[[c, 2 * i + di, 2 * j + dj]];
                        }
                    }
                }
            }
            db[c] += db_out.index_axis(Axis(0), c).sum();
        }
        let x2 = x
            .index_axis(Axis(0), bi)
            .into_shape_with_order((ic, h * wd))
            .unwrap();
        let mut dx2 = dx
            .index_axis_mut(Axis(0), bi)
            .into_shape_with_order((ic, h * wd))
            .unwrap();
        general_mat_mul(1.0, &w2, &dtmp.view(), 0.0, &mut dx2);
        general_mat_mul(1.0, &x2, &dtmp.t(), 1.0, &mut dw2);
    }
    let dw = dw2.into_shape_with_order((ic, oc, 2, 2)).unwrap();
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2. Returns pooled output and per-cell argmax
/// (0..4, encoded as di*2+dj) for the backward pass.
pub fn maxpool2_forward(x: &Array4<f32>) -> (Array4<f32>, Array4<u8>) {
    let (batch, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2: odd spatial size");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<f32>::zeros((batch, c, oh, ow));
    let mut arg = Array4::<u8>::zeros((batch, c, oh, ow));
    for bi in 0..batch {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut bidx = 0u8;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let v = x[[bi, ci, 2 * i + di, 2 * j + dj]];
                            if v > best {
                                best = v;
                                bidx = (di * 2 + dj) as u8;
                            }
                        }
                    }
                    y[[bi, ci, i, j]] = best;
                    arg[[bi, ci, i, j]] = bidx;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(dout: &Array4<f32>, arg: &Array4<u8>) -> Array4<f32> {
    let (batch, c, oh, ow) = dout.dim();
    let mut dx = Array4::<f32>::zeros((batch, c, oh * 2, ow * 2));
    for bi in 0..batch {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let a = arg[[bi, ci, i, j]] as usize;
                    dx[[bi, ci, 2 * i + a / 2, 2 * j + a % 2]] = dout[[bi, ci, i, j]];
                }
            }
        }
    }
    dx
}

pub fn relu_forward(x: &mut Array4<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zero the gradient where the (post-)activation was clipped.
pub fn relu_backward(dout: &mut Array4<f32>, out: &Array4<f32>) {
    ndarray::Zip::from(dout).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

pub struct NormCache {
    pub xhat: Array4<f32>,
    pub inv_std: Array2<f32>, // (B, C)
}

const NORM_EPS: f32 = 1e-5;

/// Per-sample, per-channel normalization to zero mean / unit variance (no affine).
pub fn instance_norm_forward(x: &Array4<f32>) -> (Array4<f32>, NormCache) {
    let (batch, c, h, w) = x.dim();
    let n = (h * w) as f32;
    let mut y = x.clone();
    let mut inv_std = Array2::<f32>::zeros((batch, c));
    for bi in 0..batch {
        for ci in 0..c {
            let mut plane = y.slice_mut(s![bi, ci, .., ..]);
            let mean = plane.sum() / n;
            plane.mapv_inplace(|v| v - mean);
            let var = plane.mapv(|v| v * v).sum() / n;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            plane.mapv_inplace(|v| v * is);
            inv_std[[bi, ci]] = is;
        }
    }
    let cache = NormCache {
        xhat: y.clone(),
        inv_std,
    };
    (y, cache)
}

pub fn instance_norm_backward(dout: &Array4<f32>, cache: &NormCache) -> Array4<f32> {
    let (batch, c, h, w) = dout.dim();
    let n = (h * w) as f32;
    let mut dx = Array4::<f32>::zeros(dout.raw_dim());
    for bi in 0..batch {
        for ci in 0..c {
            let dy = dout.slice(s![bi, ci, .., ..]);
            let xh = cache.xhat.slice(s![bi, ci, .., ..]);
            let is = cache.inv_std[[bi, ci]];
            let mean_dy = dy.sum() / n;
            let mean_dy_xh = (&dy * &xh).sum() / n;
            let mut d = dx.slice_mut(s![bi, ci, .., ..]);
            ndarray::Zip::from(&mut d).and(&dy).and(&xh).for_each(|o, &g, &x| {
                *o = is * (g - mean_dy - x * mean_dy_xh);
            });
        }
    }
    dx
}

/// Concatenate along the channel axis.
pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    let c = ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("concat_channels: shape mismatch");
    // concatenate may return a non-standard layout; conv kernels need C order
    if c.is_standard_layout() {
        c
    } else {
        c.as_standard_layout().to_owned()
    }
}

/// Split a channel-concatenated gradient back into its two halves.
pub fn split_channels(d: &Array4<f32>, c0: usize) -> (Array4<f32>, Array4<f32>) {
    let a = d.slice(s![.., ..c0, .., ..]).to_owned();
    let b = d.slice(s![.., c0.., .., ..]).to_owned();
    (a, b)
}

/// Helper used by evaluation paths: per-pixel argmax with lowest-index tie-break.
pub fn argmax_classes(scores: &Array4<f32>) -> Array3<u8> {
    let (batch, k, h, w) = scores.dim();
    let mut out = Array3::<u8>::zeros((batch, h, w));
    for bi in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let mut best = scores[[bi, 0, i, j]];
                let mut cls = 0usize;
                for c in 1..k {
                    let v = scores[[bi, c, i, j]];
                    if v > best {
                        best = v;
                        cls = c;
                    }
                }
                out[[bi, i, j]] = cls as u8;
            }
        }
    }
    out
}
