//! Dense numeric kernels behind the tape operations.
//!
//! Convolutions are lowered to GEMM through an explicit im2col buffer
//! (with fast paths for 1x1 projections and 3x3 depthwise filters), so a
//! single well-optimised matrix multiply carries most of the arithmetic.
//! Every kernel here is deterministic: accumulation order is fixed by the
//! loop structure and never depends on thread scheduling.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};

use super::scalar::Scalar;

/// Output spatial extent of a strided convolution.
#[inline]
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Zero-pad the two trailing spatial axes.
pub fn pad2d<T: Scalar>(x: &ArrayView4<T>, pad: usize) -> Array4<T> {
    if pad == 0 {
        return x.to_owned();
    }
    let (b, c, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((b, c, h + 2 * pad, w + 2 * pad));
    out.slice_mut(s![.., .., pad..pad + h, pad..pad + w])
        .assign(x);
    out
}

/// Gather the padded input of one sample/channel-group into a
/// `(c_in * k * k, h_out * w_out)` matrix whose columns are flattened
/// receptive fields.
fn im2col<T: Scalar>(
    xp: &ArrayView3<T>,
    k: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
) -> Array2<T> {
    let c_in = xp.dim().0;
    let mut cols = Array2::<T>::zeros((c_in * k * k, h_out * w_out));
    for ci in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let src = xp.slice(s![
                    ci,
                    ki..ki + stride * (h_out - 1) + 1;stride,
                    kj..kj + stride * (w_out - 1) + 1;stride
                ]);
                let mut row = cols.row_mut(ci * k * k + ki * k + kj);
                for (dst, &v) in row.iter_mut().zip(src.iter()) {
                    *dst = v;
                }
            }
        }
    }
    cols
}

/// Scatter-add the im2col layout back onto a padded image (adjoint of
/// [`im2col`]).
fn col2im<T: Scalar>(
    cols: &Array2<T>,
    c_in: usize,
    hp: usize,
    wp: usize,
    k: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
) -> Array3<T> {
    let mut out = Array3::<T>::zeros((c_in, hp, wp));
    for ci in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = cols.row(ci * k * k + ki * k + kj);
                let mut dst = out.slice_mut(s![
                    ci,
                    ki..ki + stride * (h_out - 1) + 1;stride,
                    kj..kj + stride * (w_out - 1) + 1;stride
                ]);
                for (d, &v) in dst.iter_mut().zip(row.iter()) {
                    *d = *d + v;
                }
            }
        }
    }
    out
}

/// Grouped 2-D convolution, NCHW activations, `(c_out, c_in/groups, k, k)`
/// weights.
pub fn conv2d_fwd<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    bias: Option<&ArrayView1<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Array4<T> {
    let (b, c_in, h, wd) = x.dim();
    let (c_out, c_in_g, kh, kw) = w.dim();
    assert_eq!(kh, kw, "square kernels only");
    assert_eq!(c_in_g * groups, c_in, "channel/group mismatch");
    assert_eq!(c_out % groups, 0, "output channels not divisible by groups");
    let k = kh;
    let h_out = conv_out_len(h, k, stride, pad);
    let w_out = conv_out_len(wd, k, stride, pad);
    let l = h_out * w_out;
    let c_out_g = c_out / groups;

    let mut y = Array4::<T>::zeros((b, c_out, h_out, w_out));

    if k == 1 && stride == 1 && pad == 0 && groups == 1 {
        // Pointwise projection: plain GEMM on a (c_in, h*w) view.
        let w_mat = w.to_shape((c_out, c_in)).unwrap();
        for bi in 0..b {
            let x_mat = x.slice(s![bi, .., .., ..]);
            let x_mat = x_mat.to_shape((c_in, l)).unwrap();
            let y_mat = y.slice_mut(s![bi, .., .., ..]);
            let mut y_mat = y_mat.into_shape_with_order((c_out, l)).unwrap();
            general_mat_mul(T::one(), &w_mat.view(), &x_mat.view(), T::zero(), &mut y_mat);
        }
    } else {
        let xp = pad2d(x, pad);
        let w_mat = w
            .to_shape((c_out, c_in_g * k * k))
            .expect("weights are contiguous");
        for bi in 0..b {
            for g in 0..groups {
                let xg = xp.slice(s![bi, g * c_in_g..(g + 1) * c_in_g, .., ..]);
                let cols = im2col(&xg, k, stride, h_out, w_out);
                let wg = w_mat.slice(s![g * c_out_g..(g + 1) * c_out_g, ..]);
                let yg = y.slice_mut(s![bi, g * c_out_g..(g + 1) * c_out_g, .., ..]);
                let mut yg = yg.into_shape_with_order((c_out_g, l)).unwrap();
                general_mat_mul(T::one(), &wg, &cols.view(), T::zero(), &mut yg);
            }
        }
    }

    if let Some(bias) = bias {
        assert_eq!(bias.len(), c_out);
        for bi in 0..b {
            for co in 0..c_out {
                let add = bias[co];
                y.slice_mut(s![bi, co, .., ..]).mapv_inplace(|v| v + add);
            }
        }
    }
    y
}

/// Gradients of [`conv2d_fwd`] with respect to the input and the weights.
pub fn conv2d_bwd<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    dy: &ArrayView4<T>,
    stride: usize,
    pad: usize,
    groups: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<T>>, Option<Array4<T>>) {
    let (b, c_in, h, wd) = x.dim();
    let (c_out, c_in_g, k, _) = w.dim();
    let (_, _, h_out, w_out) = dy.dim();
    let l = h_out * w_out;
    let c_out_g = c_out / groups;

    let mut dx = need_dx.then(|| Array4::<T>::zeros((b, c_in, h, wd)));
    let mut dw = need_dw.then(|| Array4::<T>::zeros(w.dim()));

    if k == 1 && stride == 1 && pad == 0 && groups == 1 {
        let w_mat = w.to_shape((c_out, c_in)).unwrap();
        for bi in 0..b {
            let dy_mat = dy.slice(s![bi, .., .., ..]);
            let dy_mat = dy_mat.to_shape((c_out, l)).unwrap();
            if let Some(dx) = dx.as_mut() {
                let dx_mat = dx.slice_mut(s![bi, .., .., ..]);
                let mut dx_mat = dx_mat.into_shape_with_order((c_in, l)).unwrap();
                general_mat_mul(T::one(), &w_mat.t(), &dy_mat.view(), T::zero(), &mut dx_mat);
            }
            if let Some(dw) = dw.as_mut() {
                let x_mat = x.slice(s![bi, .., .., ..]);
                let x_mat = x_mat.to_shape((c_in, l)).unwrap();
                let mut dw_mat = dw.view_mut().into_shape_with_order((c_out, c_in)).unwrap();
                general_mat_mul(T::one(), &dy_mat.view(), &x_mat.t(), T::one(), &mut dw_mat);
            }
        }
        return (dx, dw);
    }

    let xp = pad2d(x, pad);
    let (_, _, hp, wp) = xp.dim();
    let w_mat = w.to_shape((c_out, c_in_g * k * k)).unwrap();
    for bi in 0..b {
        for g in 0..groups {
            let dy_g = dy.slice(s![bi, g * c_out_g..(g + 1) * c_out_g, .., ..]);
            let dy_g = dy_g.to_shape((c_out_g, l)).unwrap();
            let wg = w_mat.slice(s![g * c_out_g..(g + 1) * c_out_g, ..]);
            if dx.is_some() {
                // d cols = W^T (c_in_g*k*k, c_out_g) x dy (c_out_g, l)
                let mut dcols = Array2::<T>::zeros((c_in_g * k * k, l));
                general_mat_mul(T::one(), &wg.t(), &dy_g.view(), T::zero(), &mut dcols);
                let dxg_p = col2im(&dcols, c_in_g, hp, wp, k, stride, h_out, w_out);
                let dx = dx.as_mut().unwrap();
                let mut dst = dx.slice_mut(s![bi, g * c_in_g..(g + 1) * c_in_g, .., ..]);
                let src = dxg_p.slice(s![.., pad..pad + h, pad..pad + wd]);
                dst.zip_mut_with(&src, |d, &v| *d = *d + v);
            }
            if let Some(dwa) = dw.as_mut() {
                let xg = xp.slice(s![bi, g * c_in_g..(g + 1) * c_in_g, .., ..]);
                let cols = im2col(&xg, k, stride, h_out, w_out);
                let mut dw_mat = dwa
                    .view_mut()
                    .into_shape_with_order((c_out, c_in_g * k * k))
                    .unwrap();
                let mut dwg = dw_mat.slice_mut(s![g * c_out_g..(g + 1) * c_out_g, ..]);
                general_mat_mul(T::one(), &dy_g.view(), &cols.t(), T::one(), &mut dwg);
            }
        }
    }
    (dx, dw)
}

/// Depthwise 3x3 convolution, stride 1, zero padding 1 (shape preserving).
/// Weights are `(c, 1, 3, 3)`.
pub fn dwconv3x3_fwd<T: Scalar>(x: &ArrayView4<T>, w: &ArrayView4<T>) -> Array4<T> {
    let (b, c, h, wd) = x.dim();
    assert_eq!(w.dim(), (c, 1, 3, 3), "depthwise weight shape");
    let xp = pad2d(x, 1);
    let mut y = Array4::<T>::zeros((b, c, h, wd));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = y.slice_mut(s![bi, ci, .., ..]);
            for ki in 0..3 {
                for kj in 0..3 {
                    let coef = w[(ci, 0, ki, kj)];
                    let shifted = xp.slice(s![bi, ci, ki..ki + h, kj..kj + wd]);
                    acc.zip_mut_with(&shifted, |a, &v| *a = *a + coef * v);
                }
            }
        }
    }
    y
}

/// Gradients of [`dwconv3x3_fwd`].
pub fn dwconv3x3_bwd<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    dy: &ArrayView4<T>,
) -> (Array4<T>, Array4<T>) {
    let (b, c, h, wd) = x.dim();
    let xp = pad2d(x, 1);
    let mut dxp = Array4::<T>::zeros(xp.dim());
    let mut dw = Array4::<T>::zeros(w.dim());
    for bi in 0..b {
        for ci in 0..c {
            let dy_s = dy.slice(s![bi, ci, .., ..]);
            for ki in 0..3 {
                for kj in 0..3 {
                    let coef = w[(ci, 0, ki, kj)];
                    let mut dxs = dxp.slice_mut(s![bi, ci, ki..ki + h, kj..kj + wd]);
                    dxs.zip_mut_with(&dy_s, |d, &g| *d = *d + coef * g);
                    let xs = xp.slice(s![bi, ci, ki..ki + h, kj..kj + wd]);
                    let mut acc = T::zero();
                    for (&a, &g) in xs.iter().zip(dy_s.iter()) {
                        acc = acc + a * g;
                    }
                    dw[(ci, 0, ki, kj)] = dw[(ci, 0, ki, kj)] + acc;
                }
            }
        }
    }
    let dx = dxp.slice(s![.., .., 1..1 + h, 1..1 + wd]).to_owned();
    (dx, dw)
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x
/// upsampling). Weights are `(c_in, c_out, 2, 2)`.
pub fn convt2x2_fwd<T: Scalar>(x: &ArrayView4<T>, w: &ArrayView4<T>) -> Array4<T> {
    let (b, c_in, h, wd) = x.dim();
    let (wc_in, c_out, kh, kw) = w.dim();
    assert_eq!((wc_in, kh, kw), (c_in, 2, 2), "transposed kernel shape");
    let l = h * wd;
    let mut y = Array4::<T>::zeros((b, c_out, 2 * h, 2 * wd));
    for di in 0..2 {
        for dj in 0..2 {
            // (c_out, c_in) slice of the kernel at this sub-pixel offset.
            let w_dd = w.slice(s![.., .., di, dj]);
            for bi in 0..b {
                let x_mat = x.slice(s![bi, .., .., ..]);
                let x_mat = x_mat.to_shape((c_in, l)).unwrap();
                let mut buf = Array2::<T>::zeros((c_out, l));
                general_mat_mul(T::one(), &w_dd.t(), &x_mat.view(), T::zero(), &mut buf);
                let buf = buf.into_shape_with_order((c_out, h, wd)).unwrap();
                let mut dst = y.slice_mut(s![bi, .., di..;2, dj..;2]);
                dst.assign(&buf);
            }
        }
    }
    y
}

/// Gradients of [`convt2x2_fwd`].
pub fn convt2x2_bwd<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    dy: &ArrayView4<T>,
) -> (Array4<T>, Array4<T>) {
    let (b, c_in, h, wd) = x.dim();
    let (_, c_out, _, _) = w.dim();
    let l = h * wd;
    let mut dx = Array4::<T>::zeros((b, c_in, h, wd));
    let mut dw = Array4::<T>::zeros(w.dim());
    for di in 0..2 {
        for dj in 0..2 {
            let w_dd = w.slice(s![.., .., di, dj]);
            for bi in 0..b {
                let dy_dd = dy.slice(s![bi, .., di..;2, dj..;2]).to_owned();
                let dy_mat = dy_dd.into_shape_with_order((c_out, l)).unwrap();
                {
                    let dx_mat = dx.slice_mut(s![bi, .., .., ..]);
                    let mut dx_mat = dx_mat.into_shape_with_order((c_in, l)).unwrap();
                    general_mat_mul(T::one(), &w_dd, &dy_mat.view(), T::one(), &mut dx_mat);
                }
                {
                    let x_mat = x.slice(s![bi, .., .., ..]);
                    let x_mat = x_mat.to_shape((c_in, l)).unwrap();
                    let mut dw_dd = dw.slice_mut(s![.., .., di, dj]);
                    general_mat_mul(T::one(), &x_mat.view(), &dy_mat.t(), T::one(), &mut dw_dd);
                }
            }
        }
    }
    (dx, dw)
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the flat
/// argmax offset (0..4) per output cell for exact gradient routing.
pub fn maxpool2x2_fwd<T: Scalar>(x: &ArrayView4<T>) -> (Array4<T>, Vec<u8>) {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even extents");
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array4::<T>::zeros((b, c, ho, wo));
    let mut arg = vec![0u8; b * c * ho * wo];
    let mut idx = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = x[(bi, ci, 2 * i, 2 * j)];
                    let mut code = 0u8;
                    for (off, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = x[(bi, ci, 2 * i + di, 2 * j + dj)];
                        if v > best {
                            best = v;
                            code = off as u8;
                        }
                    }
                    y[(bi, ci, i, j)] = best;
                    arg[idx] = code;
                    idx += 1;
                }
            }
        }
    }
    (y, arg)
}

/// Scatter pooled gradients back through the recorded argmax offsets.
pub fn maxpool2x2_bwd<T: Scalar>(
    x_dim: (usize, usize, usize, usize),
    arg: &[u8],
    dy: &ArrayView4<T>,
) -> Array4<T> {
    let (b, c, h, w) = x_dim;
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let mut idx = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let code = arg[idx] as usize;
                    idx += 1;
                    let (di, dj) = (code / 2, code % 2);
                    dx[(bi, ci, 2 * i + di, 2 * j + dj)] =
                        dx[(bi, ci, 2 * i + di, 2 * j + dj)] + dy[(bi, ci, i, j)];
                }
            }
        }
    }
    dx
}

/// Numerically-stable softmax over the last axis of a rank-3 tensor.
pub fn softmax_last<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let mut y = x.to_owned();
    for mut lane in y.lanes_mut(Axis(2)) {
        let mut mx = lane[0];
        for &v in lane.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in lane.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in lane.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}

/// Sum `dy` over every axis except the channel axis (axis 1) of an NCHW
/// tensor; used for bias and per-channel affine gradients.
pub fn sum_keep_channel<T: Scalar>(dy: &ArrayView4<T>) -> Array1<T> {
    let (b, c, h, w) = dy.dim();
    let mut out = Array1::<T>::zeros(c);
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = T::zero();
            for i in 0..h {
                for j in 0..w {
                    acc = acc + dy[(bi, ci, i, j)];
                }
            }
            out[ci] = out[ci] + acc;
        }
    }
    out
}
