//! im2col-backed 2-D convolution and transposed convolution.
//!
//! `im2col` and `col2im` are exact adjoints, so the transposed convolution
//! is literally the adjoint of the forward convolution and the backward
//! passes of both reuse the same two helpers.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayView4};

use super::Scalar;

pub fn conv_out_dim(dim: usize, k: usize, stride: usize, pad: usize) -> usize {
    (dim + 2 * pad - k) / stride + 1
}

pub fn conv_transpose_out_dim(dim: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (dim - 1) * stride + k + out_pad - 2 * pad
}

/// Extracts k x k patches at stride `stride` from a zero-padded [c,h,w]
/// image into a [c*k*k, ho*wo] matrix.
pub fn im2col<F: Scalar>(
    x: &ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let mut cols = Array2::<F>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates patch columns back into a [c,h,w] image.
pub fn col2im<F: Scalar>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (c * k * k, ho * wo));
    let mut img = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        img[[ci, ii as usize, jj as usize]] =
                            img[[ci, ii as usize, jj as usize]] + cols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    img
}

/// weight: [o, c, k, k], bias: [o]. Output [n, o, ho, wo].
pub fn conv2d_forward<F: Scalar>(
    x: &ArrayView4<F>,
    weight: &ArrayView4<F>,
    bias: &[F],
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (o, cw, kh, kw) = weight.dim();
    assert_eq!(c, cw, "conv2d channel mismatch: input {c}, weight {cw}");
    assert_eq!(kh, kw, "square kernels only");
    let k = kh;
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let w_mat = weight
        .to_shape((o, c * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut out = Array4::<F>::zeros((n, o, ho, wo));
    for ni in 0..n {
        let cols = im2col(&x.index_axis(ndarray::Axis(0), ni), k, stride, pad);
        let out_mat = w_mat.dot(&cols); // [o, ho*wo]
        for oi in 0..o {
            let b = bias[oi];
            for p in 0..ho * wo {
                out[[ni, oi, p / wo, p % wo]] = out_mat[[oi, p]] + b;
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight, bias.
pub fn conv2d_backward<F: Scalar>(
    x: &ArrayView4<F>,
    weight: &ArrayView4<F>,
    grad_out: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (n, c, h, w) = x.dim();
    let (o, _, k, _) = weight.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let w_mat = weight
        .to_shape((o, c * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    let mut dw_mat = Array2::<F>::zeros((o, c * k * k));
    let mut db = Array1::<F>::zeros(o);
    for ni in 0..n {
        let g = grad_out.index_axis(ndarray::Axis(0), ni);
        let g_mat = g.to_shape((o, ho * wo)).expect("grad reshape").to_owned();
        let cols = im2col(&x.index_axis(ndarray::Axis(0), ni), k, stride, pad);
        dw_mat += &g_mat.dot(&cols.t());
        let dcols = w_mat.t().dot(&g_mat);
        let dxi = col2im(&dcols, c, h, w, k, stride, pad);
        dx.index_axis_mut(ndarray::Axis(0), ni).assign(&dxi);
        for oi in 0..o {
            db[oi] = db[oi] + g_mat.row(oi).iter().copied().sum::<F>();
        }
    }
    let dw = dw_mat
        .into_shape((o, c, k, k))
        .expect("dw reshape");
    (dx, dw, db)
}

/// weight: [i, o, k, k], bias: [o]. Output [n, o, ho, wo] with
/// ho = (h-1)*stride + k + out_pad - 2*pad.
pub fn conv_transpose2d_forward<F: Scalar>(
    x: &ArrayView4<F>,
    weight: &ArrayView4<F>,
    bias: &[F],
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let (iw, o, kh, kw) = weight.dim();
    assert_eq!(c, iw, "conv_transpose2d channel mismatch");
    assert_eq!(kh, kw, "square kernels only");
    let k = kh;
    assert!(out_pad < stride, "out_pad must be < stride");
    let ho = conv_transpose_out_dim(h, k, stride, pad, out_pad);
    let wo = conv_transpose_out_dim(w, k, stride, pad, out_pad);
    // Sanity: the adjoint conv over the output grid must index h*w positions.
    debug_assert_eq!(conv_out_dim(ho, k, stride, pad), h);
    let w_mat = weight
        .to_shape((c, o * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut out = Array4::<F>::zeros((n, o, ho, wo));
    for ni in 0..n {
        let xi = x.index_axis(ndarray::Axis(0), ni);
        let x_mat = xi.to_shape((c, h * w)).expect("input reshape").to_owned();
        let cols = w_mat.t().dot(&x_mat); // [o*k*k, h*w]
        let img = col2im(&cols, o, ho, wo, k, stride, pad);
        let mut out_i = out.index_axis_mut(ndarray::Axis(0), ni);
        out_i.assign(&img);
        for oi in 0..o {
            let b = bias[oi];
            out_i
                .index_axis_mut(ndarray::Axis(0), oi)
                .mapv_inplace(|v| v + b);
        }
    }
    out
}

/// Gradients of [`conv_transpose2d_forward`] w.r.t. input, weight, bias.
pub fn conv_transpose2d_backward<F: Scalar>(
    x: &ArrayView4<F>,
    weight: &ArrayView4<F>,
    grad_out: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array4<F>, Array1<F>) {
    let (n, c, h, w) = x.dim();
    let (_, o, k, _) = weight.dim();
    let w_mat = weight
        .to_shape((c, o * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut dx = Array4::<F>::zeros((n, c, h, w));
    let mut dw_mat = Array2::<F>::zeros((c, o * k * k));
    let mut db = Array1::<F>::zeros(o);
    for ni in 0..n {
        let g = grad_out.index_axis(ndarray::Axis(0), ni);
        let dcols = im2col(&g, k, stride, pad); // [o*k*k, h*w]
        let xi = x.index_axis(ndarray::Axis(0), ni);
        let x_mat = xi.to_shape((c, h * w)).expect("input reshape").to_owned();
        let dxi = w_mat.dot(&dcols); // [c, h*w]
        dx.index_axis_mut(ndarray::Axis(0), ni).assign(
            &dxi.into_shape((c, h, w)).expect("dx reshape"),
        );
        dw_mat += &x_mat.dot(&dcols.t());
        for oi in 0..o {
            db[oi] = db[oi]
                + g.index_axis(ndarray::Axis(0), oi)
                    .iter()
                    .copied()
                    .sum::<F>();
        }
    }
    let dw = dw_mat
        .into_shape((c, o, k, k))
        .expect("dw reshape");
    (dx, dw, db)
}
