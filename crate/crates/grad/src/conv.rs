//! 2-D convolution and transposed convolution via im2col/col2im, NCHW layout.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::elem::Elem;
use crate::graph::Var;
use crate::ops::dims4;

/// Gathers patches from `src` (C, SH, SW) into a (C*KH*KW, PH*PW) matrix,
/// where position (py, px) reads source pixel (py*stride + ky - pad, ...).
/// Out-of-range reads are zero.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Elem>(
    src: &[E],
    c: usize,
    sh: usize,
    sw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: isize,
    ph: usize,
    pw: usize,
) -> Array2<E> {
    let mut cols = Array2::<E>::zeros((c * kh * kw, ph * pw));
    let cs = cols.as_slice_mut().expect("cols standard layout");
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let base = row * ph * pw;
                for py in 0..ph {
                    let sy = (py * stride) as isize + ky as isize - pad;
                    if sy < 0 || sy >= sh as isize {
                        continue;
                    }
                    let src_base = (ci * sh + sy as usize) * sw;
                    let dst_base = base + py * pw;
                    for px in 0..pw {
                        let sx = (px * stride) as isize + kx as isize - pad;
                        if sx < 0 || sx >= sw as isize {
                            continue;
                        }
                        cs[dst_base + px] = src[src_base + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add transpose of `im2col`: accumulates the (C*KH*KW, PH*PW) matrix
/// back into a (C, TH, TW) volume.
#[allow(clippy::too_many_arguments)]
fn col2im<E: Elem>(
    cols: &Array2<E>,
    c: usize,
    th: usize,
    tw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: isize,
    ph: usize,
    pw: usize,
    out: &mut [E],
) {
    let cs = cols.as_slice().expect("cols standard layout");
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let base = row * ph * pw;
                for py in 0..ph {
                    let ty = (py * stride) as isize + ky as isize - pad;
                    if ty < 0 || ty >= th as isize {
                        continue;
                    }
                    let dst_base = (ci * th + ty as usize) * tw;
                    let src_base = base + py * pw;
                    for px in 0..pw {
                        let tx = (px * stride) as isize + kx as isize - pad;
                        if tx < 0 || tx >= tw as isize {
                            continue;
                        }
                        out[dst_base + tx as usize] =
                            out[dst_base + tx as usize] + cs[src_base + px];
                    }
                }
            }
        }
    }
}

/// conv2d on (N, C, H, W) with weights (OC, C, KH, KW) and optional (OC) bias.
pub fn conv2d<'g, E: Elem>(
    x: Var<'g, E>,
    w: Var<'g, E>,
    b: Option<Var<'g, E>>,
    stride: usize,
    pad: usize,
) -> Var<'g, E> {
    let xv = x.value();
    let wv = w.value();
    assert_eq!(xv.ndim(), 4, "conv2d input must be NCHW");
    assert_eq!(wv.ndim(), 4, "conv2d weight must be (OC, C, KH, KW)");
    let (n, c, h, wd) = dims4(&xv);
    let (oc, wc, kh, kw) = dims4(&wv);
    assert_eq!(c, wc, "conv2d channel mismatch");
    assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than input");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;

    let w_mat = wv
        .to_shape((oc, c * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let xs = xv.as_slice().expect("input standard layout");
    let mut out = ArrayD::<E>::zeros(IxDyn(&[n, oc, oh, ow]));
    let mut cols_all: Vec<Array2<E>> = Vec::with_capacity(n);
    {
        let os = out.as_slice_mut().expect("out standard layout");
        for ni in 0..n {
            let cols = im2col(
                &xs[ni * c * h * wd..(ni + 1) * c * h * wd],
                c,
                h,
                wd,
                kh,
                kw,
                stride,
                pad as isize,
                oh,
                ow,
            );
            let prod = w_mat.dot(&cols); // (OC, OH*OW)
            os[ni * oc * oh * ow..(ni + 1) * oc * oh * ow]
                .copy_from_slice(prod.as_slice().expect("prod layout"));
            cols_all.push(cols);
        }
    }
    if let Some(bias) = b {
        let bv = bias.value();
        assert_eq!(bv.len(), oc, "bias length mismatch");
        let os = out.as_slice_mut().expect("out standard layout");
        for ni in 0..n {
            for oci in 0..oc {
                let bb = bv[[oci]];
                let base = (ni * oc + oci) * oh * ow;
                for v in &mut os[base..base + oh * ow] {
                    *v = *v + bb;
                }
            }
        }
    }

    let cols_all = Rc::new(cols_all);
    let wm_c = w_mat;
    let mut parents = vec![x, w];
    if let Some(bias) = b {
        parents.push(bias);
    }
    let has_bias = b.is_some();
    x.g.custom_op(&parents, out, move |g, needs| {
        let gs = g.as_slice().expect("grad standard layout");
        let dx = needs[0].then(|| {
            let mut dx = ArrayD::<E>::zeros(IxDyn(&[n, c, h, wd]));
            let dxs = dx.as_slice_mut().expect("dx layout");
            for ni in 0..n {
                let g_mat = Array2::from_shape_vec(
                    (oc, oh * ow),
                    gs[ni * oc * oh * ow..(ni + 1) * oc * oh * ow].to_vec(),
                )
                .expect("grad reshape");
                let dcols = wm_c.t().dot(&g_mat); // (C*KH*KW, OH*OW)
                col2im(
                    &dcols,
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                    stride,
                    pad as isize,
                    oh,
                    ow,
                    &mut dxs[ni * c * h * wd..(ni + 1) * c * h * wd],
                );
            }
            dx
        });
        let dw = needs[1].then(|| {
            let mut acc = Array2::<E>::zeros((oc, c * kh * kw));
            for ni in 0..n {
                let g_mat = Array2::from_shape_vec(
                    (oc, oh * ow),
                    gs[ni * oc * oh * ow..(ni + 1) * oc * oh * ow].to_vec(),
                )
                .expect("grad reshape");
                acc = acc + g_mat.dot(&cols_all[ni].t());
            }
            acc.into_shape_with_order(IxDyn(&[oc, c, kh, kw]))
                .expect("dw reshape")
        });
        let mut grads = vec![dx, dw];
        if has_bias {
            grads.push(needs[2].then(|| {
                let mut db = ArrayD::<E>::zeros(IxDyn(&[oc]));
                for ni in 0..n {
                    for oci in 0..oc {
                        let base = (ni * oc + oci) * oh * ow;
                        let mut acc = E::zero();
                        for v in &gs[base..base + oh * ow] {
                            acc = acc + *v;
                        }
                        db[[oci]] = db[[oci]] + acc;
                    }
                }
                db
            }));
        }
        grads
    })
}

/// conv_transpose2d on (N, IC, H, W) with weights (IC, OC, KH, KW).
/// Output spatial size is (H-1)*stride - 2*pad + KH.
pub fn conv_transpose2d<'g, E: Elem>(
    x: Var<'g, E>,
    w: Var<'g, E>,
    b: Option<Var<'g, E>>,
    stride: usize,
    pad: usize,
) -> Var<'g, E> {
    let xv = x.value();
    let wv = w.value();
    assert_eq!(xv.ndim(), 4, "conv_transpose2d input must be NCHW");
    assert_eq!(wv.ndim(), 4, "conv_transpose2d weight must be (IC, OC, KH, KW)");
    let (n, ic, h, wd) = dims4(&xv);
    let (wic, oc, kh, kw) = dims4(&wv);
    assert_eq!(ic, wic, "conv_transpose2d channel mismatch");
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;

    let w_mat = wv
        .to_shape((ic, oc * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let xs = xv.as_slice().expect("input standard layout");
    let mut out = ArrayD::<E>::zeros(IxDyn(&[n, oc, oh, ow]));
    {
        let os = out.as_slice_mut().expect("out standard layout");
        for ni in 0..n {
            let x_mat = Array2::from_shape_vec(
                (ic, h * wd),
                xs[ni * ic * h * wd..(ni + 1) * ic * h * wd].to_vec(),
            )
            .expect("input reshape");
            let cols = w_mat.t().dot(&x_mat); // (OC*KH*KW, H*W)
            col2im(
                &cols.as_standard_layout().to_owned(),
                oc,
                oh,
                ow,
                kh,
                kw,
                stride,
                pad as isize,
                h,
                wd,
                &mut os[ni * oc * oh * ow..(ni + 1) * oc * oh * ow],
            );
        }
    }
    if let Some(bias) = b {
        let bv = bias.value();
        assert_eq!(bv.len(), oc, "bias length mismatch");
        let os = out.as_slice_mut().expect("out standard layout");
        for ni in 0..n {
            for oci in 0..oc {
                let bb = bv[[oci]];
                let base = (ni * oc + oci) * oh * ow;
                for v in &mut os[base..base + oh * ow] {
                    *v = *v + bb;
                }
            }
        }
    }

    let xv_c = xv.clone();
    let wm_c = w_mat;
    let mut parents = vec![x, w];
    if let Some(bias) = b {
        parents.push(bias);
    }
    let has_bias = b.is_some();
    x.g.custom_op(&parents, out, move |g, needs| {
        let gs = g.as_slice().expect("grad standard layout");
        let xs = xv_c.as_slice().expect("input layout");
        // dX = W · im2col(g); dW = im2col(g) · Xᵀ, transposed.
        let mut g_cols: Vec<Array2<E>> = Vec::with_capacity(n);
        if needs[0] || needs[1] {
            for ni in 0..n {
                g_cols.push(im2col(
                    &gs[ni * oc * oh * ow..(ni + 1) * oc * oh * ow],
                    oc,
                    oh,
                    ow,
                    kh,
                    kw,
                    stride,
                    pad as isize,
                    h,
                    wd,
                ));
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = ArrayD::<E>::zeros(IxDyn(&[n, ic, h, wd]));
            let dxs = dx.as_slice_mut().expect("dx layout");
            for ni in 0..n {
                let prod = wm_c.dot(&g_cols[ni]); // (IC, H*W)
                dxs[ni * ic * h * wd..(ni + 1) * ic * h * wd]
                    .copy_from_slice(prod.as_slice().expect("prod layout"));
            }
            dx
        });
        let dw = needs[1].then(|| {
            let mut acc = Array2::<E>::zeros((oc * kh * kw, ic));
            for ni in 0..n {
                let x_mat = Array2::from_shape_vec(
                    (ic, h * wd),
                    xs[ni * ic * h * wd..(ni + 1) * ic * h * wd].to_vec(),
                )
                .expect("input reshape");
                acc = acc + g_cols[ni].dot(&x_mat.t());
            }
            acc.t()
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(&[ic, oc, kh, kw]))
                .expect("dw reshape")
        });
        let mut grads = vec![dx, dw];
        if has_bias {
            grads.push(needs[2].then(|| {
                let mut db = ArrayD::<E>::zeros(IxDyn(&[oc]));
                for ni in 0..n {
                    for oci in 0..oc {
                        let base = (ni * oc + oci) * oh * ow;
                        let mut acc = E::zero();
                        for v in &gs[base..base + oh * ow] {
                            acc = acc + *v;
                        }
                        db[[oci]] = db[[oci]] + acc;
                    }
                }
                db
            }));
        }
        grads
    })
}
