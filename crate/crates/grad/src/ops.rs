//! Differentiable tensor operations.
//!
//! Every op records a backward closure on the tape. Closures capture `Rc`
//! clones of the parent values they need, so the backward pass never has to
//! re-borrow the node store.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::elem::Elem;
use crate::graph::Var;

fn unary<'g, E: Elem>(
    x: Var<'g, E>,
    f: impl Fn(E) -> E,
    df: impl Fn(E) -> E + 'static,
) -> Var<'g, E> {
    let xv = x.value();
    let out = xv.mapv(&f);
    let id = x.g.push_op(
        vec![x.id],
        out,
        Box::new(move |g, needs| {
            if needs[0] {
                vec![Some(g * &xv.mapv(&df))]
            } else {
                vec![None]
            }
        }),
    );
    Var { g: x.g, id }
}

impl<'g, E: Elem> Var<'g, E> {
    pub fn neg(self) -> Var<'g, E> {
        unary(self, |v| -v, |_| -E::one())
    }

    pub fn exp(self) -> Var<'g, E> {
        unary(self, |v| v.exp(), |v| v.exp())
    }

    pub fn sqrt(self) -> Var<'g, E> {
        unary(
            self,
            |v| v.sqrt(),
            |v| E::from_f64(0.5) / v.sqrt().max(E::from_f64(1e-12)),
        )
    }

    pub fn recip(self) -> Var<'g, E> {
        unary(self, |v| E::one() / v, |v| -E::one() / (v * v))
    }

    pub fn tanh(self) -> Var<'g, E> {
        unary(
            self,
            |v| v.tanh(),
            |v| {
                let t = v.tanh();
                E::one() - t * t
            },
        )
    }

    pub fn relu(self) -> Var<'g, E> {
        unary(
            self,
            |v| v.max(E::zero()),
            |v| if v > E::zero() { E::one() } else { E::zero() },
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, E> {
        let s = E::from_f64(slope);
        unary(
            self,
            move |v| if v > E::zero() { v } else { v * s },
            move |v| if v > E::zero() { E::one() } else { s },
        )
    }

    pub fn abs(self) -> Var<'g, E> {
        unary(
            self,
            |v| v.abs(),
            |v| {
                if v > E::zero() {
                    E::one()
                } else if v < E::zero() {
                    -E::one()
                } else {
                    E::zero()
                }
            },
        )
    }

    pub fn square(self) -> Var<'g, E> {
        unary(self, |v| v * v, |v| E::from_f64(2.0) * v)
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(self) -> Var<'g, E> {
        let cap = E::from_f64(30.0);
        unary(
            self,
            move |v| {
                if v > cap {
                    v
                } else {
                    (E::one() + v.exp()).ln()
                }
            },
            |v| E::one() / (E::one() + (-v).exp()),
        )
    }

    pub fn mul_s(self, c: E) -> Var<'g, E> {
        unary(self, move |v| v * c, move |_| c)
    }

    pub fn add_s(self, c: E) -> Var<'g, E> {
        unary(self, move |v| v + c, |_| E::one())
    }

    pub fn add(self, rhs: Var<'g, E>) -> Var<'g, E> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = &*a + &*b;
        let id = self.g.push_op(
            vec![self.id, rhs.id],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.clone()),
                ]
            }),
        );
        Var { g: self.g, id }
    }

    pub fn sub(self, rhs: Var<'g, E>) -> Var<'g, E> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "sub: shape mismatch");
        let out = &*a - &*b;
        let id = self.g.push_op(
            vec![self.id, rhs.id],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.mapv(|v| -v)),
                ]
            }),
        );
        Var { g: self.g, id }
    }

    /// Elementwise product, same shapes.
    pub fn mul(self, rhs: Var<'g, E>) -> Var<'g, E> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = &*a * &*b;
        let id = self.g.push_op(
            vec![self.id, rhs.id],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g * &*b),
                    needs[1].then(|| g * &*a),
                ]
            }),
        );
        Var { g: self.g, id }
    }

    pub fn sum_all(self) -> Var<'g, E> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let out = ArrayD::from_elem(IxDyn(&[]), xv.sum());
        let id = self.g.push_op(
            vec![self.id],
            out,
            Box::new(move |g, needs| {
                if needs[0] {
                    let gs = *g.first().expect("scalar grad");
                    vec![Some(ArrayD::from_elem(IxDyn(&shape), gs))]
                } else {
                    vec![None]
                }
            }),
        );
        Var { g: self.g, id }
    }

    pub fn mean_all(self) -> Var<'g, E> {
        let n = self.value().len();
        self.sum_all().mul_s(E::from_f64(1.0 / n as f64))
    }

    /// (N, C, H, W) -> (N, C) spatial average.
    pub fn spatial_mean(self) -> Var<'g, E> {
        let xv = self.value();
        assert_eq!(xv.ndim(), 4, "spatial_mean expects NCHW");
        let (n, c, h, w) = dims4(&xv);
        let inv = E::from_f64(1.0 / (h * w) as f64);
        let mut out = ArrayD::zeros(IxDyn(&[n, c]));
        for ni in 0..n {
            for ci in 0..c {
                let mut acc = E::zero();
                for y in 0..h {
                    for x in 0..w {
                        acc = acc + xv[[ni, ci, y, x]];
                    }
                }
                out[[ni, ci]] = acc * inv;
            }
        }
        let id = self.g.push_op(
            vec![self.id],
            out,
            Box::new(move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g[[ni, ci]] * inv;
                        for y in 0..h {
                            for x in 0..w {
                                dx[[ni, ci, y, x]] = gv;
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        );
        Var { g: self.g, id }
    }

    /// (N, C, H, W) -> (C) mean over batch and space; used by batch norm.
    pub fn channel_mean(self) -> Var<'g, E> {
        let xv = self.value();
        assert_eq!(xv.ndim(), 4, "channel_mean expects NCHW");
        let (n, c, h, w) = dims4(&xv);
        let inv = E::from_f64(1.0 / (n * h * w) as f64);
        let mut out = ArrayD::zeros(IxDyn(&[c]));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[[ci]] = out[[ci] ] + xv[[ni, ci, y, x]];
                    }
                }
            }
        }
        out.mapv_inplace(|v| v * inv);
        let id = self.g.push_op(
            vec![self.id],
            out,
            Box::new(move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g[[ci]] * inv;
                        for y in 0..h {
                            for x in 0..w {
                                dx[[ni, ci, y, x]] = gv;
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        );
        Var { g: self.g, id }
    }

    /// (C) -> (N, C, H, W), constant over batch and space.
    pub fn broadcast_c(self, n: usize, h: usize, w: usize) -> Var<'g, E> {
        let xv = self.value();
        assert_eq!(xv.ndim(), 1, "broadcast_c expects a vector");
        let c = xv.len();
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
        for ni in 0..n {
            for ci in 0..c {
                let v = xv[[ci]];
                for y in 0..h {
                    for x in 0..w {
                        out[[ni, ci, y, x]] = v;
                    }
                }
            }
        }
        let id = self.g.push_op(
            vec![self.id],
            out,
            Box::new(move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = ArrayD::zeros(IxDyn(&[c]));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                dx[[ci]] = dx[[ci]] + g[[ni, ci, y, x]];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        );
        Var { g: self.g, id }
    }

    /// (N, C) -> (N, C, H, W), constant over space. Used to broadcast style
    /// vectors onto instance grids.
    pub fn broadcast_nc(self, h: usize, w: usize) -> Var<'g, E> {
        let xv = self.value();
        assert_eq!(xv.ndim(), 2, "broadcast_nc expects (N, C)");
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, h, w]));
        for ni in 0..n {
            for ci in 0..c {
                let v = xv[[ni, ci]];
                for y in 0..h {
                    for x in 0..w {
                        out[[ni, ci, y, x]] = v;
                    }
                }
            }
        }
        let id = self.g.push_op(
            vec![self.id],
            out,
            Box::new(move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = ArrayD::zeros(IxDyn(&[n, c]));
                for ni in 0..n {
                    for ci in 0..c {
                        let mut acc = E::zero();
                        for y in 0..h {
                            for x in 0..w {
                                acc = acc + g[[ni, ci, y, x]];
                            }
                        }
                        dx[[ni, ci]] = acc;
                    }
                }
                vec![Some(dx)]
            }),
        );
        Var { g: self.g, id }
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, E> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        let out = xv
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible size")
            .to_owned();
        let id = self.g.push_op(
            vec![self.id],
            out,
            Box::new(move |g, needs| {
                if needs[0] {
                    vec![Some(
                        g.to_shape(IxDyn(&old)).expect("reshape back").to_owned(),
                    )]
                } else {
                    vec![None]
                }
            }),
        );
        Var { g: self.g, id }
    }

    /// 2-D matrix product: (M, K) x (K, N) -> (M, N).
    pub fn matmul(self, rhs: Var<'g, E>) -> Var<'g, E> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-d");
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-d");
        let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        let (av, bv) = (a.clone(), b.clone());
        let id = self.g.push_op(
            vec![self.id, rhs.id],
            out,
            Box::new(move |g, needs| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                let da = needs[0].then(|| {
                    let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    g2.dot(&b2.t()).into_dyn()
                });
                let db = needs[1].then(|| {
                    let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    a2.t().dot(&g2).into_dyn()
                });
                vec![da, db]
            }),
        );
        Var { g: self.g, id }
    }

    pub fn transpose2(self) -> Var<'g, E> {
        let xv = self.value();
        assert_eq!(xv.ndim(), 2);
        let out = xv.t().as_standard_layout().to_owned().into_dyn();
        let id = self.g.push_op(
            vec![self.id],
            out,
            Box::new(move |g, needs| {
                if needs[0] {
                    vec![Some(g.t().as_standard_layout().to_owned().into_dyn())]
                } else {
                    vec![None]
                }
            }),
        );
        Var { g: self.g, id }
    }

    /// (M, N) + (N) row bias.
    pub fn add_bias_row(self, bias: Var<'g, E>) -> Var<'g, E> {
        let a = self.value();
        let b = bias.value();
        assert_eq!(a.ndim(), 2);
        assert_eq!(b.ndim(), 1);
        assert_eq!(a.shape()[1], b.len(), "bias length mismatch");
        let mut out = (*a).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (o, bv) in row.iter_mut().zip(b.iter()) {
                *o = *o + *bv;
            }
        }
        let ncols = b.len();
        let id = self.g.push_op(
            vec![self.id, bias.id],
            out,
            Box::new(move |g, needs| {
                let da = needs[0].then(|| g.clone());
                let db = needs[1].then(|| {
                    let mut acc = ArrayD::zeros(IxDyn(&[ncols]));
                    for row in g.axis_iter(Axis(0)) {
                        for (a, gv) in acc.iter_mut().zip(row.iter()) {
                            *a = *a + *gv;
                        }
                    }
                    acc
                });
                vec![da, db]
            }),
        );
        Var { g: self.g, id }
    }

    /// Crop the last two (spatial) axes: rows `h0..h1`, cols `w0..w1`.
    /// Works on 3-d and 4-d tensors. Backward zero-pads.
    pub fn crop2d(self, h0: usize, h1: usize, w0: usize, w1: usize) -> Var<'g, E> {
        let xv = self.value();
        let nd = xv.ndim();
        assert!(nd == 3 || nd == 4, "crop2d expects 3-d or 4-d");
        let (hax, wax) = (nd - 2, nd - 1);
        let (hh, ww) = (xv.shape()[hax], xv.shape()[wax]);
        assert!(h0 < h1 && h1 <= hh && w0 < w1 && w1 <= ww, "crop2d out of range");
        let out = xv
            .slice_axis(Axis(hax), Slice::from(h0..h1))
            .slice_axis(Axis(wax), Slice::from(w0..w1))
            .to_owned();
        let full_shape = xv.shape().to_vec();
        let id = self.g.push_op(
            vec![self.id],
            out,
            Box::new(move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = ArrayD::zeros(IxDyn(&full_shape));
                dx.slice_axis_mut(Axis(hax), Slice::from(h0..h1))
                    .slice_axis_mut(Axis(wax), Slice::from(w0..w1))
                    .assign(g);
                vec![Some(dx)]
            }),
        );
        Var { g: self.g, id }
    }

    /// Nearest-neighbor 2x upsampling on NCHW.
    pub fn upsample_nearest2(self) -> Var<'g, E> {
        let xv = self.value();
        assert_eq!(xv.ndim(), 4);
        let (n, c, h, w) = dims4(&xv);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = xv[[ni, ci, y, x]];
                        out[[ni, ci, 2 * y, 2 * x]] = v;
                        out[[ni, ci, 2 * y, 2 * x + 1]] = v;
                        out[[ni, ci, 2 * y + 1, 2 * x]] = v;
                        out[[ni, ci, 2 * y + 1, 2 * x + 1]] = v;
                    }
                }
            }
        }
        let id = self.g.push_op(
            vec![self.id],
            out,
            Box::new(move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                dx[[ni, ci, y, x]] = g[[ni, ci, 2 * y, 2 * x]]
                                    + g[[ni, ci, 2 * y, 2 * x + 1]]
                                    + g[[ni, ci, 2 * y + 1, 2 * x]]
                                    + g[[ni, ci, 2 * y + 1, 2 * x + 1]];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        );
        Var { g: self.g, id }
    }

    /// 2x2 area-average downsampling on NCHW (stride 2). Requires even H, W.
    pub fn avg_pool2(self) -> Var<'g, E> {
        let xv = self.value();
        assert_eq!(xv.ndim(), 4);
        let (n, c, h, w) = dims4(&xv);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let q = E::from_f64(0.25);
        let mut out = ArrayD::zeros(IxDyn(&[n, c, oh, ow]));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        out[[ni, ci, y, x]] = (xv[[ni, ci, 2 * y, 2 * x]]
                            + xv[[ni, ci, 2 * y, 2 * x + 1]]
                            + xv[[ni, ci, 2 * y + 1, 2 * x]]
                            + xv[[ni, ci, 2 * y + 1, 2 * x + 1]])
                            * q;
                    }
                }
            }
        }
        let id = self.g.push_op(
            vec![self.id],
            out,
            Box::new(move |g, needs| {
                if !needs[0] {
                    return vec![None];
                }
                let mut dx = ArrayD::zeros(IxDyn(&[n, c, h, w]));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let gv = g[[ni, ci, y, x]] * q;
                                dx[[ni, ci, 2 * y, 2 * x]] = gv;
                                dx[[ni, ci, 2 * y, 2 * x + 1]] = gv;
                                dx[[ni, ci, 2 * y + 1, 2 * x]] = gv;
                                dx[[ni, ci, 2 * y + 1, 2 * x + 1]] = gv;
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        );
        Var { g: self.g, id }
    }

    /// Gate (M, D, S, S) features by an (M, 1, S, S) mask.
    pub fn mul_mask(self, mask: Var<'g, E>) -> Var<'g, E> {
        let x = self.value();
        let m = mask.value();
        assert_eq!(x.ndim(), 4);
        assert_eq!(m.ndim(), 4);
        let (mm, d, s1, s2) = dims4(&x);
        assert_eq!(m.shape(), &[mm, 1, s1, s2], "mask shape mismatch");
        let mut out = ArrayD::zeros(IxDyn(&[mm, d, s1, s2]));
        for mi in 0..mm {
            for di in 0..d {
                for y in 0..s1 {
                    for xx in 0..s2 {
                        out[[mi, di, y, xx]] = x[[mi, di, y, xx]] * m[[mi, 0, y, xx]];
                    }
                }
            }
        }
        let (xc, mc) = (x.clone(), m.clone());
        let id = self.g.push_op(
            vec![self.id, mask.id],
            out,
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = ArrayD::zeros(IxDyn(&[mm, d, s1, s2]));
                    for mi in 0..mm {
                        for di in 0..d {
                            for y in 0..s1 {
                                for xx in 0..s2 {
                                    dx[[mi, di, y, xx]] =
                                        g[[mi, di, y, xx]] * mc[[mi, 0, y, xx]];
                                }
                            }
                        }
                    }
                    dx
                });
                let dm = needs[1].then(|| {
                    let mut dm = ArrayD::zeros(IxDyn(&[mm, 1, s1, s2]));
                    for mi in 0..mm {
                        for y in 0..s1 {
                            for xx in 0..s2 {
                                let mut acc = E::zero();
                                for di in 0..d {
                                    acc = acc + g[[mi, di, y, xx]] * xc[[mi, di, y, xx]];
                                }
                                dm[[mi, 0, y, xx]] = acc;
                            }
                        }
                    }
                    dm
                });
                vec![dx, dm]
            }),
        );
        Var { g: self.g, id }
    }

    /// Fill masks with embeddings: (M, D) outer (M, 1, S, S) -> (M, D, S, S).
    pub fn outer_channel(self, mask: Var<'g, E>) -> Var<'g, E> {
        let e = self.value();
        let m = mask.value();
        assert_eq!(e.ndim(), 2, "outer_channel embeddings must be (M, D)");
        assert_eq!(m.ndim(), 4, "outer_channel mask must be (M, 1, S, S)");
        let (mm, d) = (e.shape()[0], e.shape()[1]);
        assert_eq!(m.shape()[0], mm);
        assert_eq!(m.shape()[1], 1);
        let (s1, s2) = (m.shape()[2], m.shape()[3]);
        let mut out = ArrayD::zeros(IxDyn(&[mm, d, s1, s2]));
        for mi in 0..mm {
            for di in 0..d {
                let ev = e[[mi, di]];
                for y in 0..s1 {
                    for x in 0..s2 {
                        out[[mi, di, y, x]] = ev * m[[mi, 0, y, x]];
                    }
                }
            }
        }
        let (ec, mc) = (e.clone(), m.clone());
        let id = self.g.push_op(
            vec![self.id, mask.id],
            out,
            Box::new(move |g, needs| {
                let de = needs[0].then(|| {
                    let mut de = ArrayD::zeros(IxDyn(&[mm, d]));
                    for mi in 0..mm {
                        for di in 0..d {
                            let mut acc = E::zero();
                            for y in 0..s1 {
                                for x in 0..s2 {
                                    acc = acc + g[[mi, di, y, x]] * mc[[mi, 0, y, x]];
                                }
                            }
                            de[[mi, di]] = acc;
                        }
                    }
                    de
                });
                let dm = needs[1].then(|| {
                    let mut dm = ArrayD::zeros(IxDyn(&[mm, 1, s1, s2]));
                    for mi in 0..mm {
                        for y in 0..s1 {
                            for x in 0..s2 {
                                let mut acc = E::zero();
                                for di in 0..d {
                                    acc = acc + g[[mi, di, y, x]] * ec[[mi, di]];
                                }
                                dm[[mi, 0, y, x]] = acc;
                            }
                        }
                    }
                    dm
                });
                vec![de, dm]
            }),
        );
        Var { g: self.g, id }
    }
}

pub(crate) fn dims4<E: Elem>(a: &ArrayD<E>) -> (usize, usize, usize, usize) {
    (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3])
}

/// Concatenate along `axis`. All parts must agree on the other axes.
pub fn concat<'g, E: Elem>(parts: &[Var<'g, E>], axis: usize) -> Var<'g, E> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let g = parts[0].g;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let id = g.push_op(
        parts.iter().map(|p| p.id).collect(),
        out,
        Box::new(move |gr, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for (i, &sz) in sizes.iter().enumerate() {
                grads.push(needs[i].then(|| {
                    gr.slice_axis(Axis(axis), Slice::from(offset..offset + sz))
                        .to_owned()
                }));
                offset += sz;
            }
            grads
        }),
    );
    Var { g, id }
}

/// Stack equally-shaped tensors along a new leading axis.
pub fn stack0<'g, E: Elem>(parts: &[Var<'g, E>]) -> Var<'g, E> {
    assert!(!parts.is_empty(), "stack0 of zero tensors");
    let g = parts[0].g;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::stack(Axis(0), &views).expect("stack0: shape mismatch");
    let m = parts.len();
    let id = g.push_op(
        parts.iter().map(|p| p.id).collect(),
        out,
        Box::new(move |gr, needs| {
            (0..m)
                .map(|i| needs[i].then(|| gr.index_axis(Axis(0), i).to_owned()))
                .collect()
        }),
    );
    Var { g, id }
}

/// Sum a non-empty list of same-shaped vars.
pub fn sum_vars<'g, E: Elem>(parts: &[Var<'g, E>]) -> Var<'g, E> {
    assert!(!parts.is_empty(), "sum_vars of zero tensors");
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = acc.add(*p);
    }
    acc
}

/// Cross-entropy over logits (N, K) with integer targets; returns the mean.
pub fn cross_entropy<'g, E: Elem>(logits: Var<'g, E>, targets: &[usize]) -> Var<'g, E> {
    let lv = logits.value();
    assert_eq!(lv.ndim(), 2);
    let (n, k) = (lv.shape()[0], lv.shape()[1]);
    assert_eq!(targets.len(), n, "targets length mismatch");
    let mut probs = ArrayD::zeros(IxDyn(&[n, k]));
    let mut loss = E::zero();
    for i in 0..n {
        let mut mx = lv[[i, 0]];
        for j in 1..k {
            mx = mx.max(lv[[i, j]]);
        }
        let mut z = E::zero();
        for j in 0..k {
            let e = (lv[[i, j]] - mx).exp();
            probs[[i, j]] = e;
            z = z + e;
        }
        for j in 0..k {
            probs[[i, j]] = probs[[i, j]] / z;
        }
        loss = loss - (probs[[i, targets[i]]].max(E::from_f64(1e-30))).ln();
    }
    loss = loss * E::from_f64(1.0 / n as f64);
    let out = ArrayD::from_elem(IxDyn(&[]), loss);
    let tg = targets.to_vec();
    let id = logits.g.push_op(
        vec![logits.id],
        out,
        Box::new(move |g, needs| {
            if !needs[0] {
                return vec![None];
            }
            let gs = *g.first().expect("scalar") * E::from_f64(1.0 / n as f64);
            let mut dl = probs.clone();
            for i in 0..n {
                dl[[i, tg[i]]] = dl[[i, tg[i]]] - E::one();
            }
            dl.mapv_inplace(|v| v * gs);
            vec![Some(dl)]
        }),
    );
    Var {
        g: logits.g,
        id,
    }
}

impl<'g, E: Elem> std::ops::Add for Var<'g, E> {
    type Output = Var<'g, E>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g, E: Elem> std::ops::Sub for Var<'g, E> {
    type Output = Var<'g, E>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g, E: Elem> std::ops::Mul for Var<'g, E> {
    type Output = Var<'g, E>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}
