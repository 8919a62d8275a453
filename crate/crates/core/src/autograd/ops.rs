//! Elementwise, reduction and dense linear-algebra ops.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{Graph, Tensor, Var};

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices.
///
/// `a` is stored as `(a_rows, a_cols)`; `trans_a` selects its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    alpha: f64,
    beta: f64,
) {
    let a = ArrayView2::from_shape(a_dims, a).expect("gemm: lhs shape");
    let b = ArrayView2::from_shape(b_dims, b).expect("gemm: rhs shape");
    let a = if trans_a { a.reversed_axes() } else { a };
    let b = if trans_b { b.reversed_axes() } else { b };
    let mut c = ArrayViewMut2::from_shape((a.nrows(), b.ncols()), c).expect("gemm: out shape");
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.record(
            value,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad().clone()), Some(ctx.grad().clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.record(
            value,
            vec![a, b],
            Box::new(|ctx| vec![Some(ctx.grad().clone()), Some(ctx.grad().scale(-1.0))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.record(
            value,
            vec![a, b],
            Box::new(move |ctx| {
                let g = ctx.grad();
                vec![
                    ctx.needs(0).then(|| g.zip_map(ctx.value(b), |g, y| g * y)),
                    ctx.needs(1).then(|| g.zip_map(ctx.value(a), |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.record(value, vec![a], Box::new(move |ctx| vec![Some(ctx.grad().scale(s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.record(value, vec![a], Box::new(|ctx| vec![Some(ctx.grad().clone())]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.record(
            value,
            vec![a],
            Box::new(move |ctx| {
                vec![Some(ctx.grad().zip_map(ctx.value(a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.record(
            value,
            vec![a],
            Box::new(move |ctx| {
                vec![Some(ctx.grad().zip_map(ctx.value(a), |g, x| {
                    if x > 0.0 {
                        g
                    } else {
                        slope * g
                    }
                }))]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.record(
            value,
            vec![a],
            Box::new(|ctx| vec![Some(ctx.grad().zip_map(ctx.output(), |g, y| g * (1.0 - y * y)))]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.record(
            value,
            vec![a],
            Box::new(|ctx| vec![Some(ctx.grad().zip_map(ctx.output(), |g, y| g * y * (1.0 - y)))]),
        )
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / x);
        self.record(
            value,
            vec![a],
            Box::new(|ctx| vec![Some(ctx.grad().zip_map(ctx.output(), |g, y| -g * y * y))]),
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.record(
            value,
            vec![a],
            Box::new(move |ctx| vec![Some(Tensor::full(&shape, ctx.grad().item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    /// Sums over every axis but the first: `[N, ...] -> [N]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        let value = Tensor::new(&[n], (0..n).map(|i| t.row(i).iter().sum()).collect());
        let shape = t.shape().to_vec();
        self.record(
            value,
            vec![a],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let stride: usize = shape[1..].iter().product();
                let mut out = Vec::with_capacity(n * stride);
                for gi in g {
                    out.extend(std::iter::repeat_n(*gi, stride));
                }
                vec![Some(Tensor::new(&shape, out))]
            }),
        )
    }

    /// `y = x W^T + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, wi) = self.value(w).dims2();
        assert_eq!(i, wi, "linear: input width {i} vs weight width {wi}");
        let mut out = vec![0.0; n * o];
        gemm(
            self.value(x).data(),
            (n, i),
            false,
            self.value(w).data(),
            (o, i),
            true,
            &mut out,
            1.0,
            0.0,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o);
            for row in out.chunks_mut(o) {
                for (y, bb) in row.iter_mut().zip(bias) {
                    *y += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record(
            Tensor::new(&[n, o], out),
            parents,
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let mut grads = Vec::with_capacity(3);
                grads.push(ctx.needs(0).then(|| {
                    let mut dx = vec![0.0; n * i];
                    gemm(g, (n, o), false, ctx.value(w).data(), (o, i), false, &mut dx, 1.0, 0.0);
                    Tensor::new(&[n, i], dx)
                }));
                grads.push(ctx.needs(1).then(|| {
                    let mut dw = vec![0.0; o * i];
                    gemm(g, (n, o), true, ctx.value(x).data(), (n, i), false, &mut dw, 1.0, 0.0);
                    Tensor::new(&[o, i], dw)
                }));
                if b.is_some() {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        for (d, gg) in db.iter_mut().zip(row) {
                            *d += gg;
                        }
                    }
                    grads.push(Some(Tensor::new(&[o], db)));
                }
                grads
            }),
        )
    }

    /// Batched matrix product `[N, P, K] x [N, K, Q] -> [N, P, Q]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (n, p, k) = self.value(a).dims3();
        let (nb, kb, q) = self.value(b).dims3();
        assert_eq!((n, k), (nb, kb), "bmm shape mismatch");
        let mut out = vec![0.0; n * p * q];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for s in 0..n {
                gemm(
                    &av[s * p * k..(s + 1) * p * k],
                    (p, k),
                    false,
                    &bv[s * k * q..(s + 1) * k * q],
                    (k, q),
                    false,
                    &mut out[s * p * q..(s + 1) * p * q],
                    1.0,
                    0.0,
                );
            }
        }
        self.record(
            Tensor::new(&[n, p, q], out),
            vec![a, b],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let av = ctx.value(a).data();
                let bv = ctx.value(b).data();
                let da = ctx.needs(0).then(|| {
                    let mut da = vec![0.0; n * p * k];
                    for s in 0..n {
                        gemm(
                            &g[s * p * q..(s + 1) * p * q],
                            (p, q),
                            false,
                            &bv[s * k * q..(s + 1) * k * q],
                            (k, q),
                            true,
                            &mut da[s * p * k..(s + 1) * p * k],
                            1.0,
                            0.0,
                        );
                    }
                    Tensor::new(&[n, p, k], da)
                });
                let db = ctx.needs(1).then(|| {
                    let mut db = vec![0.0; n * k * q];
                    for s in 0..n {
                        gemm(
                            &av[s * p * k..(s + 1) * p * k],
                            (p, k),
                            true,
                            &g[s * p * q..(s + 1) * p * q],
                            (p, q),
                            false,
                            &mut db[s * k * q..(s + 1) * k * q],
                            1.0,
                            0.0,
                        );
                    }
                    Tensor::new(&[n, k, q], db)
                });
                vec![da, db]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let k = *t.shape().last().expect("softmax of rank-0 tensor");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let shape = t.shape().to_vec();
        self.record(
            Tensor::new(&shape, out),
            vec![a],
            Box::new(move |ctx| {
                let y = ctx.output().data();
                let g = ctx.grad().data();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                vec![Some(Tensor::new(&shape, dx))]
            }),
        )
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn l2_normalize_last(&mut self, a: Var) -> Var {
        const MIN_NORM: f64 = 1e-12;
        let t = self.value(a);
        let k = *t.shape().last().expect("normalize of rank-0 tensor");
        let norms: Vec<f64> = t
            .data()
            .chunks(k)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(MIN_NORM))
            .collect();
        let mut out = t.data().to_vec();
        for (row, nrm) in out.chunks_mut(k).zip(&norms) {
            for x in row.iter_mut() {
                *x /= nrm;
            }
        }
        let shape = t.shape().to_vec();
        self.record(
            Tensor::new(&shape, out),
            vec![a],
            Box::new(move |ctx| {
                let y = ctx.output().data();
                let g = ctx.grad().data();
                let mut dx = vec![0.0; y.len()];
                for (((dr, yr), gr), nrm) in
                    dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)).zip(&norms)
                {
                    if *nrm <= MIN_NORM {
                        for (d, g) in dr.iter_mut().zip(gr) {
                            *d = g / nrm;
                        }
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (g - y * dot) / nrm;
                    }
                }
                vec![Some(Tensor::new(&shape, dx))]
            }),
        )
    }

    /// Divides each row of `[N, K]` by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let sums: Vec<f64> = self.value(a).data().chunks(k).map(|r| r.iter().sum()).collect();
        let mut out = self.value(a).data().to_vec();
        for (row, s) in out.chunks_mut(k).zip(&sums) {
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.record(
            Tensor::new(&[n, k], out),
            vec![a],
            Box::new(move |ctx| {
                let y = ctx.output().data();
                let g = ctx.grad().data();
                let mut dx = vec![0.0; n * k];
                for (((dr, yr), gr), s) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)).zip(&sums)
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (d, g) in dr.iter_mut().zip(gr) {
                        *d = (g - dot) / s;
                    }
                }
                vec![Some(Tensor::new(&[n, k], dx))]
            }),
        )
    }

    /// Concatenates along axis 1. All inputs share axis 0 and every axis after 1.
    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let tail: usize = first[2..].iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s[0], n, "concat: batch mismatch");
                assert_eq!(&s[2..], &first[2..], "concat: trailing dims mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total * tail);
        for s in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[s * w * tail..(s + 1) * w * tail]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        self.record(
            Tensor::new(&shape, out),
            parts.to_vec(),
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let mut grads: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(n * w * tail)).collect();
                let mut off = 0;
                for _ in 0..n {
                    for (gv, &w) in grads.iter_mut().zip(&widths) {
                        gv.extend_from_slice(&g[off..off + w * tail]);
                        off += w * tail;
                    }
                }
                grads
                    .into_iter()
                    .zip(&widths)
                    .map(|(gv, &w)| {
                        let mut s = first.clone();
                        s[1] = w;
                        Some(Tensor::new(&s, gv))
                    })
                    .collect()
            }),
        )
    }

    /// Columns `start..start+len` of a `[N, K]` tensor.
    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, k) = self.value(a).dims2();
        assert!(start + len <= k);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for row in d.chunks(k) {
            out.extend_from_slice(&row[start..start + len]);
        }
        self.record(
            Tensor::new(&[n, len], out),
            vec![a],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let mut dx = vec![0.0; n * k];
                for (dr, gr) in dx.chunks_mut(k).zip(g.chunks(len)) {
                    dr[start..start + len].copy_from_slice(gr);
                }
                vec![Some(Tensor::new(&[n, k], dx))]
            }),
        )
    }

    /// Reinterprets the shape without moving data.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let orig = self.shape(a).to_vec();
        let value = self.value(a).clone().reshape(shape);
        self.record(
            value,
            vec![a],
            Box::new(move |ctx| vec![Some(ctx.grad().clone().reshape(&orig))]),
        )
    }

    /// `[N, A, B] -> [N, B, A]`.
    pub fn transpose12(&mut self, a: Var) -> Var {
        let (n, r, c) = self.value(a).dims3();
        let value = Tensor::new(&[n, c, r], transpose_batched(self.value(a).data(), n, r, c));
        self.record(
            value,
            vec![a],
            Box::new(move |ctx| {
                vec![Some(Tensor::new(
                    &[n, r, c],
                    transpose_batched(ctx.grad().data(), n, c, r),
                ))]
            }),
        )
    }

    /// `[N, C, H, W] -> [N, H*W, C]`.
    pub fn to_tokens(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let flat = self.reshape(a, &[n, c, h * w]);
        self.transpose12(flat)
    }

    /// `[N, H*W, C] -> [N, C, H, W]`.
    pub fn from_tokens(&mut self, a: Var, h: usize, w: usize) -> Var {
        let (n, hw, c) = self.value(a).dims3();
        assert_eq!(hw, h * w);
        let t = self.transpose12(a);
        self.reshape(t, &[n, c, h, w])
    }

    /// Multiplies `[N, C, H, W]` by a `[N, 1, H, W]` map broadcast over channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, m: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(m), &[n, 1, h, w], "broadcast map shape");
        let hw = h * w;
        let xv = self.value(x).data();
        let mv = self.value(m).data();
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            let mm = &mv[s * hw..(s + 1) * hw];
            for ch in 0..c {
                let o = (s * c + ch) * hw;
                for p in 0..hw {
                    out[o + p] = xv[o + p] * mm[p];
                }
            }
        }
        self.record(
            Tensor::new(&[n, c, h, w], out),
            vec![x, m],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let xv = ctx.value(x).data();
                let mv = ctx.value(m).data();
                let dx = ctx.needs(0).then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let o = (s * c + ch) * hw;
                            for p in 0..hw {
                                dx[o + p] = g[o + p] * mv[s * hw + p];
                            }
                        }
                    }
                    Tensor::new(&[n, c, h, w], dx)
                });
                let dm = ctx.needs(1).then(|| {
                    let mut dm = vec![0.0; n * hw];
                    for s in 0..n {
                        for ch in 0..c {
                            let o = (s * c + ch) * hw;
                            for p in 0..hw {
                                dm[s * hw + p] += g[o + p] * xv[o + p];
                            }
                        }
                    }
                    Tensor::new(&[n, 1, h, w], dm)
                });
                vec![dx, dm]
            }),
        )
    }

    /// `x * gamma + beta` with per-sample, per-channel `gamma, beta: [N, C]`.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(gamma), &[n, c]);
        assert_eq!(self.shape(beta), &[n, c]);
        let hw = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for sc in 0..n * c {
            let (g, b) = (gv[sc], bv[sc]);
            for p in 0..hw {
                out[sc * hw + p] = xv[sc * hw + p] * g + b;
            }
        }
        self.record(
            Tensor::new(&[n, c, h, w], out),
            vec![x, gamma, beta],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let xv = ctx.value(x).data();
                let gv = ctx.value(gamma).data();
                let dx = ctx.needs(0).then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for sc in 0..n * c {
                        for p in 0..hw {
                            dx[sc * hw + p] = g[sc * hw + p] * gv[sc];
                        }
                    }
                    Tensor::new(&[n, c, h, w], dx)
                });
                let mut dg = vec![0.0; n * c];
                let mut db = vec![0.0; n * c];
                for sc in 0..n * c {
                    let mut a = 0.0;
                    let mut b = 0.0;
                    for p in 0..hw {
                        a += g[sc * hw + p] * xv[sc * hw + p];
                        b += g[sc * hw + p];
                    }
                    dg[sc] = a;
                    db[sc] = b;
                }
                vec![
                    dx,
                    Some(Tensor::new(&[n, c], dg)),
                    Some(Tensor::new(&[n, c], db)),
                ]
            }),
        )
    }

    /// Per-channel normalization over the batch and spatial axes.
    ///
    /// Returns the normalized output and the batch mean and biased variance per channel.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let count = (n * hw) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for sm in 0..n {
                s += xv[(sm * c + ch) * hw..(sm * c + ch + 1) * hw].iter().sum::<f64>();
            }
            let m = s / count;
            let mut v = 0.0;
            for sm in 0..n {
                v += xv[(sm * c + ch) * hw..(sm * c + ch + 1) * hw]
                    .iter()
                    .map(|x| (x - m) * (x - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xv.len()];
        for sm in 0..n {
            for ch in 0..c {
                let o = (sm * c + ch) * hw;
                for p in 0..hw {
                    out[o + p] = (xv[o + p] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let y = self.record(
            Tensor::new(&[n, c, h, w], out),
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let y = ctx.output().data();
                let mut dx = vec![0.0; g.len()];
                for ch in 0..c {
                    let mut mg = 0.0;
                    let mut mgy = 0.0;
                    for sm in 0..n {
                        let o = (sm * c + ch) * hw;
                        for p in 0..hw {
                            mg += g[o + p];
                            mgy += g[o + p] * y[o + p];
                        }
                    }
                    mg /= count;
                    mgy /= count;
                    for sm in 0..n {
                        let o = (sm * c + ch) * hw;
                        for p in 0..hw {
                            dx[o + p] = inv_std[ch] * (g[o + p] - mg - y[o + p] * mgy);
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx))]
            }),
        );
        (y, mean, var)
    }

    /// `(x - mean[c]) / sqrt(var[c] + eps)` with fixed statistics.
    pub fn normalize_channels(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(mean.len(), c);
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = self.value(x).data().to_vec();
        for sm in 0..n {
            for ch in 0..c {
                for v in &mut out[(sm * c + ch) * hw..(sm * c + ch + 1) * hw] {
                    *v = (*v - mean[ch]) * inv_std[ch];
                }
            }
        }
        self.record(
            Tensor::new(&[n, c, h, w], out),
            vec![x],
            Box::new(move |ctx| {
                let mut dx = ctx.grad().clone();
                for sm in 0..n {
                    for ch in 0..c {
                        for v in &mut dx.data_mut()[(sm * c + ch) * hw..(sm * c + ch + 1) * hw] {
                            *v *= inv_std[ch];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}

fn transpose_batched(d: &[f64], n: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for s in 0..n {
        let src = &d[s * r * c..(s + 1) * r * c];
        let dst = &mut out[s * r * c..(s + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}
