//! Convolution, pooling and resampling on NCHW tensors.

use super::ops::gemm;
use super::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Reflect index into `0..n` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Source taps for one output coordinate of a half-pixel-centred bilinear resize.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Graph {
    /// 2-D cross-correlation with zero padding. `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than input");
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let hw_out = geom.ho * geom.wo;
        let rows = geom.rows();
        let mut out = vec![0.0; n * cout * hw_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = vec![0.0; rows * hw_out];
            for s in 0..n {
                im2col(&xv[s * cin * h * wd..(s + 1) * cin * h * wd], &geom, &mut cols);
                gemm(
                    wv,
                    (cout, rows),
                    false,
                    &cols,
                    (rows, hw_out),
                    false,
                    &mut out[s * cout * hw_out..(s + 1) * cout * hw_out],
                    1.0,
                    0.0,
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for co in 0..cout {
                        let o = (s * cout + co) * hw_out;
                        for v in &mut out[o..o + hw_out] {
                            *v += bv[co];
                        }
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.record(
            Tensor::new(&[n, cout, geom.ho, geom.wo], out),
            parents,
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let xv = ctx.value(x).data();
                let wv = ctx.value(w).data();
                let mut cols = vec![0.0; rows * hw_out];
                let mut dcols = vec![0.0; rows * hw_out];
                let mut dx = ctx.needs(0).then(|| vec![0.0; n * cin * h * wd]);
                let mut dw = ctx.needs(1).then(|| vec![0.0; cout * rows]);
                for s in 0..n {
                    let gs = &g[s * cout * hw_out..(s + 1) * cout * hw_out];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&xv[s * cin * h * wd..(s + 1) * cin * h * wd], &geom, &mut cols);
                        gemm(gs, (cout, hw_out), false, &cols, (rows, hw_out), true, dw, 1.0, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            wv,
                            (cout, rows),
                            true,
                            gs,
                            (cout, hw_out),
                            false,
                            &mut dcols,
                            1.0,
                            0.0,
                        );
                        col2im(&dcols, &geom, &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd]);
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::new(&[n, cin, h, wd], d)),
                    dw.map(|d| Tensor::new(&[cout, cin, k, k], d)),
                ];
                if b.is_some() {
                    let mut db = vec![0.0; cout];
                    for s in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let o = (s * cout + co) * hw_out;
                            *d += g[o..o + hw_out].iter().sum::<f64>();
                        }
                    }
                    grads.push(Some(Tensor::new(&[cout], db)));
                }
                grads
            }),
        )
    }

    /// Non-overlapping `f x f` average pooling.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % f == 0 && w % f == 0, "avg_pool: {h}x{w} not divisible by {f}");
        let (ho, wo) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f64;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * ho + y / f) * wo + xx / f] += xv[(p * h + y) * w + xx] * inv;
                }
            }
        }
        self.record(
            Tensor::new(&[n, c, ho, wo], out),
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(p * h + y) * w + xx] = g[(p * ho + y / f) * wo + xx / f] * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Spatial mean: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        let s = self.global_sum_pool(x);
        self.scale(s, 1.0 / (h * w) as f64)
    }

    /// Spatial sum: `[N, C, H, W] -> [N, C]`.
    pub fn global_sum_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum())
            .collect();
        self.record(
            Tensor::new(&[n, c], out),
            vec![x],
            Box::new(move |ctx| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for g in ctx.grad().data() {
                    dx.extend(std::iter::repeat_n(*g, hw));
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h * f, w * f);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = xv[(p * h + y / f) * w + xx / f];
                }
            }
        }
        self.record(
            Tensor::new(&[n, c, ho, wo], out),
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            dx[(p * h + y / f) * w + xx / f] += g[(p * ho + y) * wo + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Bilinear resize with half-pixel centres (no antialiasing).
    pub fn resize_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let ty = bilinear_taps(ho, h);
        let tx = bilinear_taps(wo, w);
        let value = Tensor::new(
            &[n, c, ho, wo],
            resize_bilinear_raw(self.value(x).data(), n * c, (h, w), &ty, &tx),
        );
        self.record(
            value,
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = g[(p * ho + oy) * wo + ox];
                            src[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            src[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            src[y1 * w + x0] += gv * fy * (1.0 - fx);
                            src[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], dx))]
            }),
        )
    }

    /// `k x k` mean filter with reflect padding; output has the input's size.
    pub fn box_mean(&mut self, x: Var, k: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(k % 2 == 1, "box window must be odd");
        let r = (k / 2) as isize;
        let inv = 1.0 / (k * k) as f64;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for dy in -r..=r {
                        let sy = reflect(y as isize + dy, h);
                        for dx in -r..=r {
                            s += src[sy * w + reflect(xx as isize + dx, w)];
                        }
                    }
                    dst[y * w + xx] = s * inv;
                }
            }
        }
        self.record(
            Tensor::new(&[n, c, h, w], out),
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let mut dxv = vec![0.0; g.len()];
                for p in 0..n * c {
                    let gp = &g[p * h * w..(p + 1) * h * w];
                    let dst = &mut dxv[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = gp[y * w + xx] * inv;
                            for dy in -r..=r {
                                let sy = reflect(y as isize + dy, h);
                                for dx in -r..=r {
                                    dst[sy * w + reflect(xx as isize + dx, w)] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, c, h, w], dxv))]
            }),
        )
    }
}

fn resize_bilinear_raw(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    ty: &[(usize, usize, f64)],
    tx: &[(usize, usize, f64)],
) -> Vec<f64> {
    let (ho, wo) = (ty.len(), tx.len());
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[(p * ho + oy) * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Bilinear resize of a raw NCHW tensor outside any graph.
pub fn resize_bilinear_tensor(x: &Tensor, ho: usize, wo: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let ty = bilinear_taps(ho, h);
    let tx = bilinear_taps(wo, w);
    Tensor::new(&[n, c, ho, wo], resize_bilinear_raw(x.data(), n * c, (h, w), &ty, &tx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-2, 1), 0);
    }

    #[test]
    fn conv_matches_direct_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 5, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv, None, 2, 1);
        let y = g.value(y).clone();
        let (_, _, ho, wo) = y.dims4();
        assert_eq!((ho, wo), (3, 3));
        for s in 0..2 {
            for co in 0..4 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    acc += x.data()[((s * 3 + ci) * 5 + iy as usize) * 6 + ix as usize]
                                        * w.data()[((co * 3 + ci) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                        let got = y.data()[((s * 4 + co) * ho + oy) * wo + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_halving_is_two_by_two_average() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = resize_bilinear_tensor(&x, 1, 1);
        assert!((y.item() - 2.5).abs() < 1e-12);
    }
}
