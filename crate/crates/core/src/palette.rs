//! Palette histograms over the normalized ab plane.
//!
//! A palette is an `n_a x n_b` probability grid. The differentiable version
//! spreads every pixel over the bins with a separable inverse-quadratic kernel
//! `prod_i (1 + ((c_i - center_i) / sigma)^2)^-1`; each pixel's kernel weights
//! are normalized over the grid before averaging over pixels, so the result is
//! a distribution for any `sigma > 0`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::colorspace::ChromaMap;
use crate::error::{Error, Result};

/// Clamp applied to probabilities inside `log` so empty bins contribute zero.
pub const LOG_FLOOR: f64 = 1e-12;

/// Bin geometry and kernel width of a palette histogram.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteGrid {
    pub n_a: usize,
    pub n_b: usize,
    pub sigma: f64,
}

impl Default for PaletteGrid {
    fn default() -> Self {
        Self {
            n_a: 16,
            n_b: 16,
            sigma: 0.1,
        }
    }
}

impl PaletteGrid {
    pub fn new(n_a: usize, n_b: usize, sigma: f64) -> Result<Self> {
        let grid = Self { n_a, n_b, sigma };
        grid.validate()?;
        Ok(grid)
    }

    /// Square grid holding `bins` cells in total (`bins` must be a perfect square).
    pub fn square(bins: usize, sigma: f64) -> Result<Self> {
        let n = (bins as f64).sqrt().round() as usize;
        if n * n != bins {
            return Err(Error::Config(format!("{bins} bins is not a square grid")));
        }
        Self::new(n, n, sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_a == 0 || self.n_b == 0 {
            return Err(Error::Config(format!("empty palette grid {}x{}", self.n_a, self.n_b)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("palette sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_a * self.n_b
    }

    pub fn centers_a(&self) -> Vec<f64> {
        centers(self.n_a)
    }

    pub fn centers_b(&self) -> Vec<f64> {
        centers(self.n_b)
    }

    /// Nearest-centre bin of a single chroma coordinate.
    pub fn nearest_bin(&self, a: f64, b: f64) -> (usize, usize) {
        (axis_bin(a, self.n_a), axis_bin(b, self.n_b))
    }

    fn check_same(&self, n_a: usize, n_b: usize) -> Result<()> {
        if (self.n_a, self.n_b) != (n_a, n_b) {
            return Err(Error::GridMismatch {
                expected_a: self.n_a,
                expected_b: self.n_b,
                got_a: n_a,
                got_b: n_b,
            });
        }
        Ok(())
    }
}

fn centers(n: usize) -> Vec<f64> {
    (0..n).map(|i| (2 * i + 1) as f64 / n as f64 - 1.0).collect()
}

fn axis_bin(v: f64, n: usize) -> usize {
    (((v + 1.0) * 0.5 * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// Probability grid over the ab plane, stored row-major with `a` as the slow axis.
#[derive(Clone, Debug, PartialEq)]
pub struct PaletteHistogram {
    n_a: usize,
    n_b: usize,
    weights: Vec<f64>,
}

impl PaletteHistogram {
    const SUM_TOL: f64 = 1e-6;

    /// Validates non-negativity and unit mass.
    pub fn new(n_a: usize, n_b: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n_a * n_b || weights.is_empty() {
            return Err(Error::Shape(format!(
                "palette of {n_a}x{n_b} with {} weights",
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Invalid(format!("palette weight {w} is not a non-negative number")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::Invalid(format!("palette weights sum to {sum}, not 1")));
        }
        Ok(Self { n_a, n_b, weights })
    }

    /// Rescales non-negative weights to unit mass.
    pub fn normalized(n_a: usize, n_b: usize, mut weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::Invalid(format!("cannot normalize palette with mass {sum}")));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Self::new(n_a, n_b, weights)
    }

    pub fn uniform(n_a: usize, n_b: usize) -> Self {
        let k = n_a * n_b;
        Self {
            n_a,
            n_b,
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn one_hot(n_a: usize, n_b: usize, ia: usize, ib: usize) -> Self {
        let mut weights = vec![0.0; n_a * n_b];
        weights[ia * n_b + ib] = 1.0;
        Self { n_a, n_b, weights }
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, ia: usize, ib: usize) -> f64 {
        self.weights[ia * self.n_b + ib]
    }

    /// `(ia, ib)` of the heaviest bin (first on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        (best / self.n_b, best % self.n_b)
    }

    pub fn check_grid(&self, grid: &PaletteGrid) -> Result<()> {
        grid.check_same(self.n_a, self.n_b)
    }

    /// Rows of a `[N, K]` tensor as histograms (renormalized against rounding).
    pub fn from_rows(t: &Tensor, n_a: usize, n_b: usize) -> Result<Vec<Self>> {
        let (n, k) = t.dims2();
        if k != n_a * n_b {
            return Err(Error::Shape(format!("{k} columns for a {n_a}x{n_b} grid")));
        }
        (0..n)
            .map(|i| Self::normalized(n_a, n_b, t.row(i).to_vec()))
            .collect()
    }

    /// `[N, K]` tensor.
    pub fn stack(items: &[Self]) -> Tensor {
        let k = items[0].weights.len();
        let mut data = Vec::with_capacity(items.len() * k);
        for h in items {
            assert_eq!(h.weights.len(), k, "stacking palettes of different grids");
            data.extend_from_slice(&h.weights);
        }
        Tensor::new(&[items.len(), k], data)
    }
}

/// On-disk palette description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PaletteFile {
    pub n_a: usize,
    pub n_b: usize,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl PaletteFile {
    const READ_TOL: f64 = 1e-4;

    pub fn new(hist: &PaletteHistogram, sigma: f64) -> Self {
        Self {
            n_a: hist.n_a,
            n_b: hist.n_b,
            sigma,
            weights: hist.weights.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("palette serializes")
    }

    /// Parses and checks unit mass within `1e-4`, then renormalizes exactly.
    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        if f.weights.len() != f.n_a * f.n_b {
            return Err(Error::Shape(format!(
                "palette file declares {}x{} but holds {} weights",
                f.n_a,
                f.n_b,
                f.weights.len()
            )));
        }
        let sum: f64 = f.weights.iter().sum();
        if (sum - 1.0).abs() > Self::READ_TOL {
            return Err(Error::Invalid(format!("palette file weights sum to {sum}")));
        }
        Ok(f)
    }

    pub fn histogram(&self) -> Result<PaletteHistogram> {
        PaletteHistogram::normalized(self.n_a, self.n_b, self.weights.clone())
    }

    pub fn grid(&self) -> Result<PaletteGrid> {
        PaletteGrid::new(self.n_a, self.n_b, self.sigma)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Inverse-quadratic kernel on one axis normalized over the bins, with the
/// derivatives of the raw kernel and its normalizer.
struct AxisKernel {
    p: Vec<f64>,
    dk: Vec<f64>,
    sum: f64,
}

fn axis_kernel(v: f64, centers: &[f64], sigma: f64, with_grad: bool) -> AxisKernel {
    let mut k = Vec::with_capacity(centers.len());
    let mut dk = Vec::with_capacity(if with_grad { centers.len() } else { 0 });
    for c in centers {
        let u = (v - c) / sigma;
        let q = 1.0 / (1.0 + u * u);
        k.push(q);
        if with_grad {
            dk.push(-2.0 * u / sigma * q * q);
        }
    }
    let sum: f64 = k.iter().sum();
    let p = k.iter().map(|x| x / sum).collect();
    AxisKernel { p, dk, sum }
}

/// Soft histograms of a `[N, 2, H, W]` chroma batch, as `[N, n_a * n_b]`.
fn soft_histogram_rows(chroma: &Tensor, grid: &PaletteGrid) -> Tensor {
    let (n, c, h, w) = chroma.dims4();
    assert_eq!(c, 2);
    let hw = h * w;
    let ca = grid.centers_a();
    let cb = grid.centers_b();
    let k = grid.bins();
    let d = chroma.data();
    let mut out = vec![0.0; n * k];
    for s in 0..n {
        let row = &mut out[s * k..(s + 1) * k];
        for p in 0..hw {
            let ka = axis_kernel(d[(s * 2) * hw + p], &ca, grid.sigma, false);
            let kb = axis_kernel(d[(s * 2 + 1) * hw + p], &cb, grid.sigma, false);
            for (i, pa) in ka.p.iter().enumerate() {
                let dst = &mut row[i * grid.n_b..(i + 1) * grid.n_b];
                for (o, pb) in dst.iter_mut().zip(&kb.p) {
                    *o += pa * pb;
                }
            }
        }
        let inv = 1.0 / hw as f64;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::new(&[n, k], out)
}

fn chroma_tensor(chroma: &ChromaMap) -> Result<Tensor> {
    ChromaMap::batch(std::slice::from_ref(chroma))
}

/// Differentiable kernel histogram of one chroma map.
pub fn soft_histogram(chroma: &ChromaMap, grid: &PaletteGrid) -> Result<PaletteHistogram> {
    grid.validate()?;
    let t = chroma_tensor(chroma)?;
    let rows = soft_histogram_rows(&t, grid);
    PaletteHistogram::normalized(grid.n_a, grid.n_b, rows.row(0).to_vec())
}

/// Nearest-centre counting histogram.
pub fn hard_histogram(chroma: &ChromaMap, grid: &PaletteGrid) -> Result<PaletteHistogram> {
    grid.validate()?;
    let mut counts = vec![0.0; grid.bins()];
    for ab in chroma.data().chunks(2) {
        let (i, j) = grid.nearest_bin(ab[0], ab[1]);
        counts[i * grid.n_b + j] += 1.0;
    }
    PaletteHistogram::normalized(grid.n_a, grid.n_b, counts)
}

fn entropy_of(weights: &[f64]) -> f64 {
    -weights.iter().map(|&h| h * h.max(LOG_FLOOR).ln()).sum::<f64>()
}

/// Shannon entropy in nats; empty bins contribute zero.
pub fn entropy(h: &PaletteHistogram) -> f64 {
    entropy_of(&h.weights)
}

/// `sum_i |h1_i - h2_i|`.
pub fn histogram_l1(h1: &PaletteHistogram, h2: &PaletteHistogram) -> Result<f64> {
    if (h1.n_a, h1.n_b) != (h2.n_a, h2.n_b) {
        return Err(Error::GridMismatch {
            expected_a: h1.n_a,
            expected_b: h1.n_b,
            got_a: h2.n_a,
            got_b: h2.n_b,
        });
    }
    Ok(h1
        .weights
        .iter()
        .zip(&h2.weights)
        .map(|(a, b)| (a - b).abs())
        .sum())
}

impl Graph {
    /// Soft palette histogram of `[N, 2, H, W]` chroma, as `[N, n_a * n_b]`.
    pub fn soft_histogram(&mut self, chroma: Var, grid: &PaletteGrid) -> Var {
        let grid = *grid;
        let value = soft_histogram_rows(self.value(chroma), &grid);
        let (n, _, h, w) = self.value(chroma).dims4();
        self.record(
            value,
            vec![chroma],
            Box::new(move |ctx| {
                let hw = h * w;
                let k = grid.bins();
                let ca = grid.centers_a();
                let cb = grid.centers_b();
                let g = ctx.grad().data();
                let d = ctx.value(chroma).data();
                let mut dc = vec![0.0; n * 2 * hw];
                let inv = 1.0 / hw as f64;
                let mut dpa = vec![0.0; grid.n_a];
                let mut dpb = vec![0.0; grid.n_b];
                for s in 0..n {
                    let gs = &g[s * k..(s + 1) * k];
                    for p in 0..hw {
                        let ia = (s * 2) * hw + p;
                        let ib = (s * 2 + 1) * hw + p;
                        let ka = axis_kernel(d[ia], &ca, grid.sigma, true);
                        let kb = axis_kernel(d[ib], &cb, grid.sigma, true);
                        dpb.fill(0.0);
                        for (i, dpa_i) in dpa.iter_mut().enumerate() {
                            let grow = &gs[i * grid.n_b..(i + 1) * grid.n_b];
                            let mut acc = 0.0;
                            for (j, gv) in grow.iter().enumerate() {
                                acc += gv * kb.p[j];
                                dpb[j] += gv * ka.p[i];
                            }
                            *dpa_i = acc * inv;
                        }
                        for v in dpb.iter_mut() {
                            *v *= inv;
                        }
                        dc[ia] = through_normalizer(&dpa, &ka);
                        dc[ib] = through_normalizer(&dpb, &kb);
                    }
                }
                vec![Some(Tensor::new(&[n, 2, h, w], dc))]
            }),
        )
    }

    /// Row-wise entropy of `[N, K]` probabilities, as `[N]`.
    pub fn entropy_rows(&mut self, h: Var) -> Var {
        let (n, k) = self.value(h).dims2();
        let value = Tensor::new(
            &[n],
            self.value(h).data().chunks(k).map(entropy_of).collect(),
        );
        self.record(
            value,
            vec![h],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let hv = ctx.value(h).data();
                let mut dh = vec![0.0; n * k];
                for s in 0..n {
                    for i in 0..k {
                        let x = hv[s * k + i];
                        let d = if x > LOG_FLOOR { x.ln() + 1.0 } else { LOG_FLOOR.ln() };
                        dh[s * k + i] = -g[s] * d;
                    }
                }
                vec![Some(Tensor::new(&[n, k], dh))]
            }),
        )
    }

    /// Row-wise `sum |a - b|` of `[N, K]` tensors, as `[N]`.
    pub fn l1_rows(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.sum_rows(d)
    }
}

/// Chain rule through `p_i = k_i / sum(k)` down to the chroma coordinate.
fn through_normalizer(dp: &[f64], ax: &AxisKernel) -> f64 {
    let dot: f64 = dp.iter().zip(&ax.p).map(|(d, p)| d * p).sum();
    dp.iter()
        .zip(&ax.dk)
        .map(|(d, dk)| (d - dot) / ax.sum * dk)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_chroma(w: usize, h: usize, rng: &mut ChaCha8Rng) -> ChromaMap {
        let data = (0..w * h * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        ChromaMap::new(w, h, data).unwrap()
    }

    fn grid16() -> PaletteGrid {
        PaletteGrid::default()
    }

    #[test]
    fn centers_are_uniform() {
        let g = PaletteGrid::new(4, 2, 0.1).unwrap();
        assert_eq!(g.centers_a(), vec![-0.75, -0.25, 0.25, 0.75]);
        assert_eq!(g.centers_b(), vec![-0.5, 0.5]);
        assert!(PaletteGrid::new(4, 4, 0.0).is_err());
        assert!(PaletteGrid::square(576, 0.1).is_ok());
        assert!(PaletteGrid::square(500, 0.1).is_err());
    }

    #[test]
    fn constant_chroma_peaks_at_its_bin() {
        let g = grid16();
        let ca = g.centers_a();
        let cb = g.centers_b();
        let c = ChromaMap::filled(8, 8, [ca[3], cb[11]]).unwrap();
        let h = soft_histogram(&c, &g).unwrap();
        assert_eq!(h.argmax(), (3, 11));
        assert!((h.weights().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn soft_histogram_sums_to_one_and_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let c = random_chroma(9, 7, &mut rng);
            let h = soft_histogram(&c, &grid16()).unwrap();
            assert!((h.weights().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(h.weights().iter().all(|w| *w > 0.0));
        }
    }

    #[test]
    fn small_sigma_recovers_hard_histogram_for_quantized_colors() {
        // Pixels sitting on bin centres (plus tiny jitter) are where the kernel's
        // small-sigma limit coincides with nearest-centre counting.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = PaletteGrid::new(16, 16, 1e-4).unwrap();
        let ca = g.centers_a();
        let data: Vec<f64> = (0..64 * 64 * 2)
            .map(|_| ca[rng.random_range(0..16)] + rng.random_range(-1e-3..1e-3))
            .collect();
        let c = ChromaMap::new(64, 64, data).unwrap();
        let l1 = histogram_l1(&soft_histogram(&c, &g).unwrap(), &hard_histogram(&c, &g).unwrap())
            .unwrap();
        assert!(l1 <= 0.05, "l1 = {l1}");
    }

    #[test]
    fn hard_histogram_fixtures() {
        let g = grid16();
        let (ca, cb) = (g.centers_a(), g.centers_b());
        let one = ChromaMap::new(1, 1, vec![ca[3], cb[7]]).unwrap();
        let h = hard_histogram(&one, &g).unwrap();
        assert_eq!(h, PaletteHistogram::one_hot(16, 16, 3, 7));

        let two = ChromaMap::new(2, 1, vec![ca[0], cb[0], ca[5], cb[9]]).unwrap();
        let h = hard_histogram(&two, &g).unwrap();
        assert_eq!(h.get(0, 0), 0.5);
        assert_eq!(h.get(5, 9), 0.5);
    }

    #[test]
    fn hard_histogram_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = grid16();
        let c = random_chroma(32, 32, &mut rng);
        let (ca, cb) = (g.centers_a(), g.centers_b());
        let mut oracle = vec![0.0; 256];
        for ab in c.data().chunks(2) {
            let nearest = |v: f64, cs: &[f64]| {
                let mut best = 0;
                for (i, c) in cs.iter().enumerate() {
                    if (v - c).abs() < (v - cs[best]).abs() {
                        best = i;
                    }
                }
                best
            };
            oracle[nearest(ab[0], &ca) * 16 + nearest(ab[1], &cb)] += 1.0 / 1024.0;
        }
        let h = hard_histogram(&c, &g).unwrap();
        assert_eq!(h.weights(), &oracle[..]);
    }

    #[test]
    fn entropy_fixtures() {
        let u = PaletteHistogram::uniform(16, 16);
        assert!((entropy(&u) - 256f64.ln()).abs() < 1e-6);
        assert!((entropy(&u) - 5.5452).abs() < 1e-4);
        assert!(entropy(&PaletteHistogram::one_hot(16, 16, 2, 2)).abs() < 1e-9);
        let mut w = vec![0.0; 256];
        w[0] = 0.5;
        w[1] = 0.5;
        let h = PaletteHistogram::new(16, 16, w).unwrap();
        assert!((entropy(&h) - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn l1_fixtures() {
        let a = PaletteHistogram::one_hot(4, 4, 0, 0);
        let b = PaletteHistogram::one_hot(4, 4, 1, 0);
        assert_eq!(histogram_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(histogram_l1(&a, &b).unwrap(), 2.0);
        assert!(histogram_l1(&a, &PaletteHistogram::uniform(2, 8)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = soft_histogram(&random_chroma(5, 5, &mut rng), &grid16()).unwrap();
        let y = soft_histogram(&random_chroma(5, 5, &mut rng), &grid16()).unwrap();
        let mut oracle = 0.0;
        for i in 0..256 {
            oracle += (x.weights()[i] - y.weights()[i]).abs();
        }
        assert!((histogram_l1(&x, &y).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        assert!(PaletteHistogram::new(2, 2, vec![0.5, 0.5, 0.5, -0.5]).is_err());
        assert!(PaletteHistogram::new(2, 2, vec![0.3, 0.3, 0.3, 0.3]).is_err());
        assert!(PaletteHistogram::new(2, 2, vec![0.25; 3]).is_err());
    }

    #[test]
    fn palette_file_round_trip_and_renormalization() {
        let h = PaletteHistogram::uniform(4, 4);
        let f = PaletteFile::new(&h, 0.1);
        let back = PaletteFile::from_json(&f.to_json()).unwrap();
        assert_eq!(back.histogram().unwrap(), h);

        let mut nudged = f.clone();
        nudged.weights[0] += 5e-5;
        let re = PaletteFile::from_json(&nudged.to_json()).unwrap().histogram().unwrap();
        assert!((re.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let mut bad = f.clone();
        bad.weights[0] += 0.01;
        assert!(PaletteFile::from_json(&bad.to_json()).is_err());
        let mut short = f;
        short.weights.pop();
        assert!(PaletteFile::from_json(&short.to_json()).is_err());
    }

    #[test]
    fn soft_histogram_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = Tensor::uniform(&[2, 2, 3, 3], -0.9, 0.9, &mut rng);
        let wt = Tensor::randn(&[2, 64], 1.0, &mut rng);
        let grid = PaletteGrid::new(8, 8, 0.1).unwrap();
        let r = gradcheck::check(&[c, wt], 1e-4, 64, |g, v| {
            let h = g.soft_histogram(v[0], &grid);
            let p = g.mul(h, v[1]);
            g.sum(p)
        });
        assert!(r.rel_error < 1e-3, "{}", r.rel_error);
    }

    #[test]
    fn l1_of_soft_histogram_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c = Tensor::uniform(&[1, 2, 4, 4], -0.9, 0.9, &mut rng);
        let target = soft_histogram(
            &random_chroma(4, 4, &mut rng),
            &PaletteGrid::new(8, 8, 0.1).unwrap(),
        )
        .unwrap();
        let target = PaletteHistogram::stack(&[target]);
        let grid = PaletteGrid::new(8, 8, 0.1).unwrap();
        let r = gradcheck::check(&[c], 1e-6, 64, |g, v| {
            let h = g.soft_histogram(v[0], &grid);
            let t = g.constant(target.clone());
            let l = g.l1_rows(t, h);
            g.sum(l)
        });
        assert!(r.rel_error < 1e-3, "{}", r.rel_error);
    }

    #[test]
    fn entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::uniform(&[2, 10], 0.05, 1.0, &mut rng);
        let r = gradcheck::check(&[x], 1e-6, 64, |g, v| {
            let h = g.normalize_rows(v[0]);
            let e = g.entropy_rows(h);
            g.sum(e)
        });
        assert!(r.rel_error < 1e-3, "{}", r.rel_error);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn permutation_invariance(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_chroma(6, 5, &mut rng);
            let mut px: Vec<[f64; 2]> = c.data().chunks(2).map(|p| [p[0], p[1]]).collect();
            px.shuffle(&mut rng);
            let shuffled = ChromaMap::new(6, 5, px.concat()).unwrap();
            let g = PaletteGrid::new(8, 8, 0.1).unwrap();
            let l1 = histogram_l1(&soft_histogram(&c, &g).unwrap(), &soft_histogram(&shuffled, &g).unwrap()).unwrap();
            proptest::prop_assert!(l1 < 1e-12);
        }

        #[test]
        fn entropy_is_bounded(weights in proptest::collection::vec(0.0f64..1.0, 16)) {
            proptest::prop_assume!(weights.iter().sum::<f64>() > 1e-6);
            let h = PaletteHistogram::normalized(4, 4, weights).unwrap();
            let e = entropy(&h);
            proptest::prop_assert!(e >= -1e-12 && e <= 16f64.ln() + 1e-12);
        }
    }
}
