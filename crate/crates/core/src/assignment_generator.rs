//! Palette-conditioned generator: gray image, palette and latent code to chroma.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Tensor, Var};
use crate::chromatic_attention::ChromaticAttention;
use crate::colorspace::{ChromaMap, GrayImage};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, Linear, ParameterSet};
use crate::palette::{PaletteGrid, PaletteHistogram};

pub const PREFIX: &str = "gen";
const SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Standard-normal style code fed to every palette normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("latent code must be non-empty and finite".into()));
        }
        Ok(Self(values))
    }

    pub fn sample<R: Rng + ?Sized>(d_z: usize, rng: &mut R) -> Self {
        Self((0..d_z).map(|_| StandardNormal.sample(rng)).collect())
    }

    pub fn zeros(d_z: usize) -> Self {
        Self(vec![0.0; d_z])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `[N, d_z]`.
    pub fn stack(items: &[Self]) -> Tensor {
        let d = items.first().map_or(0, Self::len);
        let data = items.iter().flat_map(|z| z.0.iter().copied()).collect();
        Tensor::new(&[items.len(), d], data)
    }
}

/// Batch normalization followed by a per-channel affine map predicted from
/// the palette and latent code.
#[derive(Clone, Debug)]
pub struct PaletteNorm {
    name: String,
    channels: usize,
    affine: Linear,
}

impl PaletteNorm {
    pub fn new(name: impl Into<String>, channels: usize, cond_dim: usize) -> Self {
        let name = name.into();
        Self {
            affine: Linear::new(format!("{name}.affine"), cond_dim, 2 * channels),
            name,
            channels,
        }
    }

    /// The affine bias starts at `gamma = 1, beta = 0`.
    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) {
        self.affine.init(ps, rng);
        let c = self.channels;
        let mut bias = vec![0.0; 2 * c];
        bias[..c].fill(1.0);
        ps.insert(format!("{}.bias", self.affine.name), Tensor::new(&[2 * c], bias));
        ps.insert_buffer(self.stat("running_mean"), Tensor::zeros(&[c]));
        ps.insert_buffer(self.stat("running_var"), Tensor::full(&[c], 1.0));
    }

    pub fn affine_layer(&self) -> &str {
        &self.affine.name
    }

    fn stat(&self, which: &str) -> String {
        format!("{}.{which}", self.name)
    }

    /// Batch statistics in training mode (queuing running-stat updates),
    /// running statistics otherwise.
    pub fn normalize(&self, fw: &mut Forward, x: Var) -> Var {
        if fw.train {
            let (n, _, h, w) = fw.g.value(x).dims4();
            let (y, mean, var) = fw.g.batch_norm(x, BN_EPS);
            let count = (n * h * w) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let ps = fw.params();
            let rm = ps.buffer(&self.stat("running_mean")).expect("initialized");
            let rv = ps.buffer(&self.stat("running_var")).expect("initialized");
            let new_mean = rm.zip_map(&Tensor::new(&[self.channels], mean), |r, m| {
                (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m
            });
            let new_var = rv.zip_map(&Tensor::new(&[self.channels], var), |r, v| {
                (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias
            });
            fw.g.push_buffer_update(self.stat("running_mean"), new_mean);
            fw.g.push_buffer_update(self.stat("running_var"), new_var);
            y
        } else {
            let ps = fw.params();
            let rm = ps.buffer(&self.stat("running_mean")).expect("initialized").data().to_vec();
            let rv = ps.buffer(&self.stat("running_var")).expect("initialized").data().to_vec();
            fw.g.normalize_channels(x, &rm, &rv, BN_EPS)
        }
    }

    /// `cond: [N, n_a * n_b + d_z]`.
    pub fn forward(&self, fw: &mut Forward, x: Var, cond: Var) -> Var {
        let xn = self.normalize(fw, x);
        let gb = self.affine.forward(fw, cond);
        let gamma = fw.g.narrow_cols(gb, 0, self.channels);
        let beta = fw.g.narrow_cols(gb, self.channels, self.channels);
        fw.g.modulate(xn, gamma, beta)
    }
}

/// Convolution, palette normalization, leaky ReLU.
#[derive(Clone, Debug)]
struct Block {
    conv: Conv2d,
    norm: PaletteNorm,
}

impl Block {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, cond: usize) -> Self {
        Self {
            conv: Conv2d::new(format!("{name}.conv"), cin, cout, 3, stride),
            norm: PaletteNorm::new(format!("{name}.pn"), cout, cond),
        }
    }

    fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) {
        self.conv.init(ps, rng);
        self.norm.init(ps, rng);
    }

    fn forward(&self, fw: &mut Forward, x: Var, cond: Var, activate: bool) -> Var {
        let y = self.conv.forward(fw, x);
        let y = self.norm.forward(fw, y, cond);
        if activate {
            fw.g.leaky_relu(y, SLOPE)
        } else {
            y
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    grid: PaletteGrid,
    d_z: usize,
    multiple: usize,
    stem: Block,
    down1: Block,
    down2: Block,
    residual: Vec<(Block, Block)>,
    up1: Block,
    attention: Option<ChromaticAttention>,
    up2: Block,
    out: Conv2d,
}

impl Generator {
    pub fn new(cfg: &ModelConfig) -> Self {
        let gc = &cfg.generator;
        let c = gc.base_channels;
        let cond = cfg.grid.bins() + gc.d_z;
        let name = |part: &str| format!("{PREFIX}.{part}");
        let residual = (0..gc.num_residual_blocks)
            .map(|i| {
                (
                    Block::new(&name(&format!("res{i}a")), 4 * c, 4 * c, 1, cond),
                    Block::new(&name(&format!("res{i}b")), 4 * c, 4 * c, 1, cond),
                )
            })
            .collect();
        Self {
            grid: cfg.grid,
            d_z: gc.d_z,
            multiple: cfg.input_multiple(),
            stem: Block::new(&name("stem"), 1, c, 1, cond),
            down1: Block::new(&name("down1"), c, 2 * c, 2, cond),
            down2: Block::new(&name("down2"), 2 * c, 4 * c, 2, cond),
            residual,
            up1: Block::new(&name("up1"), 6 * c, 2 * c, 1, cond),
            attention: gc.attention.enabled.then(|| {
                ChromaticAttention::new(&name("ca"), &gc.attention, 2 * c, cfg.semantic_channels())
            }),
            up2: Block::new(&name("up2"), 3 * c, c, 1, cond),
            out: Conv2d::new(name("out"), c, 2, 3, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) {
        self.stem.init(ps, rng);
        self.down1.init(ps, rng);
        self.down2.init(ps, rng);
        for (a, b) in &self.residual {
            a.init(ps, rng);
            b.init(ps, rng);
        }
        self.up1.init(ps, rng);
        if let Some(ca) = &self.attention {
            ca.init(ps, rng);
        }
        self.up2.init(ps, rng);
        self.out.init(ps, rng);
    }

    pub fn attention(&self) -> Option<&ChromaticAttention> {
        self.attention.as_ref()
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    /// Every palette normalization layer, outermost first.
    pub fn palette_norms(&self) -> Vec<&PaletteNorm> {
        let mut v = vec![&self.stem.norm, &self.down1.norm, &self.down2.norm];
        for (a, b) in &self.residual {
            v.push(&a.norm);
            v.push(&b.norm);
        }
        v.push(&self.up1.norm);
        v.push(&self.up2.norm);
        v
    }

    /// `gray: [N, 1, H, W]`, `h: [N, K]`, `z: [N, d_z]`, `s`: encoder features.
    /// Returns `[N, 2, H, W]` in `[-1, 1]`.
    pub fn forward(&self, fw: &mut Forward, gray: Var, h: Var, z: Var, s: Var) -> Result<Var> {
        let (n, cg, ht, wd) = fw.g.value(gray).dims4();
        if cg != 1 {
            return Err(Error::Shape(format!("generator expects 1 channel, got {cg}")));
        }
        crate::palette_generator::check_multiple(ht, wd, self.multiple)?;
        let (nh, k) = fw.g.value(h).dims2();
        if k != self.grid.bins() {
            return Err(Error::Shape(format!(
                "palette rows have {k} bins, model grid has {}",
                self.grid.bins()
            )));
        }
        let (nz, dz) = fw.g.value(z).dims2();
        if nh != n || nz != n || dz != self.d_z {
            return Err(Error::Shape(format!(
                "batch {n}: got {nh} palettes and {nz} latent codes of width {dz} (expected {})",
                self.d_z
            )));
        }
        let cond = fw.g.concat1(&[h, z]);

        let e0 = self.stem.forward(fw, gray, cond, true);
        let e1 = self.down1.forward(fw, e0, cond, true);
        let mut x = self.down2.forward(fw, e1, cond, true);
        for (a, b) in &self.residual {
            let y = a.forward(fw, x, cond, true);
            let y = b.forward(fw, y, cond, false);
            x = fw.g.add(x, y);
        }
        let x = fw.g.upsample_nearest(x, 2);
        let x = fw.g.concat1(&[x, e1]);
        let mut f = self.up1.forward(fw, x, cond, true);
        if let Some(ca) = &self.attention {
            f = ca.forward(fw, f, s, gray)?;
        }
        let x = fw.g.upsample_nearest(f, 2);
        let x = fw.g.concat1(&[x, e0]);
        let x = self.up2.forward(fw, x, cond, true);
        let x = self.out.forward(fw, x);
        Ok(fw.g.tanh(x))
    }

    /// Single-image evaluation-mode pass.
    pub fn generate(
        &self,
        gray: &GrayImage,
        h: &PaletteHistogram,
        z: &LatentCode,
        s: &Tensor,
        params: &ParameterSet,
    ) -> Result<ChromaMap> {
        h.check_grid(&self.grid)?;
        let mut g = Graph::new();
        let gv = g.constant(GrayImage::batch(std::slice::from_ref(gray))?);
        let hv = g.constant(PaletteHistogram::stack(std::slice::from_ref(h)));
        let zv = g.constant(LatentCode::stack(std::slice::from_ref(z)));
        let sv = g.constant(Tensor::stack(std::slice::from_ref(s)));
        let mut fw = Forward::frozen(&mut g, params, false);
        let out = self.forward(&mut fw, gv, hv, zv, sv)?;
        Ok(ChromaMap::unbatch(g.value(out))?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use crate::config::AttentionConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn pn_setup(c: usize, cond: usize) -> (PaletteNorm, ParameterSet) {
        let pn = PaletteNorm::new("pn", c, cond);
        let mut ps = ParameterSet::new();
        pn.init(&mut ps, &mut rng(1));
        (pn, ps)
    }

    fn bn_oracle(x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = x.clone();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|s| x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            for s in 0..n {
                for p in 0..hw {
                    let i = (s * c + ch) * hw + p;
                    out.data_mut()[i] = (x.data()[i] - m) / (v + BN_EPS).sqrt();
                }
            }
        }
        out
    }

    fn run_pn(pn: &PaletteNorm, ps: &ParameterSet, x: &Tensor, cond: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (xv, cv) = (g.constant(x.clone()), g.constant(cond.clone()));
        let mut fw = Forward::frozen(&mut g, ps, true);
        let y = pn.forward(&mut fw, xv, cv);
        g.value(y).clone()
    }

    #[test]
    fn identity_affine_is_plain_batch_norm() {
        let (pn, mut ps) = pn_setup(3, 5);
        ps.get_mut("pn.affine.weight").unwrap().data_mut().fill(0.0);
        let x = Tensor::randn(&[4, 3, 5, 5], 2.0, &mut rng(2));
        let cond = Tensor::randn(&[4, 5], 1.0, &mut rng(3));
        let y = run_pn(&pn, &ps, &x, &cond);
        assert!(y.zip_map(&bn_oracle(&x), |a, b| a - b).max_abs() < 1e-6);
    }

    #[test]
    fn palette_changes_output() {
        let (pn, ps) = pn_setup(3, 16 + 2);
        let x = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng(4));
        let cond = |h: PaletteHistogram| {
            let mut d = h.weights().to_vec();
            d.extend([0.3, -0.2]);
            Tensor::new(&[1, 18], d)
        };
        let a = run_pn(&pn, &ps, &x, &cond(PaletteHistogram::one_hot(4, 4, 0, 0)));
        let b = run_pn(&pn, &ps, &x, &cond(PaletteHistogram::one_hot(4, 4, 3, 1)));
        assert!(a.zip_map(&b, |p, q| (p - q).abs()).sum() > 0.0);
    }

    #[test]
    fn normalized_statistics() {
        let (pn, ps) = pn_setup(4, 3);
        let x = Tensor::randn(&[8, 4, 6, 6], 3.0, &mut rng(5)).map(|v| v + 1.5);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut fw = Forward::frozen(&mut g, &ps, true);
        let y = pn.normalize(&mut fw, xv);
        let y = g.value(y);
        for ch in 0..4 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|s| y.data()[(s * 4 + ch) * 36..(s * 4 + ch + 1) * 36].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() <= 1e-5);
            assert!((v - 1.0).abs() <= 1e-3);
        }
        let updates = g.take_buffer_updates();
        assert_eq!(updates.len(), 2);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (pn, mut ps) = pn_setup(1, 2);
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut fw = Forward::frozen(&mut g, &ps, true);
        pn.normalize(&mut fw, xv);
        let updates = g.take_buffer_updates();
        ps.apply_buffer_updates(updates);
        // batch mean 2, unbiased variance 2
        assert!((ps.buffer("pn.running_mean").unwrap().item() - 0.2).abs() < 1e-12);
        assert!((ps.buffer("pn.running_var").unwrap().item() - 1.1).abs() < 1e-12);
    }

    fn gen_setup(cfg: &ModelConfig) -> (Generator, ParameterSet) {
        let gen = Generator::new(cfg);
        let mut ps = ParameterSet::new();
        gen.init(&mut ps, &mut rng(7));
        (gen, ps)
    }

    fn inputs(side: usize, cfg: &ModelConfig) -> (GrayImage, PaletteHistogram, Tensor) {
        let gray = GrayImage::from_chw(&Tensor::uniform(&[1, side, side], 0.0, 1.0, &mut rng(8))).unwrap();
        let mut w = Tensor::uniform(&[cfg.grid.bins()], 0.0, 1.0, &mut rng(9)).into_data();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        let h = PaletteHistogram::new(cfg.grid.n_a, cfg.grid.n_b, w).unwrap();
        let r = side / cfg.semantic_stride();
        let feats = Tensor::randn(&[cfg.semantic_channels(), r, r], 1.0, &mut rng(10));
        (gray, h, feats)
    }

    #[test]
    fn output_contract_and_latent_sensitivity() {
        let cfg = ModelConfig::toy();
        let (gen, ps) = gen_setup(&cfg);
        let (gray, h, s) = inputs(64, &cfg);
        let z1 = LatentCode::sample(cfg.generator.d_z, &mut rng(11));
        let z2 = LatentCode::sample(cfg.generator.d_z, &mut rng(12));
        let a = gen.generate(&gray, &h, &z1, &s, &ps).unwrap();
        assert_eq!((a.width(), a.height()), (64, 64));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let b = gen.generate(&gray, &h, &z2, &s, &ps).unwrap();
        let l1: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum();
        assert!(l1 > 0.0);
        let again = gen.generate(&gray, &h, &z1, &s, &ps).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let cfg = ModelConfig::toy();
        let (gen, ps) = gen_setup(&cfg);
        let (gray, _, s) = inputs(32, &cfg);
        let h = PaletteHistogram::uniform(8, 8);
        let err = gen
            .generate(&gray, &h, &LatentCode::zeros(cfg.generator.d_z), &s, &ps)
            .unwrap_err();
        assert!(matches!(err, Error::GridMismatch { .. }), "{err}");
    }

    #[test]
    fn regression_gradient_on_miniature() {
        let mut cfg = ModelConfig::toy();
        cfg.grid = PaletteGrid::new(2, 2, 0.2).unwrap();
        cfg.encoder.channels = vec![2, 3, 3];
        cfg.generator.base_channels = 2;
        cfg.generator.num_residual_blocks = 1;
        cfg.generator.d_z = 2;
        cfg.generator.attention = AttentionConfig {
            key_dim: 2,
            ..AttentionConfig::default()
        };
        let (gen, ps) = gen_setup(&cfg);
        let mut r = rng(13);
        let gray = Tensor::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut r);
        let h = PaletteHistogram::stack(&[
            PaletteHistogram::uniform(2, 2),
            PaletteHistogram::one_hot(2, 2, 1, 0),
        ]);
        let z = Tensor::randn(&[2, 2], 1.0, &mut r);
        let s = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
        let target = Tensor::uniform(&[2, 2, 8, 8], -0.5, 0.5, &mut r);
        let check = gradcheck::check_params(&ps, 1e-6, 6, |fw| {
            let gv = fw.g.constant(gray.clone());
            let hv = fw.g.constant(h.clone());
            let zv = fw.g.constant(z.clone());
            let sv = fw.g.constant(s.clone());
            let tv = fw.g.constant(target.clone());
            let out = gen.forward(fw, gv, hv, zv, sv).unwrap();
            fw.g.l1_mean(tv, out)
        });
        assert!(check.rel_error < 1e-3, "{}", check.rel_error);
    }
}
