//! Palette-projection discriminator over concatenated chroma and RGB.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::colorspace::{ChromaMap, RgbImage};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, Linear, ParameterSet};
use crate::palette::{PaletteGrid, PaletteHistogram};

pub const PREFIX: &str = "disc";
const SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    /// `[N]` realness logits.
    pub score: Var,
    /// `[N]`, the palette inner-product term alone.
    pub projection: Var,
    /// `[N, E]` pooled embedding.
    pub embedding: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorOutput {
    pub score: f64,
    pub projection: f64,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    grid: PaletteGrid,
    convs: Vec<Conv2d>,
    proj: Linear,
    uncond: Option<Linear>,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig) -> Self {
        let dc = &cfg.discriminator;
        let mut cin = 5;
        let convs = dc
            .channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let c = Conv2d::new(format!("{PREFIX}.conv{i}"), cin, cout, 3, 2);
                cin = cout;
                c
            })
            .collect();
        Self {
            grid: cfg.grid,
            convs,
            proj: Linear::new(format!("{PREFIX}.proj"), cin, cfg.grid.bins()).without_bias(),
            uncond: dc
                .unconditional
                .then(|| Linear::new(format!("{PREFIX}.uncond"), cin, 1)),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) {
        for c in &self.convs {
            c.init(ps, rng);
        }
        self.proj.init(ps, rng);
        if let Some(u) = &self.uncond {
            u.init(ps, rng);
        }
    }

    pub fn projection_layer(&self) -> &str {
        &self.proj.name
    }

    /// `chroma: [N, 2, H, W]`, `rgb: [N, 3, H, W]`, `h: [N, K]`.
    pub fn forward(&self, fw: &mut Forward, chroma: Var, rgb: Var, h: Var) -> Result<DiscriminatorVars> {
        let cs = fw.g.value(chroma).dims4();
        let rs = fw.g.value(rgb).dims4();
        let (nh, k) = fw.g.value(h).dims2();
        if cs.1 != 2 || rs.1 != 3 || (cs.0, cs.2, cs.3) != (rs.0, rs.2, rs.3) || nh != cs.0 {
            return Err(Error::Shape(format!(
                "discriminator inputs disagree: chroma {cs:?}, rgb {rs:?}, {nh} palettes"
            )));
        }
        if k != self.grid.bins() {
            return Err(Error::Shape(format!(
                "palette rows have {k} bins, model grid has {}",
                self.grid.bins()
            )));
        }
        let mut x = fw.g.concat1(&[chroma, rgb]);
        for c in &self.convs {
            x = c.forward(fw, x);
            x = fw.g.leaky_relu(x, SLOPE);
        }
        let embedding = fw.g.global_sum_pool(x);
        let wg = self.proj.forward(fw, embedding);
        let weighted = fw.g.mul(wg, h);
        let projection = fw.g.sum_rows(weighted);
        let score = match &self.uncond {
            Some(u) => {
                let n = cs.0;
                let ug = u.forward(fw, embedding);
                let ug = fw.g.reshape(ug, &[n]);
                fw.g.add(projection, ug)
            }
            None => projection,
        };
        Ok(DiscriminatorVars {
            score,
            projection,
            embedding,
        })
    }

    /// Scores one (chroma, rgb, palette) triple.
    pub fn score(
        &self,
        chroma: &ChromaMap,
        rgb: &RgbImage,
        h: &PaletteHistogram,
        params: &ParameterSet,
    ) -> Result<DiscriminatorOutput> {
        h.check_grid(&self.grid)?;
        let mut g = Graph::new();
        let c = g.constant(ChromaMap::batch(std::slice::from_ref(chroma))?);
        let r = g.constant(RgbImage::batch(std::slice::from_ref(rgb))?);
        let hv = g.constant(PaletteHistogram::stack(std::slice::from_ref(h)));
        let mut fw = Forward::frozen(&mut g, params, false);
        let out = self.forward(&mut fw, c, r, hv)?;
        Ok(DiscriminatorOutput {
            score: g.value(out.score).data()[0],
            projection: g.value(out.projection).data()[0],
        })
    }
}
