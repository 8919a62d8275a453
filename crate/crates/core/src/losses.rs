//! Palette, generator and hinge adversarial objectives.
//!
//! Each loss comes as a plain function on values and as a graph builder used
//! by the trainer. Batch expectations are means over the batch.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::colorspace::ChromaMap;
use crate::error::{Error, Result};
use crate::palette::{entropy, histogram_l1, soft_histogram, PaletteGrid, PaletteHistogram};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec1: f64,
    pub lambda_rg: f64,
    pub lambda_reg: f64,
    pub lambda_rec2: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec1: 5.0,
            lambda_rg: 1.0,
            lambda_reg: 5.0,
            lambda_rec2: 1.0,
            lambda_adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_rec1,
            self.lambda_rg,
            self.lambda_reg,
            self.lambda_rec2,
            self.lambda_adv,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

/// `lambda_rec1 * |h - h_pred|_1 - lambda_rg * E(h_pred)`.
pub fn palette_loss(h_gt: &PaletteHistogram, h_pred: &PaletteHistogram, w: &LossWeights) -> Result<f64> {
    Ok(w.lambda_rec1 * histogram_l1(h_gt, h_pred)? - w.lambda_rg * entropy(h_pred))
}

/// Unweighted terms of the generator objective for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorTerms {
    /// Per-pixel mean `|C - C_pred|`.
    pub regression: f64,
    /// `|h - soft_histogram(C_pred)|_1`.
    pub histogram: f64,
    /// `-D(fake)`.
    pub adversarial: f64,
}

impl GeneratorTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda_reg * self.regression + w.lambda_rec2 * self.histogram + w.lambda_adv * self.adversarial
    }
}

pub fn generator_terms(
    c_gt: &ChromaMap,
    c_pred: &ChromaMap,
    h_gt: &PaletteHistogram,
    d_score_fake: f64,
    grid: &PaletteGrid,
) -> Result<GeneratorTerms> {
    if (c_gt.width(), c_gt.height()) != (c_pred.width(), c_pred.height()) {
        return Err(Error::Shape(format!(
            "chroma maps differ: {}x{} vs {}x{}",
            c_gt.width(),
            c_gt.height(),
            c_pred.width(),
            c_pred.height()
        )));
    }
    let regression = c_gt
        .data()
        .iter()
        .zip(c_pred.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / c_gt.data().len() as f64;
    let h_pred = soft_histogram(c_pred, grid)?;
    Ok(GeneratorTerms {
        regression,
        histogram: histogram_l1(h_gt, &h_pred)?,
        adversarial: -d_score_fake,
    })
}

pub fn generator_loss(
    c_gt: &ChromaMap,
    c_pred: &ChromaMap,
    h_gt: &PaletteHistogram,
    d_score_fake: f64,
    grid: &PaletteGrid,
    w: &LossWeights,
) -> Result<f64> {
    Ok(generator_terms(c_gt, c_pred, h_gt, d_score_fake, grid)?.weighted(w))
}

/// Batch mean of `max(0, 1 - real) + max(0, 1 + fake)`.
pub fn discriminator_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!(
            "need equal non-empty score batches, got {} and {}",
            real.len(),
            fake.len()
        )));
    }
    if real.iter().chain(fake).any(|s| !s.is_finite()) {
        return Err(Error::Invalid("discriminator scores must be finite".into()));
    }
    let n = real.len() as f64;
    Ok(real
        .iter()
        .zip(fake)
        .map(|(r, f)| (1.0 - r).max(0.0) + (1.0 + f).max(0.0))
        .sum::<f64>()
        / n)
}

/// Graph handles of the palette objective, batch-averaged.
#[derive(Clone, Copy, Debug)]
pub struct PaletteLossVars {
    pub total: Var,
    pub l1: Var,
    pub entropy: Var,
}

/// `h_gt, h_pred: [N, K]`.
pub fn palette_loss_graph(g: &mut Graph, h_gt: Var, h_pred: Var, w: &LossWeights) -> PaletteLossVars {
    let l1 = g.l1_rows(h_gt, h_pred);
    let l1 = g.mean(l1);
    let e = g.entropy_rows(h_pred);
    let entropy = g.mean(e);
    let a = g.scale(l1, w.lambda_rec1);
    let b = g.scale(entropy, -w.lambda_rg);
    PaletteLossVars {
        total: g.add(a, b),
        l1,
        entropy,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLossVars {
    pub total: Var,
    pub regression: Var,
    pub histogram: Var,
    pub adversarial: Var,
}

/// `c_gt, c_pred: [N, 2, H, W]`, `h_gt: [N, K]`, `d_fake: [N]`.
pub fn generator_loss_graph(
    g: &mut Graph,
    c_gt: Var,
    c_pred: Var,
    h_gt: Var,
    d_fake: Var,
    grid: &PaletteGrid,
    w: &LossWeights,
) -> GeneratorLossVars {
    let regression = g.l1_mean(c_gt, c_pred);
    let h_pred = g.soft_histogram(c_pred, grid);
    let hl = g.l1_rows(h_gt, h_pred);
    let histogram = g.mean(hl);
    let m = g.mean(d_fake);
    let adversarial = g.scale(m, -1.0);
    let a = g.scale(regression, w.lambda_reg);
    let b = g.scale(histogram, w.lambda_rec2);
    let c = g.scale(adversarial, w.lambda_adv);
    let ab = g.add(a, b);
    GeneratorLossVars {
        total: g.add(ab, c),
        regression,
        histogram,
        adversarial,
    }
}

/// `real, fake: [N]`.
pub fn discriminator_loss_graph(g: &mut Graph, real: Var, fake: Var) -> Var {
    let nr = g.scale(real, -1.0);
    let nr = g.add_scalar(nr, 1.0);
    let hr = g.relu(nr);
    let pf = g.add_scalar(fake, 1.0);
    let hf = g.relu(pf);
    let s = g.add(hr, hf);
    g.mean(s)
}
