//! Fidelity metrics and evaluation reports.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::colorspace::{lab_to_rgb, rgb_to_lab, ChromaMap, GrayImage, RgbImage};
use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParameterSet;
use crate::palette::{entropy, histogram_l1, soft_histogram, PaletteGrid};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_aligned(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels; identical images give `+inf`.
pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_aligned(pred, gt)?;
    let n = pred.data().len() as f64;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Rec. 601 luma.
fn luma(img: &RgbImage) -> Vec<f64> {
    img.data()
        .chunks(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable weighted sum over every fully contained window.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (wo, ho) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; wo * h];
    for y in 0..h {
        let src = &x[y * w..(y + 1) * w];
        for xo in 0..wo {
            rows[y * wo + xo] = k.iter().zip(&src[xo..xo + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = k.iter().enumerate().map(|(i, kv)| kv * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean local SSIM of the luma channels (11x11 Gaussian window, sigma 1.5,
/// data range 1, windows fully inside the image).
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_aligned(pred, gt)?;
    let (w, h) = (pred.width(), pred.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let (x, y) = (luma(pred), luma(gt));
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&x, w, h, &k);
    let my = filter_valid(&y, w, h, &k);
    let sxx = filter_valid(&prod(&x, &x), w, h, &k);
    let syy = filter_valid(&prod(&y, &y), w, h, &k);
    let sxy = filter_valid(&prod(&x, &y), w, h, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cxy = sxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub file: String,
    /// `inf` for an exact reconstruction.
    pub psnr: f64,
    pub ssim: f64,
    /// L1 between the output's palette and the ground-truth palette.
    pub palette_l1: f64,
    /// Entropy of the output's palette.
    pub palette_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub images: usize,
    /// Mean over finite values only.
    pub mean_psnr: f64,
    /// Rows left out of `mean_psnr` because they were exact.
    pub infinite_psnr: usize,
    pub mean_ssim: f64,
    pub mean_palette_l1: f64,
    pub mean_palette_entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let finite = || rows.iter().map(|r| r.psnr).filter(|p| p.is_finite());
        let summary = EvalSummary {
            images: rows.len(),
            mean_psnr: mean(finite()),
            infinite_psnr: rows.len() - finite().count(),
            mean_ssim: mean(rows.iter().map(|r| r.ssim)),
            mean_palette_l1: mean(rows.iter().map(|r| r.palette_l1)),
            mean_palette_entropy: mean(rows.iter().map(|r| r.palette_entropy)),
        };
        Self { rows, summary }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Writes `{stem}.csv` and `{stem}.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.summary_json()?).map_err(|e| Error::io(&json_path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Images are resized to this shorter side and center-cropped square.
    pub size: usize,
    /// Seeds the per-image latent codes.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { size: 64, seed: 0 }
    }
}

/// Ground truth of image `i` at evaluation size.
pub fn eval_image(data: &DatasetIndex, i: usize, size: usize) -> Result<RgbImage> {
    let img = data.resized(i, size)?;
    let (w, h) = (img.width(), img.height());
    img.crop((w - size) / 2, (h - size) / 2, size, size)
}

/// Per-image rng for latent codes and other evaluation-time draws.
pub fn image_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

/// Scores the chroma produced by `colorize(i, gray, gt_chroma, rng)` for every
/// image, composing RGB with the ground-truth lightness.
pub fn evaluate_with<F>(data: &DatasetIndex, cfg: &EvalConfig, grid: &PaletteGrid, colorize: F) -> Result<EvalReport>
where
    F: Fn(usize, &GrayImage, &ChromaMap, &mut ChaCha8Rng) -> Result<ChromaMap> + Sync,
{
    let rows = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let gt = eval_image(data, i, cfg.size)?;
            let (gray, chroma) = rgb_to_lab(&gt)?;
            let mut rng = image_rng(cfg.seed, i);
            let pred = colorize(i, &gray, &chroma, &mut rng)?;
            let rgb = lab_to_rgb(&gray, &pred)?;
            // the GT RGB is recomposed too so that gamut clipping affects both sides
            let gt_rgb = lab_to_rgb(&gray, &chroma)?;
            let h_pred = soft_histogram(&pred, grid)?;
            let h_gt = soft_histogram(&chroma, grid)?;
            Ok(EvalRow {
                file: data.files()[i].display().to_string(),
                psnr: psnr(&rgb, &gt_rgb)?,
                ssim: ssim(&rgb, &gt_rgb)?,
                palette_l1: histogram_l1(&h_pred, &h_gt)?,
                palette_entropy: entropy(&h_pred),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}

/// Automatic colorization: the encoder predicts every palette.
pub fn evaluate(model: &Model, params: &ParameterSet, data: &DatasetIndex, cfg: &EvalConfig) -> Result<EvalReport> {
    check_params(model, params)?;
    evaluate_with(data, cfg, &model.config.grid, |_, gray, _, rng| {
        let z = model.latent(rng);
        Ok(model.colorize(gray, None, &z, params)?.chroma)
    })
}

/// Fails early when `params` were not produced for `model`.
pub fn check_params(model: &Model, params: &ParameterSet) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let expected = model.init(&mut rng);
    for (k, t) in expected.params() {
        match params.get(k) {
            Ok(p) if p.shape() == t.shape() => {}
            Ok(p) => {
                return Err(Error::Config(format!(
                    "checkpoint parameter {k} has shape {:?}, the model expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            Err(_) => return Err(Error::Config(format!("checkpoint lacks parameter {k}"))),
        }
    }
    Ok(())
}
