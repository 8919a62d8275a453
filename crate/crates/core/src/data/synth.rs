//! Procedural corpus of flat-colored shapes on shaded backgrounds.
//!
//! Hues are drawn independently of lightness, so the gray channel alone does
//! not determine the colors. A faint per-pixel grain gives flat regions some
//! texture.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::RgbImage;
use crate::error::{Error, Result};

const GRAIN: f64 = 0.04;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

/// One `size x size` image.
pub fn synth_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> RgbImage {
    let bg_hue: f64 = rng.random();
    let bg_sat = rng.random_range(0.2..0.6);
    let (v0, v1) = (rng.random_range(0.3..0.9), rng.random_range(0.3..0.9));
    let n_shapes = rng.random_range(2..=4);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                Shape::Disc {
                    cx: rng.random(),
                    cy: rng.random(),
                    r: rng.random_range(0.12..0.3),
                }
            } else {
                let (x0, y0) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.random_range(0.15..0.4),
                    y1: y0 + rng.random_range(0.15..0.4),
                }
            };
            let color = hsv(rng.random(), rng.random_range(0.5..1.0), rng.random_range(0.35..1.0));
            (shape, color)
        })
        .collect();
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let shade = v0 + (v1 - v0) * v;
            let mut px = hsv(bg_hue, bg_sat, shade);
            for (s, c) in &shapes {
                if s.contains(u, v) {
                    px = *c;
                }
            }
            let grain = rng.random_range(-GRAIN..GRAIN);
            data.extend(px.map(|c| (c + grain).clamp(0.0, 1.0)));
        }
    }
    RgbImage::new(size, size, data).expect("synthetic pixels are in range")
}

/// Writes `count` PNGs named `synth_00000.png`, ... into `dir`.
pub fn write_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if size == 0 {
        return Err(Error::Invalid("image size must be positive".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = dir.join(format!("synth_{i:05}.png"));
            synth_image(size, &mut rng).save_png(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
        assert_eq!(hsv(0.7, 0.0, 0.4), [0.4, 0.4, 0.4]);
    }

    #[test]
    fn corpus_is_seeded() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = write_corpus(a.path(), 3, 24, 9).unwrap();
        let pb = write_corpus(b.path(), 3, 24, 9).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let img = RgbImage::load(&pa[0]).unwrap();
        assert_eq!((img.width(), img.height()), (24, 24));
    }
}
