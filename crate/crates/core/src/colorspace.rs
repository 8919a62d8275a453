//! sRGB <-> CIE Lab (D65, 2 degree observer) and the normalized L / ab maps.
//!
//! L* is stored divided by 100 and a*, b* divided by 128 and clamped to
//! `[-1, 1]`, so chroma maps and palette grids share the square `[-1, 1]^2`.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const AB_SCALE: f64 = 128.0;
pub const L_SCALE: f64 = 100.0;

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// Returns the encoded value and its derivative.
fn linear_to_srgb(c: f64) -> (f64, f64) {
    if c <= 0.0031308 {
        (12.92 * c, 12.92)
    } else {
        let p = c.powf(1.0 / 2.4);
        (1.055 * p - 0.055, 1.055 / 2.4 * p / c)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Inverse of `lab_f` and its derivative.
fn lab_f_inv(t: f64) -> (f64, f64) {
    if t > DELTA {
        (t * t * t, 3.0 * t * t)
    } else {
        (3.0 * DELTA * DELTA * (t - 4.0 / 29.0), 3.0 * DELTA * DELTA)
    }
}

/// sRGB in `[0,1]` to raw `(L*, a*, b*)`.
pub fn srgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut xyz = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[i] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Normalized `(L, a, b)` to sRGB clamped to `[0,1]`, with the Jacobian
/// `d rgb_i / d (L, a, b)_j` (zero where a channel was clamped).
pub fn lab_to_srgb_pixel(l: f64, a: f64, b: f64) -> ([f64; 3], [[f64; 3]; 3]) {
    let fy = (l * L_SCALE + 16.0) / 116.0;
    let fx = fy + a * AB_SCALE / 500.0;
    let fz = fy - b * AB_SCALE / 200.0;
    // d(fx, fy, fz) / d(l, a, b)
    let dl = L_SCALE / 116.0;
    let df = [
        [dl, AB_SCALE / 500.0, 0.0],
        [dl, 0.0, 0.0],
        [dl, 0.0, -AB_SCALE / 200.0],
    ];
    let (gx, dgx) = lab_f_inv(fx);
    let (gy, dgy) = lab_f_inv(fy);
    let (gz, dgz) = lab_f_inv(fz);
    let xyz = [WHITE[0] * gx, WHITE[1] * gy, WHITE[2] * gz];
    let dxyz = [WHITE[0] * dgx, WHITE[1] * dgy, WHITE[2] * dgz];

    let mut rgb = [0.0; 3];
    let mut jac = [[0.0; 3]; 3];
    for (i, row) in XYZ_TO_RGB.iter().enumerate() {
        let lin = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
        let (enc, denc) = linear_to_srgb(lin);
        if enc <= 0.0 || enc >= 1.0 {
            rgb[i] = enc.clamp(0.0, 1.0);
            continue;
        }
        rgb[i] = enc;
        for j in 0..3 {
            let dlin: f64 = (0..3).map(|k| row[k] * dxyz[k] * df[k][j]).sum();
            jac[i][j] = denc * dlin;
        }
    }
    (rgb, jac)
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Invalid(format!("empty image {width}x{height}")));
    }
    Ok(())
}

macro_rules! image_type {
    ($(#[$doc:meta])* $name:ident, $channels:expr, $lo:expr, $hi:expr) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            width: usize,
            height: usize,
            data: Vec<f64>,
        }

        impl $name {
            pub const CHANNELS: usize = $channels;

            /// Validates range and finiteness of interleaved `H x W x C` data.
            pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
                check_dims(width, height)?;
                if data.len() != width * height * $channels {
                    return Err(Error::Shape(format!(
                        "{}: {} values for {}x{}x{}",
                        stringify!($name),
                        data.len(),
                        height,
                        width,
                        $channels
                    )));
                }
                if let Some(v) = data.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Invalid(format!("{}: non-finite value {v}", stringify!($name))));
                }
                if let Some(v) = data.iter().find(|&&v| v < $lo || v > $hi) {
                    return Err(Error::Invalid(format!(
                        "{}: value {v} outside [{}, {}]",
                        stringify!($name),
                        $lo,
                        $hi
                    )));
                }
                Ok(Self { width, height, data })
            }

            pub fn filled(width: usize, height: usize, value: [f64; $channels]) -> Result<Self> {
                let data = (0..width * height).flat_map(|_| value).collect();
                Self::new(width, height, data)
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
                let o = (y * self.width + x) * $channels;
                &self.data[o..o + $channels]
            }

            /// `[C, H, W]` tensor.
            pub fn to_chw(&self) -> Tensor {
                let hw = self.width * self.height;
                let mut out = vec![0.0; hw * $channels];
                for (p, px) in self.data.chunks($channels).enumerate() {
                    for (c, v) in px.iter().enumerate() {
                        out[c * hw + p] = *v;
                    }
                }
                Tensor::new(&[$channels, self.height, self.width], out)
            }

            /// From a `[C, H, W]` tensor, clamping into the valid range.
            pub fn from_chw(t: &Tensor) -> Result<Self> {
                let (c, h, w) = t.dims3();
                if c != $channels {
                    return Err(Error::Shape(format!(
                        "{} needs {} channels, got {c}",
                        stringify!($name),
                        $channels
                    )));
                }
                let hw = h * w;
                let src = t.data();
                let mut data = vec![0.0; hw * c];
                for p in 0..hw {
                    for ch in 0..c {
                        data[p * c + ch] = src[ch * hw + p].clamp($lo, $hi);
                    }
                }
                Self::new(w, h, data)
            }

            /// `[N, C, H, W]` batch; all items must share a size.
            pub fn batch(items: &[Self]) -> Result<Tensor> {
                if items.is_empty() {
                    return Err(Error::Invalid("empty batch".into()));
                }
                let (w, h) = (items[0].width, items[0].height);
                if items.iter().any(|i| i.width != w || i.height != h) {
                    return Err(Error::Shape("batch items differ in size".into()));
                }
                Ok(Tensor::stack(&items.iter().map(|i| i.to_chw()).collect::<Vec<_>>()))
            }

            pub fn unbatch(t: &Tensor) -> Result<Vec<Self>> {
                t.unstack().iter().map(Self::from_chw).collect()
            }

            /// Crops the window `[x0, x0+w) x [y0, y0+h)`.
            pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
                if x0 + w > self.width || y0 + h > self.height {
                    return Err(Error::Shape(format!(
                        "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                        self.width, self.height
                    )));
                }
                let mut data = Vec::with_capacity(w * h * $channels);
                for y in y0..y0 + h {
                    let o = (y * self.width + x0) * $channels;
                    data.extend_from_slice(&self.data[o..o + w * $channels]);
                }
                Self::new(w, h, data)
            }

            /// Pads right and bottom by edge replication.
            pub fn pad_to(&self, w: usize, h: usize) -> Result<Self> {
                if w < self.width || h < self.height {
                    return Err(Error::Shape("pad target smaller than image".into()));
                }
                let mut data = Vec::with_capacity(w * h * $channels);
                for y in 0..h {
                    let sy = y.min(self.height - 1);
                    for x in 0..w {
                        let sx = x.min(self.width - 1);
                        data.extend_from_slice(self.pixel(sx, sy));
                    }
                }
                Self::new(w, h, data)
            }
        }
    };
}

image_type!(
    /// sRGB image with channels in `[0, 1]`.
    RgbImage, 3, 0.0, 1.0
);
image_type!(
    /// Lightness channel, CIE L* / 100.
    GrayImage, 1, 0.0, 1.0
);
image_type!(
    /// Chroma channels, CIE (a*, b*) / 128 clamped to `[-1, 1]`.
    ChromaMap, 2, -1.0, 1.0
);

impl RgbImage {
    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Quantizes with round-half-up.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size matches dimensions")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(&img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Splits an sRGB image into normalized lightness and chroma.
pub fn rgb_to_lab(img: &RgbImage) -> Result<(GrayImage, ChromaMap)> {
    if let Some(v) = img.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite pixel value {v}")));
    }
    let n = img.width * img.height;
    let mut gray = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(2 * n);
    for px in img.data.chunks(3) {
        let [l, a, b] = srgb_to_lab_pixel([px[0], px[1], px[2]]);
        gray.push((l / L_SCALE).clamp(0.0, 1.0));
        chroma.push((a / AB_SCALE).clamp(-1.0, 1.0));
        chroma.push((b / AB_SCALE).clamp(-1.0, 1.0));
    }
    Ok((
        GrayImage::new(img.width, img.height, gray)?,
        ChromaMap::new(img.width, img.height, chroma)?,
    ))
}

/// Recombines lightness and chroma; out-of-gamut results are clamped.
pub fn lab_to_rgb(gray: &GrayImage, chroma: &ChromaMap) -> Result<RgbImage> {
    if gray.width != chroma.width || gray.height != chroma.height {
        return Err(Error::Shape(format!(
            "gray {}x{} vs chroma {}x{}",
            gray.width, gray.height, chroma.width, chroma.height
        )));
    }
    let mut data = Vec::with_capacity(3 * gray.data.len());
    for (l, ab) in gray.data.iter().zip(chroma.data.chunks(2)) {
        let (rgb, _) = lab_to_srgb_pixel(*l, ab[0], ab[1]);
        data.extend(rgb);
    }
    RgbImage::new(gray.width, gray.height, data)
}

/// Lightness of an sRGB image, discarding chroma.
pub fn rgb_to_gray(img: &RgbImage) -> Result<GrayImage> {
    Ok(rgb_to_lab(img)?.0)
}

impl Graph {
    /// Differentiable `(L [N,1,H,W], ab [N,2,H,W]) -> sRGB [N,3,H,W]`.
    pub fn lab_to_rgb(&mut self, gray: Var, chroma: Var) -> Var {
        let (n, c1, h, w) = self.value(gray).dims4();
        assert_eq!(c1, 1);
        assert_eq!(self.shape(chroma), &[n, 2, h, w], "lab_to_rgb: chroma shape");
        let hw = h * w;
        let lv = self.value(gray).data();
        let cv = self.value(chroma).data();
        let mut out = vec![0.0; n * 3 * hw];
        let mut jacs = Vec::with_capacity(n * hw);
        for s in 0..n {
            for p in 0..hw {
                let (rgb, jac) =
                    lab_to_srgb_pixel(lv[s * hw + p], cv[(s * 2) * hw + p], cv[(s * 2 + 1) * hw + p]);
                for (c, v) in rgb.iter().enumerate() {
                    out[(s * 3 + c) * hw + p] = *v;
                }
                jacs.push(jac);
            }
        }
        self.record(
            Tensor::new(&[n, 3, h, w], out),
            vec![gray, chroma],
            Box::new(move |ctx| {
                let g = ctx.grad().data();
                let mut dl = vec![0.0; n * hw];
                let mut dc = vec![0.0; n * 2 * hw];
                for s in 0..n {
                    for p in 0..hw {
                        let jac = &jacs[s * hw + p];
                        let gs = [
                            g[(s * 3) * hw + p],
                            g[(s * 3 + 1) * hw + p],
                            g[(s * 3 + 2) * hw + p],
                        ];
                        let col = |j: usize| (0..3).map(|i| gs[i] * jac[i][j]).sum::<f64>();
                        dl[s * hw + p] = col(0);
                        dc[(s * 2) * hw + p] = col(1);
                        dc[(s * 2 + 1) * hw + p] = col(2);
                    }
                }
                vec![
                    ctx.needs(0).then(|| Tensor::new(&[n, 1, h, w], dl)),
                    ctx.needs(1).then(|| Tensor::new(&[n, 2, h, w], dc)),
                ]
            }),
        )
    }
}
