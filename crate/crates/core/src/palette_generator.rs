//! Palette encoder: grayscale image to predicted palette plus semantic features.

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::colorspace::GrayImage;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, Linear, ParameterSet};
use crate::palette::{PaletteGrid, PaletteHistogram};

pub const PREFIX: &str = "enc";
const SLOPE: f64 = 0.2;

/// Graph handles produced by [`PaletteEncoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `[N, n_a * n_b]`, rows sum to one.
    pub palette: Var,
    /// `[N, d_s, H / s, W / s]` from the last convolution block.
    pub features: Var,
}

/// Plain-value result for a single image.
#[derive(Clone, Debug)]
pub struct PaletteEncoderOutput {
    pub palette: PaletteHistogram,
    /// `[d_s, H / s, W / s]`.
    pub semantic_features: Tensor,
}

#[derive(Clone, Debug)]
pub struct PaletteEncoder {
    grid: PaletteGrid,
    multiple: usize,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl PaletteEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let enc = &cfg.encoder;
        let mut convs = Vec::with_capacity(enc.channels.len());
        let mut cin = 1;
        for (i, &cout) in enc.channels.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv2d::new(format!("{PREFIX}.conv{i}"), cin, cout, 3, stride));
            cin = cout;
        }
        Self {
            grid: cfg.grid,
            multiple: cfg.input_multiple(),
            convs,
            fc1: Linear::new(format!("{PREFIX}.fc1"), cin, enc.mlp_hidden),
            fc2: Linear::new(format!("{PREFIX}.fc2"), enc.mlp_hidden, cfg.grid.bins()),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, ps: &mut ParameterSet, rng: &mut R) {
        for c in &self.convs {
            c.init(ps, rng);
        }
        self.fc1.init(ps, rng);
        self.fc2.init(ps, rng);
    }

    /// `gray: [N, 1, H, W]` with `H, W` multiples of the model's input multiple.
    pub fn forward(&self, f: &mut Forward, gray: Var) -> Result<EncoderVars> {
        let (_, c, h, w) = f.g.value(gray).dims4();
        if c != 1 {
            return Err(Error::Shape(format!("encoder expects 1 channel, got {c}")));
        }
        check_multiple(h, w, self.multiple)?;
        let mut x = gray;
        for conv in &self.convs {
            x = conv.forward(f, x);
            x = f.g.leaky_relu(x, SLOPE);
        }
        let features = x;
        let pooled = f.g.global_avg_pool(features);
        let hidden = self.fc1.forward(f, pooled);
        let hidden = f.g.leaky_relu(hidden, SLOPE);
        let logits = self.fc2.forward(f, hidden);
        let probs = f.g.sigmoid(logits);
        let palette = f.g.normalize_rows(probs);
        Ok(EncoderVars { palette, features })
    }

    /// Single-image evaluation-mode pass.
    pub fn predict(&self, gray: &GrayImage, params: &ParameterSet) -> Result<PaletteEncoderOutput> {
        let mut g = Graph::new();
        let x = g.constant(GrayImage::batch(std::slice::from_ref(gray))?);
        let mut f = Forward::frozen(&mut g, params, false);
        let out = self.forward(&mut f, x)?;
        let palette = PaletteHistogram::from_rows(g.value(out.palette), self.grid.n_a, self.grid.n_b)?
            .remove(0);
        let semantic_features = g.value(out.features).unstack().remove(0);
        Ok(PaletteEncoderOutput {
            palette,
            semantic_features,
        })
    }
}

pub(crate) fn check_multiple(h: usize, w: usize, multiple: usize) -> Result<()> {
    if h % multiple != 0 || w % multiple != 0 || h == 0 || w == 0 {
        return Err(Error::Padding {
            height: h,
            width: w,
            multiple,
            pad_h: (multiple - h % multiple) % multiple,
            pad_w: (multiple - w % multiple) % multiple,
        });
    }
    Ok(())
}
