//! The three networks together, plus single-image inference.

use rand::Rng;

use crate::assignment_generator::{Generator, LatentCode};
use crate::autograd::{Graph, Tensor};
use crate::colorspace::{lab_to_rgb, ChromaMap, GrayImage, RgbImage};
use crate::config::ModelConfig;
use crate::discriminator::Discriminator;
use crate::error::Result;
use crate::nn::{Forward, ParameterSet};
use crate::palette::PaletteHistogram;
use crate::palette_generator::PaletteEncoder;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: PaletteEncoder,
    pub generator: Generator,
    pub discriminator: Discriminator,
}

/// Result of colorizing one image.
#[derive(Clone, Debug)]
pub struct Colorization {
    pub chroma: ChromaMap,
    pub rgb: RgbImage,
    /// Palette the generator was conditioned on.
    pub palette: PaletteHistogram,
    /// The encoder's own prediction, whatever was used.
    pub predicted_palette: PaletteHistogram,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: PaletteEncoder::new(&config),
            generator: Generator::new(&config),
            discriminator: Discriminator::new(&config),
            config,
        })
    }

    /// Fresh parameters for all three networks.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut ps = ParameterSet::new();
        self.encoder.init(&mut ps, rng);
        self.generator.init(&mut ps, rng);
        self.discriminator.init(&mut ps, rng);
        ps
    }

    /// Smallest padded size accepted by the networks.
    pub fn padded_size(&self, width: usize, height: usize) -> (usize, usize) {
        let m = self.config.input_multiple();
        (width.div_ceil(m) * m, height.div_ceil(m) * m)
    }

    /// Colorizes `gray` of any size (edge-padded internally, cropped back).
    /// `palette` overrides the encoder's prediction when given.
    pub fn colorize(
        &self,
        gray: &GrayImage,
        palette: Option<&PaletteHistogram>,
        z: &LatentCode,
        params: &ParameterSet,
    ) -> Result<Colorization> {
        if let Some(p) = palette {
            p.check_grid(&self.config.grid)?;
        }
        let (w, h) = (gray.width(), gray.height());
        let (pw, ph) = self.padded_size(w, h);
        let padded = gray.pad_to(pw, ph)?;

        let mut g = Graph::new();
        let gv = g.constant(GrayImage::batch(std::slice::from_ref(&padded))?);
        let mut fw = Forward::frozen(&mut g, params, false);
        let enc = self.encoder.forward(&mut fw, gv)?;
        let predicted = fw.g.value(enc.palette).clone();
        let hv = match palette {
            Some(p) => fw.g.constant(PaletteHistogram::stack(std::slice::from_ref(p))),
            None => enc.palette,
        };
        let zv = fw.g.constant(LatentCode::stack(std::slice::from_ref(z)));
        let out = self.generator.forward(&mut fw, gv, hv, zv, enc.features)?;
        let chroma = ChromaMap::unbatch(g.value(out))?.remove(0).crop(0, 0, w, h)?;
        let rgb = lab_to_rgb(gray, &chroma)?;
        let grid = self.config.grid;
        let predicted_palette = PaletteHistogram::from_rows(&predicted, grid.n_a, grid.n_b)?.remove(0);
        Ok(Colorization {
            chroma,
            rgb,
            palette: palette.cloned().unwrap_or_else(|| predicted_palette.clone()),
            predicted_palette,
        })
    }

    /// Encoder palette for an image of any size.
    pub fn predict_palette(&self, gray: &GrayImage, params: &ParameterSet) -> Result<PaletteHistogram> {
        let (pw, ph) = self.padded_size(gray.width(), gray.height());
        Ok(self.encoder.predict(&gray.pad_to(pw, ph)?, params)?.palette)
    }

    pub fn latent<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentCode {
        LatentCode::sample(self.config.generator.d_z, rng)
    }

    /// `[N, d_z]` standard-normal codes.
    pub fn latent_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        LatentCode::stack(&(0..n).map(|_| self.latent(rng)).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn colorize_any_size() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = model.init(&mut rng);
        let gray = GrayImage::from_chw(&Tensor::uniform(&[1, 21, 37], 0.0, 1.0, &mut rng)).unwrap();
        let z = model.latent(&mut rng);
        let out = model.colorize(&gray, None, &z, &ps).unwrap();
        assert_eq!((out.chroma.width(), out.chroma.height()), (37, 21));
        assert_eq!(out.palette, out.predicted_palette);
        let again = model.colorize(&gray, None, &z, &ps).unwrap();
        assert_eq!(out.chroma, again.chroma);

        let reference = PaletteHistogram::one_hot(16, 16, 12, 3);
        let guided = model.colorize(&gray, Some(&reference), &z, &ps).unwrap();
        assert_eq!(guided.palette, reference);
        assert_eq!(guided.predicted_palette, out.predicted_palette);
        assert!(model
            .colorize(&gray, Some(&PaletteHistogram::uniform(4, 4)), &z, &ps)
            .is_err());
    }

    #[test]
    fn padded_size_rounds_up() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        assert_eq!(model.padded_size(64, 65), (64, 80));
    }
}
