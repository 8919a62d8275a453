pub mod assignment_generator;
pub mod autograd;
pub mod checkpoint;
pub mod chromatic_attention;
pub mod colorspace;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod palette;
pub mod palette_generator;
pub mod training;

pub use autograd::{Graph, Tensor, Var};
pub use colorspace::{ChromaMap, GrayImage, RgbImage};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use palette::{PaletteGrid, PaletteHistogram};
