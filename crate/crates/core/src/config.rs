//! Architecture configuration and size presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::palette::PaletteGrid;

/// Palette encoder: strided convolution stack, global pool, two-layer MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output widths of the convolution blocks. The first block keeps the
    /// input resolution, every later one halves it; the last width is the
    /// semantic feature depth `d_s`.
    pub channels: Vec<usize>,
    pub mlp_hidden: usize,
}

/// How the local affine coefficient map is transformed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiKind {
    /// Two 1x1 convolutions with a leaky ReLU between them.
    Learned,
    /// Pass-through; used to check the guided-filter recovery property.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    /// Master switch; when off the generator skips the module entirely.
    pub enabled: bool,
    pub global: bool,
    pub local: bool,
    /// Width of the key/query projections of the semantic features.
    pub key_dim: usize,
    /// Odd box-filter window for local statistics.
    pub window: usize,
    pub eps: f64,
    pub psi: PsiKind,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            global: true,
            local: true,
            key_dim: 32,
            window: 3,
            eps: 1e-4,
            psi: PsiKind::Learned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub num_residual_blocks: usize,
    pub d_z: usize,
    pub attention: AttentionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Widths of the stride-2 blocks; the last is the embedding size.
    pub channels: Vec<usize>,
    /// Adds `u . g` to the palette projection score.
    pub unconditional: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: PaletteGrid,
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small enough to train in minutes on one CPU core (64x64 crops).
    pub fn toy() -> Self {
        Self {
            grid: PaletteGrid::default(),
            encoder: EncoderConfig {
                channels: vec![8, 16, 32, 32, 32],
                mlp_hidden: 64,
            },
            generator: GeneratorConfig {
                base_channels: 8,
                num_residual_blocks: 1,
                d_z: 16,
                attention: AttentionConfig {
                    key_dim: 16,
                    ..AttentionConfig::default()
                },
            },
            discriminator: DiscriminatorConfig {
                channels: vec![16, 32, 64, 64],
                unconditional: true,
            },
        }
    }

    /// Desk-scale defaults: 64x64 crops, 32x32x32 attention features.
    pub fn desk() -> Self {
        Self {
            grid: PaletteGrid::default(),
            encoder: EncoderConfig {
                channels: vec![32, 64, 128, 256, 128],
                mlp_hidden: 256,
            },
            generator: GeneratorConfig {
                base_channels: 16,
                num_residual_blocks: 2,
                d_z: 64,
                attention: AttentionConfig::default(),
            },
            discriminator: DiscriminatorConfig {
                channels: vec![32, 64, 128, 256],
                unconditional: true,
            },
        }
    }

    /// 256x256 setting with 128x128x64 attention features.
    pub fn paper() -> Self {
        Self {
            grid: PaletteGrid::default(),
            encoder: EncoderConfig {
                channels: vec![32, 64, 128, 256, 256],
                mlp_hidden: 512,
            },
            generator: GeneratorConfig {
                base_channels: 32,
                num_residual_blocks: 4,
                d_z: 64,
                attention: AttentionConfig {
                    key_dim: 64,
                    ..AttentionConfig::default()
                },
            },
            discriminator: DiscriminatorConfig {
                channels: vec![64, 128, 256, 256, 256],
                unconditional: true,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown model preset {other:?} (expected toy, desk or paper)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let e = &self.encoder;
        if e.channels.len() < 2 || e.channels.contains(&0) || e.mlp_hidden == 0 {
            return Err(Error::Config(
                "encoder needs at least two non-empty conv blocks and a hidden layer".into(),
            ));
        }
        let g = &self.generator;
        if g.base_channels == 0 || g.d_z == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        let a = &g.attention;
        if a.enabled {
            if !(a.global || a.local) {
                return Err(Error::Config(
                    "attention enabled with both global and local branches off".into(),
                ));
            }
            if a.window % 2 == 0 || a.key_dim == 0 || !(a.eps > 0.0) {
                return Err(Error::Config(
                    "attention needs an odd window, key_dim > 0 and eps > 0".into(),
                ));
            }
        }
        let d = &self.discriminator;
        if d.channels.is_empty() || d.channels.contains(&0) {
            return Err(Error::Config("discriminator needs non-empty blocks".into()));
        }
        Ok(())
    }

    /// Resolution divisor of the encoder's semantic features.
    pub fn semantic_stride(&self) -> usize {
        1 << (self.encoder.channels.len() - 1)
    }

    /// Input sides must be multiples of this.
    pub fn input_multiple(&self) -> usize {
        self.semantic_stride().max(4)
    }

    pub fn semantic_channels(&self) -> usize {
        *self.encoder.channels.last().expect("validated")
    }

    pub fn embed_dim(&self) -> usize {
        *self.discriminator.channels.last().expect("validated")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in ["toy", "desk", "paper"] {
            let c = ModelConfig::preset(p).unwrap();
            c.validate().unwrap();
            assert_eq!(c.input_multiple(), 16);
        }
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn desk_semantic_depth() {
        assert_eq!(ModelConfig::desk().semantic_channels(), 128);
        assert_eq!(ModelConfig::paper().semantic_channels(), 256);
        assert_eq!(ModelConfig::paper().embed_dim(), 256);
    }

    #[test]
    fn rejects_even_window() {
        let mut c = ModelConfig::toy();
        c.generator.attention.window = 4;
        assert!(c.validate().is_err());
    }
}
