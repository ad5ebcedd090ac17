use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalization::NormVariant;
use crate::tiling::TilingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Bicubic,
    Unet,
    Deepesd,
    SwinFull,
    SwinTile,
}

impl Architecture {
    pub const ALL: [Architecture; 5] =
        [Architecture::Bicubic, Architecture::Unet, Architecture::Deepesd, Architecture::SwinFull, Architecture::SwinTile];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Bicubic => "bicubic",
            Architecture::Unet => "unet",
            Architecture::Deepesd => "deepesd",
            Architecture::SwinFull => "swin_full",
            Architecture::SwinTile => "swin_tile",
        }
    }

    pub fn is_tiled(self) -> bool {
        self == Architecture::SwinTile
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How a field is covered at training and inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TilingMode {
    /// The whole domain is one sample.
    Full,
    /// Fixed disjoint tiles, stitched verbatim.
    Tiles,
    /// Randomly placed tiles in training, overlapping blended tiles at inference.
    Patches,
}

impl std::str::FromStr for TilingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TilingMode::Full),
            "tiles" => Ok(TilingMode::Tiles),
            "patches" => Ok(TilingMode::Patches),
            _ => Err(Error::Config(format!("unknown tiling mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwinConfig {
    pub window_size: usize,
    /// Swin blocks per residual stage at the input resolution.
    pub depths: Vec<usize>,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    /// Swin blocks in the denoising stage.
    pub denoise_depth: usize,
    /// Channels entering the final convolution.
    pub out_features: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        Self { window_size: 10, depths: vec![4, 4], n_heads: 6, embed_dim: 96, mlp_ratio: 2, denoise_depth: 2, out_features: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Upsampling factor inside the network.
    pub scale_factor: usize,
    /// Spatial shape of the network's LR input (a window for tiled models).
    pub lr_shape: (usize, usize),
    /// Spatial shape of the network's output.
    pub hr_shape: (usize, usize),
    pub swin: SwinConfig,
    pub unet_base: usize,
    pub unet_depth: usize,
    pub deepesd_channels: Vec<usize>,
    /// Hidden channels of the covariate encoder.
    pub encoder_channels: usize,
    pub norm_variant: NormVariant,
    pub tiling: TilingConfig,
    /// Trainable parameter count, filled in when the network is built.
    #[serde(default)]
    pub param_count: usize,
}

impl ModelConfig {
    /// Reference-scale configuration for a full-domain `lr_shape → hr_shape`
    /// problem (tile geometry for the tiled architecture).
    pub fn reference(architecture: Architecture, lr_shape: (usize, usize), hr_shape: (usize, usize)) -> Self {
        let tiling = TilingConfig::default();
        let (lr_shape, hr_shape, swin) = if architecture.is_tiled() {
            let swin = SwinConfig { window_size: 5, depths: vec![4], n_heads: 4, embed_dim: 64, ..SwinConfig::default() };
            ((tiling.lr_size, tiling.lr_size), (tiling.tile_size, tiling.tile_size), swin)
        } else {
            (lr_shape, hr_shape, SwinConfig::default())
        };
        Self {
            architecture,
            scale_factor: 4,
            lr_shape,
            hr_shape,
            swin,
            unet_base: 64,
            unet_depth: 4,
            deepesd_channels: vec![50, 25, 1],
            encoder_channels: 16,
            norm_variant: NormVariant::default(),
            tiling,
            param_count: 0,
        }
    }

    /// Reduced widths for CPU-scale experiments; every shape relation of the
    /// reference configuration is kept.
    pub fn desk(architecture: Architecture, lr_shape: (usize, usize), hr_shape: (usize, usize)) -> Self {
        let mut c = Self::reference(architecture, lr_shape, hr_shape);
        c.swin.embed_dim = 32;
        c.swin.n_heads = 4;
        c.swin.out_features = 16;
        c.swin.denoise_depth = 2;
        if architecture == Architecture::SwinFull {
            c.swin.window_size = desk_window(hr_shape.0 / 4, hr_shape.1 / 4);
            c.swin.depths = vec![2, 2];
        } else {
            c.swin.depths = vec![2];
        }
        c.unet_base = 8;
        c.deepesd_channels = vec![16, 8, 1];
        c.encoder_channels = 8;
        c
    }

    /// Spatial shape after the full-domain crop, which upsamples ×4 to `hr_shape`.
    pub fn crop_shape(&self) -> (usize, usize) {
        (self.hr_shape.0 / self.scale_factor, self.hr_shape.1 / self.scale_factor)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.hr_shape;
        let (lh, lw) = self.lr_shape;
        if h == 0 || w == 0 || lh == 0 || lw == 0 {
            return Err(Error::Config("model shapes must be non-empty".into()));
        }
        match self.architecture {
            Architecture::Bicubic | Architecture::Unet | Architecture::Deepesd => {
                if self.architecture == Architecture::Deepesd && self.deepesd_channels.is_empty() {
                    return Err(Error::Config("deepesd needs at least one convolution".into()));
                }
                if self.architecture == Architecture::Unet && (self.unet_depth == 0 || self.unet_base == 0) {
                    return Err(Error::Config("unet depth and width must be positive".into()));
                }
            }
            Architecture::SwinFull | Architecture::SwinTile => {
                if self.scale_factor != 4 {
                    return Err(Error::Config("swin models upsample by exactly 4 (two ×2 pixel shuffles)".into()));
                }
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Config(format!("output {h}x{w} is not divisible by 4")));
                }
                let (ch, cw) = self.crop_shape();
                if ch > lh || cw > lw {
                    return Err(Error::Config(format!("crop {ch}x{cw} is larger than the input {lh}x{lw}")));
                }
                let s = &self.swin;
                if s.embed_dim == 0 || s.n_heads == 0 || s.embed_dim % s.n_heads != 0 {
                    return Err(Error::Config(format!("embed_dim {} must be a positive multiple of n_heads {}", s.embed_dim, s.n_heads)));
                }
                // stages run at the crop resolution and at twice that
                for (sh, sw) in [(ch, cw), (2 * ch, 2 * cw)] {
                    if s.window_size == 0 || sh % s.window_size != 0 || sw % s.window_size != 0 {
                        return Err(Error::Config(format!("window {} does not divide stage {sh}x{sw}", s.window_size)));
                    }
                }
                if self.architecture == Architecture::SwinTile {
                    let t = &self.tiling;
                    if (t.tile_size, t.tile_size) != self.hr_shape || (t.lr_size, t.lr_size) != self.lr_shape {
                        return Err(Error::Config("tiled model shapes must match the tiling configuration".into()));
                    }
                    if t.tile_size % 4 != 0 || t.cov_size < t.tile_size {
                        return Err(Error::Config("tile size must be divisible by 4 and fit in the covariate window".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Smallest window in 5..=10 dividing both stage sizes, else their gcd.
fn desk_window(h: usize, w: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 { a } else { gcd(b, a % b) }
    }
    (5..=10).find(|k| h % k == 0 && w % k == 0).unwrap_or_else(|| gcd(h, w).max(1))
}
