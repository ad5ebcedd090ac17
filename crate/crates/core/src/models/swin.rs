//! Swin-transformer super-resolution networks: one for the whole domain and
//! one for covariate-aware tiles.

use gridsr_tensor::nn::{BatchNorm2d, Conv2d};
use gridsr_tensor::{Graph, ParamStore, Var};
use rand::Rng;

use super::blocks::{center_crop, crop_at, Rstb, ShuffleUp, StatsEmbedding};
use super::config::ModelConfig;
use super::Batch;
use crate::error::{Error, Result};

const LEAKY_SLOPE: f32 = 0.2;

/// Residual stages followed by a convolution, wrapped in a long skip.
#[derive(Debug, Clone)]
struct Body {
    stages: Vec<Rstb>,
    conv: Conv2d,
}

impl Body {
    fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        let s = &c.swin;
        let stages = s
            .depths
            .iter()
            .enumerate()
            .map(|(i, &d)| Rstb::new(store, &format!("body.stage{i}"), s.embed_dim, d, s.n_heads, s.window_size, s.mlp_ratio, rng))
            .collect();
        Self { stages, conv: Conv2d::new(store, "body.conv", s.embed_dim, s.embed_dim, 3, rng) }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut y = x;
        for st in &self.stages {
            y = st.forward(g, y)?;
        }
        let y = self.conv.forward(g, y)?;
        Ok(g.add(x, y)?)
    }
}

/// Batch norm, one residual Swin stage, pixel shuffle ×2, leaky ReLU.
#[derive(Debug, Clone)]
struct Denoise {
    bn: BatchNorm2d,
    stage: Rstb,
    up: ShuffleUp,
}

impl Denoise {
    fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        let s = &c.swin;
        Self {
            bn: BatchNorm2d::new(store, "denoise.bn", s.embed_dim),
            stage: Rstb::new(store, "denoise.stage", s.embed_dim, s.denoise_depth, s.n_heads, s.window_size, s.mlp_ratio, rng),
            up: ShuffleUp::new(store, "denoise.up", s.embed_dim, s.out_features, 2, 3, rng),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.bn.forward(g, x)?;
        let y = self.stage.forward(g, y)?;
        let y = self.up.forward(g, y)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

fn check_input(g: &Graph, x: Var, c: &ModelConfig) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != c.lr_shape {
        return Err(Error::Shape(format!("expected LR input [B, 1, {}, {}], got {s:?}", c.lr_shape.0, c.lr_shape.1)));
    }
    Ok(s[0])
}

#[derive(Debug, Clone)]
pub struct SwinFull {
    config: ModelConfig,
    embed: StatsEmbedding,
    shallow: Conv2d,
    body: Body,
    upscale: ShuffleUp,
    denoise: Denoise,
    pub last: Conv2d,
}

impl SwinFull {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        let e = c.swin.embed_dim;
        Self {
            config: c.clone(),
            embed: StatsEmbedding::new(store, "stats_embed", c.lr_shape, rng),
            shallow: Conv2d::new(store, "shallow", 2, e, 3, rng),
            body: Body::new(store, c, rng),
            upscale: ShuffleUp::new(store, "upscale", e, e, 2, 3, rng),
            denoise: Denoise::new(store, c, rng),
            last: Conv2d::new(store, "last", c.swin.out_features, 1, 3, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let x = g.input(batch.lr.clone());
        check_input(g, x, &self.config)?;
        let stats = g.input(batch.stats.clone());
        let emb = self.embed.forward(g, stats)?;
        let x = g.concat(&[x, emb], 1)?;
        let x = self.shallow.forward(g, x)?;
        let (ch, cw) = self.config.crop_shape();
        let x = center_crop(g, x, ch, cw)?;
        let x = self.body.forward(g, x)?;
        let x = self.upscale.forward(g, x)?;
        let x = self.denoise.forward(g, x)?;
        self.last.forward(g, x).map_err(Error::from)
    }
}

/// Three-stage encoder of the HR covariate window, emitting two-channel
/// features at the tile resolution, half of it, and a quarter of it.
#[derive(Debug, Clone)]
pub struct CovariateEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    tile: usize,
}

impl CovariateEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, hidden: usize, tile: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(store, "encoder.conv1", 2, hidden, 3, rng),
            conv2: Conv2d::new(store, "encoder.conv2", hidden, 2, 3, rng),
            down1: Conv2d::new(store, "encoder.down1", 2, 2, 3, rng),
            down2: Conv2d::new(store, "encoder.down2", 2, 2, 3, rng),
            tile,
        }
    }

    /// `cov` is `[B, 2, S, S]`; `offsets` locate each tile inside its window.
    /// Returns features at `tile`, `tile/2`, `tile/4`.
    pub fn forward(&self, g: &mut Graph, cov: Var, offsets: &[(usize, usize)]) -> Result<[Var; 3]> {
        let y = self.conv1.forward(g, cov)?;
        let y = g.gelu(y);
        let y = self.conv2.forward(g, y)?;
        let e_full = crop_at(g, y, self.tile, self.tile, offsets)?;
        let p = g.avg_pool2(e_full)?;
        let e_half = self.down1.forward(g, p)?;
        let p = g.avg_pool2(e_half)?;
        let e_quarter = self.down2.forward(g, p)?;
        Ok([e_full, e_half, e_quarter])
    }
}

#[derive(Debug, Clone)]
pub struct SwinTile {
    config: ModelConfig,
    embed: StatsEmbedding,
    processor: Conv2d,
    pub encoder: CovariateEncoder,
    head: Conv2d,
    body: Body,
    upscale: ShuffleUp,
    fuse: Conv2d,
    denoise: Denoise,
    pub last: Conv2d,
}

impl SwinTile {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        let e = c.swin.embed_dim;
        Self {
            config: c.clone(),
            embed: StatsEmbedding::new(store, "stats_embed", c.lr_shape, rng),
            processor: Conv2d::new(store, "processor", 4, 3, 1, rng),
            encoder: CovariateEncoder::new(store, c.encoder_channels, c.hr_shape.0, rng),
            head: Conv2d::new(store, "head", 5, e, 3, rng),
            body: Body::new(store, c, rng),
            upscale: ShuffleUp::new(store, "upscale", e, e, 2, 3, rng),
            fuse: Conv2d::new(store, "fuse", e + 2, e, 3, rng),
            denoise: Denoise::new(store, c, rng),
            last: Conv2d::new(store, "last", c.swin.out_features + 2, 1, 3, rng),
        }
    }

    /// Processor output `[B, 3, h/4, w/4]`: a 1×1 convolution over the LR
    /// value, its two covariates and the stats channel, then a crop.
    pub fn process(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let x = g.input(batch.lr.clone());
        let b = check_input(g, x, &self.config)?;
        let cov = batch
            .lr_covariates
            .as_ref()
            .ok_or_else(|| Error::Config("tiled model needs LR covariates".into()))?;
        let cov = g.input(cov.clone());
        let stats = g.input(batch.stats.clone());
        let emb = self.embed.forward(g, stats)?;
        let x = g.concat(&[x, cov, emb], 1)?;
        let x = self.processor.forward(g, x)?;
        let (ch, cw) = self.config.crop_shape();
        let origins = match &batch.lr_crop {
            Some(o) if o.len() == b => o.clone(),
            Some(o) => return Err(Error::Shape(format!("{} crop origins for batch of {b}", o.len()))),
            None => vec![((self.config.lr_shape.0 - ch) / 2, (self.config.lr_shape.1 - cw) / 2); b],
        };
        crop_at(g, x, ch, cw, &origins)
    }

    pub fn encode(&self, g: &mut Graph, batch: &Batch) -> Result<[Var; 3]> {
        let cov = batch
            .hr_covariates
            .as_ref()
            .ok_or_else(|| Error::Config("tiled model needs an HR covariate window".into()))?;
        let b = cov.shape()[0];
        let cov = g.input(cov.clone());
        let offsets = match &batch.cov_offset {
            Some(o) => o.clone(),
            None => {
                let s = g.shape(cov);
                let t = self.config.hr_shape.0;
                vec![((s[2] - t) / 2, (s[3] - t) / 2); b]
            }
        };
        self.encoder.forward(g, cov, &offsets)
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let p = self.process(g, batch)?;
        let [e_full, e_half, e_quarter] = self.encode(g, batch)?;
        let x = g.concat(&[p, e_quarter], 1)?;
        let x = self.head.forward(g, x)?;
        let x = self.body.forward(g, x)?;
        let x = self.upscale.forward(g, x)?;
        let x = g.concat(&[x, e_half], 1)?;
        let x = self.fuse.forward(g, x)?;
        let x = self.denoise.forward(g, x)?;
        let x = g.concat(&[x, e_full], 1)?;
        self.last.forward(g, x).map_err(Error::from)
    }
}
