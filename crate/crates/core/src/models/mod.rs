//! Downscaling networks sharing one output contract: each predicts a
//! normalized residual that the pipeline adds to the bicubic baseline.

pub mod bicubic;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod deepesd;
pub mod swin;
pub mod unet;

use gridsr_tensor::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bicubic::{bicubic_upsample, BicubicPlan};
pub use checkpoint::{Checkpoint, EpochRecord};
pub use config::{Architecture, ModelConfig, SwinConfig, TilingMode};

use crate::error::{Error, Result};

/// Network inputs for a batch of `B` samples, all normalized by their own
/// per-sample statistics.
#[derive(Debug, Clone)]
pub struct Batch {
    /// LR values `[B, 1, h, w]` (the LR window for tiled models).
    pub lr: Tensor,
    /// Bicubic baseline over the output footprint `[B, 1, H, W]`.
    pub base: Tensor,
    /// Rescaled `(mu, sigma)` features `[B, 2]`.
    pub stats: Tensor,
    /// LR orography and land-sea mask `[B, 2, h, w]`.
    pub lr_covariates: Option<Tensor>,
    /// HR covariate window `[B, 2, S, S]` around each tile.
    pub hr_covariates: Option<Tensor>,
    /// Per-sample origin of the processor crop inside the LR window.
    pub lr_crop: Option<Vec<(usize, usize)>>,
    /// Per-sample origin of the tile inside the HR covariate window.
    pub cov_offset: Option<Vec<(usize, usize)>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lr.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub enum Network {
    Bicubic,
    Unet(unet::Unet),
    Deepesd(deepesd::DeepEsd),
    SwinFull(swin::SwinFull),
    SwinTile(swin::SwinTile),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

impl Model {
    /// Builds and initializes the network; the same config and seed always
    /// give the same parameters.
    pub fn build(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = match config.architecture {
            Architecture::Bicubic => Network::Bicubic,
            Architecture::Unet => Network::Unet(unet::Unet::new(&mut store, &config, &mut rng)),
            Architecture::Deepesd => Network::Deepesd(deepesd::DeepEsd::new(&mut store, &config, &mut rng)),
            Architecture::SwinFull => Network::SwinFull(swin::SwinFull::new(&mut store, &config, &mut rng)),
            Architecture::SwinTile => Network::SwinTile(swin::SwinTile::new(&mut store, &config, &mut rng)),
        };
        config.param_count = store.trainable_count();
        Ok(Self { config, store, net })
    }

    /// Normalized residual `[B, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        match &self.net {
            Network::Bicubic => {
                let s = batch.base.shape();
                Ok(g.input(Tensor::zeros(&[s[0], 1, self.config.hr_shape.0, self.config.hr_shape.1])))
            }
            Network::Unet(n) => n.forward(g, batch),
            Network::Deepesd(n) => n.forward(g, batch),
            Network::SwinFull(n) => n.forward(g, batch),
            Network::SwinTile(n) => n.forward(g, batch),
        }
    }

    /// Inference-mode residual.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let y = self.forward(&mut g, batch)?;
        Ok(g.value(y).clone())
    }

    /// Zeroes the layer producing the residual, so predictions collapse to
    /// the bicubic baseline.
    pub fn zero_final_layer(&mut self) {
        match &self.net {
            Network::Bicubic => {}
            Network::Unet(n) => n.last.zero(&mut self.store),
            Network::Deepesd(n) => n.dense.zero(&mut self.store),
            Network::SwinFull(n) => n.last.zero(&mut self.store),
            Network::SwinTile(n) => n.last.zero(&mut self.store),
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn is_trainable(&self) -> bool {
        self.config.architecture != Architecture::Bicubic
    }

    /// Named parameter and buffer values in store order.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        self.store.load_named(values).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests;
