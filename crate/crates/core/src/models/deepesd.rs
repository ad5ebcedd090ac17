use gridsr_tensor::nn::{Conv2d, Linear};
use gridsr_tensor::{Graph, ParamStore, Var};
use rand::Rng;

use super::blocks::StatsEmbedding;
use super::config::ModelConfig;
use super::Batch;
use crate::error::{Error, Result};

/// 3×3 convolutions on the LR grid, then one dense map from the flattened
/// features to every HR cell.
#[derive(Debug, Clone)]
pub struct DeepEsd {
    config: ModelConfig,
    embed: StatsEmbedding,
    convs: Vec<Conv2d>,
    pub dense: Linear,
}

impl DeepEsd {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 2;
        for (i, &c_out) in c.deepesd_channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("conv{i}"), c_in, c_out, 3, rng));
            c_in = c_out;
        }
        let (lh, lw) = c.lr_shape;
        let (h, w) = c.hr_shape;
        Self {
            config: c.clone(),
            embed: StatsEmbedding::new(store, "stats_embed", c.lr_shape, rng),
            convs,
            dense: Linear::new(store, "dense", c_in * lh * lw, h * w, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let x = g.input(batch.lr.clone());
        let s = g.shape(x).to_vec();
        let (lh, lw) = self.config.lr_shape;
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != (lh, lw) {
            return Err(Error::Shape(format!("expected LR input [B, 1, {lh}, {lw}], got {s:?}")));
        }
        let stats = g.input(batch.stats.clone());
        let emb = self.embed.forward(g, stats)?;
        let mut y = g.concat(&[x, emb], 1)?;
        let n = self.convs.len();
        for (i, c) in self.convs.iter().enumerate() {
            y = c.forward(g, y)?;
            // the last layer feeds the dense map directly, a ReLU there can
            // silence whole regions of the output
            if i + 1 < n {
                y = g.relu(y);
            }
        }
        let feat = g.shape(y)[1..].iter().product::<usize>();
        let y = g.reshape(y, &[s[0], feat])?;
        let y = self.dense.forward(g, y)?;
        let (h, w) = self.config.hr_shape;
        Ok(g.reshape(y, &[s[0], 1, h, w])?)
    }
}
