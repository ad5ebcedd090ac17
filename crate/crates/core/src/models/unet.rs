use gridsr_tensor::index;
use gridsr_tensor::nn::Conv2d;
use gridsr_tensor::{Graph, ParamStore, Var};
use rand::Rng;

use super::blocks::{crop_at, DoubleConv, ShuffleUp, StatsEmbedding};
use super::config::ModelConfig;
use super::Batch;
use crate::error::{Error, Result};

/// Zero padding `(top, bottom)` taking `n` to the next multiple of `m`; the
/// odd cell goes to the bottom.
pub fn pad_to_multiple(n: usize, m: usize) -> (usize, usize) {
    let total = n.div_ceil(m) * m - n;
    (total / 2, total - total / 2)
}

#[derive(Debug, Clone)]
pub struct Unet {
    config: ModelConfig,
    embed: StatsEmbedding,
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    /// Learned ×2 upsampling, equivalent to a stride-2 transposed convolution.
    up: Vec<ShuffleUp>,
    dec: Vec<DoubleConv>,
    pub last: Conv2d,
}

impl Unet {
    pub fn new<R: Rng>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Self {
        let widths: Vec<usize> = (0..=c.unet_depth).map(|k| c.unet_base << k).collect();
        let mut down = Vec::new();
        let mut c_in = 2;
        for k in 0..c.unet_depth {
            down.push(DoubleConv::new(store, &format!("down{k}"), c_in, widths[k], rng));
            c_in = widths[k];
        }
        let bottleneck = DoubleConv::new(store, "bottleneck", c_in, widths[c.unet_depth], rng);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for k in (0..c.unet_depth).rev() {
            up.push(ShuffleUp::new(store, &format!("up{k}"), widths[k + 1], widths[k], 2, 1, rng));
            dec.push(DoubleConv::new(store, &format!("dec{k}"), 2 * widths[k], widths[k], rng));
        }
        Self {
            config: c.clone(),
            embed: StatsEmbedding::new(store, "stats_embed", c.hr_shape, rng),
            down,
            bottleneck,
            up,
            dec,
            last: Conv2d::new(store, "last", c.unet_base, 1, 1, rng),
        }
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        let m = 1 << self.config.unet_depth;
        let (h, w) = self.config.hr_shape;
        let (t, b) = pad_to_multiple(h, m);
        let (l, r) = pad_to_multiple(w, m);
        (h + t + b, w + l + r)
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let x = g.input(batch.base.clone());
        let s = g.shape(x).to_vec();
        let (h, w) = self.config.hr_shape;
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != (h, w) {
            return Err(Error::Shape(format!("expected interpolated input [B, 1, {h}, {w}], got {s:?}")));
        }
        let stats = g.input(batch.stats.clone());
        let emb = self.embed.forward(g, stats)?;
        let x = g.concat(&[x, emb], 1)?;
        let m = 1 << self.config.unet_depth;
        let (t, bo) = pad_to_multiple(h, m);
        let (l, r) = pad_to_multiple(w, m);
        let map = index::pad2d(g.shape(x), t, bo, l, r)?;
        let mut y = g.gather(x, map)?;
        let mut skips = Vec::new();
        for d in &self.down {
            y = d.forward(g, y)?;
            skips.push(y);
            y = g.max_pool2(y)?;
        }
        y = self.bottleneck.forward(g, y)?;
        for (u, d) in self.up.iter().zip(&self.dec) {
            let skip = skips.pop().expect("one skip per level");
            y = u.forward(g, y)?;
            y = g.concat(&[skip, y], 1)?;
            y = d.forward(g, y)?;
        }
        let y = self.last.forward(g, y)?;
        crop_at(g, y, h, w, &vec![(t, l); s[0]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_arithmetic() {
        assert_eq!(pad_to_multiple(200, 16), (4, 4));
        assert_eq!(200 + 8, 208);
        assert_eq!(pad_to_multiple(320, 16), (0, 0));
        assert_eq!(pad_to_multiple(13, 4), (1, 2));
    }
}
