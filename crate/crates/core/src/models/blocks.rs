//! Reusable network blocks: stats embedding, shifted-window attention,
//! residual Swin stages, pixel-shuffle upsampling, U-Net double convolutions.

use gridsr_tensor::index::{self, IndexMap};
use gridsr_tensor::nn::{BatchNorm2d, Conv2d, LayerNorm, Linear};
use gridsr_tensor::{init_normal, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Value added to attention logits between tokens that are not neighbours
/// after the cyclic shift.
const MASK_VALUE: f32 = -100.0;

/// Learned affine map from the two per-sample statistics to one channel of a
/// fixed spatial shape.
#[derive(Debug, Clone)]
pub struct StatsEmbedding {
    pub linear: Linear,
    pub shape: (usize, usize),
}

impl StatsEmbedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, shape: (usize, usize), rng: &mut R) -> Self {
        Self { linear: Linear::new(store, name, 2, shape.0 * shape.1, rng), shape }
    }

    /// `[B, 2]` features to a `[B, 1, h, w]` channel.
    pub fn forward(&self, g: &mut Graph, stats: Var) -> Result<Var> {
        let b = g.shape(stats)[0];
        let y = self.linear.forward(g, stats)?;
        Ok(g.reshape(y, &[b, 1, self.shape.0, self.shape.1])?)
    }
}

/// Position-bias table index for a `w × w` window: entry `[i, j]` is the
/// table row of the relative offset from token `j` to token `i`.
fn relative_index(w: usize) -> Vec<usize> {
    let t = w * w;
    let mut out = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = (i / w) as isize - (j / w) as isize + w as isize - 1;
            let dx = (i % w) as isize - (j % w) as isize + w as isize - 1;
            out.push((dy as usize) * (2 * w - 1) + dx as usize);
        }
    }
    out
}

/// Additive `[nW, 1, T, T]` mask separating regions that the cyclic shift
/// brought into the same window.
fn shift_mask(h: usize, wd: usize, w: usize, shift: usize) -> Tensor {
    let region = |p: usize, n: usize| {
        if p < n - w {
            0
        } else if p < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / w, wd / w);
    let t = w * w;
    let mut data = Vec::with_capacity(nh * nw * t * t);
    for wy in 0..nh {
        for wx in 0..nw {
            let ids: Vec<usize> =
                (0..t).map(|k| region(wy * w + k / w, h) * 3 + region(wx * w + k % w, wd)).collect();
            for i in 0..t {
                for j in 0..t {
                    data.push(if ids[i] == ids[j] { 0.0 } else { MASK_VALUE });
                }
            }
        }
    }
    Tensor::new(&[nh * nw, 1, t, t], data).expect("mask shape")
}

/// Multi-head scaled-cosine self-attention within windows, with a learned
/// relative position bias table and a per-head clamped logit scale.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub logit_scale: ParamId,
    pub bias_table: ParamId,
    pub heads: usize,
    pub window: usize,
    rel_index: Vec<usize>,
}

impl WindowAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, window: usize, rng: &mut R) -> Self {
        let span = 2 * window - 1;
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            logit_scale: store.add(format!("{name}.logit_scale"), Tensor::full(&[heads], 10f32.ln())),
            bias_table: store.add(format!("{name}.bias_table"), init_normal(&[span * span, heads], 0.02, rng)),
            heads,
            window,
            rel_index: relative_index(window),
        }
    }

    fn bias(&self, g: &mut Graph) -> Result<Var> {
        let t = self.window * self.window;
        let h = self.heads;
        let mut src = Vec::with_capacity(h * t * t);
        for head in 0..h {
            src.extend(self.rel_index.iter().map(|&r| (r * h + head) as u32));
        }
        let table = g.param(self.bias_table);
        Ok(g.gather(table, IndexMap { out_shape: vec![h, t, t], src })?)
    }

    /// Softmax attention weights `[N, heads, T, T]` for windows `[N, T, C]`;
    /// `mask` is `[nW, 1, T, T]` when the windows come from a shifted grid.
    pub fn weights(&self, g: &mut Graph, windows: Var, mask: Option<&Tensor>) -> Result<(Var, Var)> {
        let s = g.shape(windows).to_vec();
        let (n, t, c) = (s[0], s[1], s[2]);
        let (h, hd) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(g, windows)?;
        let qkv = g.reshape(qkv, &[n, t, 3, h, hd])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let part = |g: &mut Graph, k: usize| -> Result<Var> {
            let p = g.narrow(qkv, 0, k, 1)?;
            Ok(g.reshape(p, &[n * h, t, hd])?)
        };
        let (q, k, v) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
        let q = g.l2_normalize(q, 1e-6);
        let k = g.l2_normalize(k, 1e-6);
        let attn = g.matmul(q, k, false, true)?;
        let attn = g.reshape(attn, &[n, h, t, t])?;
        let ls = g.param(self.logit_scale);
        let ls = g.clamp_max(ls, 100f32.ln());
        let ls = g.exp(ls);
        let ls = g.reshape(ls, &[h, 1, 1])?;
        let attn = g.mul(attn, ls)?;
        let bias = self.bias(g)?;
        let mut attn = g.add(attn, bias)?;
        if let Some(mask) = mask {
            let nw = mask.shape()[0];
            let m = g.input(mask.clone());
            let a = g.reshape(attn, &[n / nw, nw, h, t, t])?;
            let a = g.add(a, m)?;
            attn = g.reshape(a, &[n, h, t, t])?;
        }
        Ok((g.softmax(attn), v))
    }

    pub fn forward(&self, g: &mut Graph, windows: Var, mask: Option<&Tensor>) -> Result<Var> {
        let s = g.shape(windows).to_vec();
        let (n, t, c) = (s[0], s[1], s[2]);
        let h = self.heads;
        let (attn, v) = self.weights(g, windows, mask)?;
        let attn = g.reshape(attn, &[n * h, t, t])?;
        let out = g.matmul(attn, v, false, false)?;
        let out = g.reshape(out, &[n, h, t, c / h])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[n, t, c])?;
        self.proj.forward(g, out).map_err(Error::from)
    }
}

/// Post-norm Swin block on channels-last `[B, H, W, C]` tokens.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub attn: WindowAttention,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
}

impl SwinBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        shifted: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: WindowAttention::new(store, &format!("{name}.attn"), dim, heads, window, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim * mlp_ratio, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim * mlp_ratio, dim, rng),
            shifted,
        }
    }

    /// Cyclic shift used for a `h × w` token grid; none when one window
    /// covers the grid.
    pub fn shift_for(&self, h: usize, w: usize) -> usize {
        let win = self.attn.window;
        if self.shifted && h > win && w > win {
            win / 2
        } else {
            0
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (h, w) = (s[1], s[2]);
        let win = self.attn.window;
        let shift = self.shift_for(h, w);
        let part = index::window_partition(&s, win, shift)?;
        let windows = g.gather(x, part)?;
        let mask = (shift > 0).then(|| shift_mask(h, w, win, shift));
        let a = self.attn.forward(g, windows, mask.as_ref())?;
        let rev = index::window_reverse(g.shape(a), win, h, w, shift)?;
        let a = g.gather(a, rev)?;
        let a = self.norm1.forward(g, a)?;
        let x = g.add(x, a)?;
        let m = self.fc1.forward(g, x)?;
        let m = g.gelu(m);
        let m = self.fc2.forward(g, m)?;
        let m = self.norm2.forward(g, m)?;
        Ok(g.add(x, m)?)
    }
}

/// Residual stage: Swin blocks with alternating shifts, a 3×3 convolution,
/// and a skip connection, on `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct Rstb {
    pub blocks: Vec<SwinBlock>,
    pub conv: Conv2d,
}

impl Rstb {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| SwinBlock::new(store, &format!("{name}.block{i}"), dim, heads, window, mlp_ratio, i % 2 == 1, rng))
            .collect();
        Self { blocks, conv: Conv2d::new(store, &format!("{name}.conv"), dim, dim, 3, rng) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut t = g.permute(x, &[0, 2, 3, 1])?;
        for b in &self.blocks {
            t = b.forward(g, t)?;
        }
        let y = g.permute(t, &[0, 3, 1, 2])?;
        let y = self.conv.forward(g, y)?;
        Ok(g.add(x, y)?)
    }
}

/// Convolution to `r²·C_out` channels followed by a pixel shuffle.
#[derive(Debug, Clone)]
pub struct ShuffleUp {
    pub conv: Conv2d,
    pub r: usize,
}

impl ShuffleUp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, r: usize, k: usize, rng: &mut R) -> Self {
        Self { conv: Conv2d::new(store, name, c_in, c_out * r * r, k, rng), r }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let map = index::pixel_shuffle(g.shape(y), self.r)?;
        Ok(g.gather(y, map)?)
    }
}

/// Two conv-BN-ReLU layers.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub c1: Conv2d,
    pub bn1: BatchNorm2d,
    pub c2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl DoubleConv {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            c1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c_out),
            c2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.c1.forward(g, x)?;
        let y = self.bn1.forward(g, y)?;
        let y = g.relu(y);
        let y = self.c2.forward(g, y)?;
        let y = self.bn2.forward(g, y)?;
        Ok(g.relu(y))
    }
}

/// Center crop of `[B, C, H, W]` to `h × w` with offset `⌊(in − out)/2⌋`.
pub fn center_crop(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let origin = ((s[2] - h) / 2, (s[3] - w) / 2);
    let map = index::crop2d(&s, h, w, &vec![origin; s[0]])?;
    Ok(g.gather(x, map)?)
}

/// Per-sample crop of `[B, C, H, W]` at the given origins.
pub fn crop_at(g: &mut Graph, x: Var, h: usize, w: usize, origins: &[(usize, usize)]) -> Result<Var> {
    let map = index::crop2d(g.shape(x), h, w, origins)?;
    Ok(g.gather(x, map)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridsr_tensor::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relative_index_is_translation_invariant() {
        let idx = relative_index(3);
        // tokens (0,0)->(1,1) and (1,1)->(2,2) share an offset
        assert_eq!(idx[4 * 9], idx[8 * 9 + 4]);
        assert_eq!(*idx.iter().max().unwrap(), 24);
    }

    #[test]
    fn shift_mask_blocks_wrapped_neighbours() {
        let m = shift_mask(4, 4, 2, 1);
        assert_eq!(m.shape(), &[4, 1, 4, 4]);
        // the first window holds no wrapped tokens
        assert!(m.data()[..16].iter().all(|v| *v == 0.0));
        // the last window mixes all four regions
        assert!(m.data()[48..].iter().filter(|v| **v != 0.0).count() == 12);
    }

    #[test]
    fn swin_block_keeps_shape_and_attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let blk = SwinBlock::new(&mut store, "b", 8, 2, 2, 2, true, &mut rng);
        let x = random(&[2, 4, 4, 8], &mut rng);
        let mut g = Graph::inference(&store);
        let xv = g.input(x);
        let y = blk.forward(&mut g, xv).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 8]);
        let part = index::window_partition(&[2, 4, 4, 8], 2, 1).unwrap();
        let w = g.gather(xv, part).unwrap();
        let mask = shift_mask(4, 4, 2, 1);
        let (a, _) = blk.attn.weights(&mut g, w, Some(&mask)).unwrap();
        for row in g.value(a).data().chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unshifted_block_is_window_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let blk = SwinBlock::new(&mut store, "b", 8, 2, 2, 2, false, &mut rng);
        let x = random(&[1, 4, 4, 8], &mut rng);
        // swap the top-left and bottom-right 2x2 windows
        let swap = |t: &Tensor| {
            let mut o = t.clone();
            for y in 0..2 {
                for x in 0..2 {
                    for c in 0..8 {
                        let a = (y * 4 + x) * 8 + c;
                        let b = ((y + 2) * 4 + x + 2) * 8 + c;
                        o.data_mut()[a] = t.data()[b];
                        o.data_mut()[b] = t.data()[a];
                    }
                }
            }
            o
        };
        let run = |t: Tensor| {
            let mut g = Graph::new(&store, Mode::Eval);
            let v = g.input(t);
            let y = blk.forward(&mut g, v).unwrap();
            g.value(y).clone()
        };
        let direct = run(x.clone());
        let permuted = swap(&run(swap(&x)));
        assert!(direct.max_abs_diff(&permuted) < 1e-6);
    }

    #[test]
    fn rstb_and_shuffle_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let r = Rstb::new(&mut store, "r", 8, 2, 2, 5, 2, &mut rng);
        let up = ShuffleUp::new(&mut store, "u", 8, 4, 2, 3, &mut rng);
        let mut g = Graph::inference(&store);
        let x = g.input(random(&[2, 8, 10, 10], &mut rng));
        let y = r.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 8, 10, 10]);
        let z = up.forward(&mut g, y).unwrap();
        assert_eq!(g.shape(z), &[2, 4, 20, 20]);
        let c = center_crop(&mut g, z, 13, 12).unwrap();
        assert_eq!(g.shape(c), &[2, 4, 13, 12]);
    }
}
