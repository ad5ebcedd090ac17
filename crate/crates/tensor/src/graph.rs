//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op evaluates eagerly
//! and records enough to compute its vector-Jacobian product; [`Graph::backward`]
//! walks the tape in reverse.

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::index::{self, IndexMap, ZERO};
use crate::kernels::{col2im_add, gelu, gelu_grad, gemm, im2col, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{strides_of, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    LeakyRelu(f32),
    Gelu,
    Exp,
    Sqrt,
    Square,
    Scale(f32),
    AddScalar(f32),
    ClampMax(f32),
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Reshape(Var),
    Gather { x: Var, src: Vec<u32> },
    Add { a: Var, b: Var, bmap: Option<Vec<u32>> },
    Sub { a: Var, b: Var, bmap: Option<Vec<u32>> },
    Mul { a: Var, b: Var, bmap: Option<Vec<u32>> },
    Unary { x: Var, f: Unary },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, dims: MatDims },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, c_out: usize },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    AvgPool2 { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Softmax { x: Var },
    L2Normalize { x: Var, eps: f32 },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f32 },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, rstd: Vec<f32>, batch_stats: bool },
    Mean { x: Var },
}

#[derive(Debug, Clone, Copy)]
struct MatDims {
    m: usize,
    k: usize,
    n: usize,
    a_batch: usize,
    b_batch: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Whether batch normalization uses batch statistics (and updates running
/// statistics) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    mode: Mode,
    grad_enabled: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    inputs: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v.0)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self { store, nodes: Vec::new(), mode, grad_enabled: true, buffer_updates: Vec::new() }
    }

    /// Eval-mode graph that records no gradient bookkeeping.
    pub fn inference(store: &'s ParamStore) -> Self {
        let mut g = Self::new(store, Mode::Eval);
        g.grad_enabled = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Running-statistics updates collected from batch-norm layers in train mode.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input leaf whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.param(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn gather(&mut self, x: Var, map: IndexMap) -> Result<Var> {
        let src_len = self.value(x).len();
        let data = {
            let xs = self.value(x).data();
            map.src
                .iter()
                .map(|&i| {
                    if i == ZERO {
                        Ok(0.0)
                    } else {
                        xs.get(i as usize).copied().ok_or(())
                    }
                })
                .collect::<std::result::Result<Vec<f32>, ()>>()
                .map_err(|_| TensorError::Shape(format!("gather index out of range for {src_len} elements")))?
        };
        let t = Tensor::new(&map.out_shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Gather { x, src: map.src }, ng))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let map = index::permute(self.shape(x), axes)?;
        self.gather(x, map)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let map = index::narrow(self.shape(x), axis, start, len)?;
        self.gather(x, map)
    }

    fn binary_map(&self, a: Var, b: Var) -> Result<Option<Vec<u32>>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(None);
        }
        broadcast_map(sa, sb).map(Some)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bmap = self.binary_map(a, b)?;
        let t = self.zip(a, b, bmap.as_deref(), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b, bmap }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bmap = self.binary_map(a, b)?;
        let t = self.zip(a, b, bmap.as_deref(), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub { a, b, bmap }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bmap = self.binary_map(a, b)?;
        let t = self.zip(a, b, bmap.as_deref(), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b, bmap }, ng))
    }

    fn zip(&self, a: Var, b: Var, bmap: Option<&[u32]>, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f32> = match bmap {
            None => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => ta.data().iter().zip(m).map(|(&x, &j)| f(x, tb.data()[j as usize])).collect(),
        };
        Tensor::new(ta.shape(), data).expect("shape of lhs")
    }

    fn unary(&mut self, x: Var, f: Unary) -> Var {
        let t = {
            let tx = self.value(x);
            let data = tx.data().iter().map(|&v| apply_unary(f, v)).collect();
            Tensor::new(tx.shape(), data).expect("same shape")
        };
        let ng = self.ng(x);
        self.push(t, Op::Unary { x, f }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, Unary::Scale(s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f32) -> Var {
        self.unary(x, Unary::AddScalar(s))
    }

    pub fn clamp_max(&mut self, x: Var, max: f32) -> Var {
        self.unary(x, Unary::ClampMax(max))
    }

    /// Batched matrix product of the two trailing axes. `ta`/`tb` mark operands
    /// stored transposed. Batch axes must match, or one operand must be a plain
    /// matrix shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs matrices, got {sa:?} and {sb:?}"));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return shape_err(format!("matmul inner dims differ: {sa:?} x {sb:?}"));
        }
        let (bat_a, bat_b) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let a_batch: usize = bat_a.iter().product();
        let b_batch: usize = bat_b.iter().product();
        let batch_shape = if bat_a == bat_b || bat_b.is_empty() {
            bat_a.to_vec()
        } else if bat_a.is_empty() {
            bat_b.to_vec()
        } else {
            return shape_err(format!("matmul batch dims differ: {sa:?} x {sb:?}"));
        };
        let batch: usize = batch_shape.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let (xa, xb) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ao = if a_batch == 1 && bat_a.is_empty() { 0 } else { i * m * k };
                let bo = if b_batch == 1 && bat_b.is_empty() { 0 } else { i * k * n };
                gemm(m, k, n, &xa[ao..ao + m * k], ta, &xb[bo..bo + k * n], tb, &mut out[i * m * n..(i + 1) * m * n], 0.0);
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let dims = MatDims {
            m,
            k,
            n,
            a_batch: if bat_a.is_empty() { 0 } else { a_batch },
            b_batch: if bat_b.is_empty() { 0 } else { b_batch },
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, ta, tb, dims }, ng))
    }

    /// `x·W + b` over the last axis, `W` stored `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let y = if sx.len() > 2 {
            // one large product instead of one per leading index
            let rows: usize = sx[..sx.len() - 1].iter().product();
            let flat = self.reshape(x, &[rows, sx[sx.len() - 1]])?;
            let y = self.matmul(flat, w, false, false)?;
            let mut out = sx[..sx.len() - 1].to_vec();
            out.push(self.shape(y)[1]);
            self.reshape(y, &out)?
        } else {
            self.matmul(x, w, false, false)?
        };
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Stride-1 2-D convolution of `[B, Cin, H, W]` with `[Cout, Cin, k, k]`
    /// weights and symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[bn, c_in, h, wd], &[c_out, wc, k, k2]) = (sx.as_slice(), sw.as_slice()) else {
            return shape_err(format!("conv2d needs NCHW input and OIHW weight, got {sx:?}, {sw:?}"));
        };
        if wc != c_in || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
            return shape_err(format!("conv2d weight {sw:?} incompatible with input {sx:?} (pad {pad})"));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return shape_err(format!("conv2d bias must be [{c_out}], got {:?}", self.shape(b)));
            }
        }
        let geom = ConvGeom { c_in, h, w: wd, k, pad };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plane = oh * ow;
        let rows = geom.col_rows();
        let mut out = vec![0.0; bn * c_out * plane];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let direct = k == 1 && pad == 0;
            let mut col = if direct { Vec::new() } else { vec![0.0; rows * plane] };
            for bi in 0..bn {
                let img = &xs[bi * c_in * h * wd..(bi + 1) * c_in * h * wd];
                let cols: &[f32] = if direct {
                    img
                } else {
                    im2col(img, geom, &mut col);
                    &col
                };
                let dst = &mut out[bi * c_out * plane..(bi + 1) * c_out * plane];
                gemm(c_out, rows, plane, ws, false, cols, false, dst, 0.0);
                if let Some(b) = b {
                    let bs = self.value(b).data();
                    for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bs[co]);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let t = Tensor::new(&[bn, c_out, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, c_out }, ng))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[b, c, h, w] = s.as_slice() else {
            return shape_err(format!("max_pool2 needs NCHW, got {s:?}"));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max_pool2 needs even dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        {
            let xs = self.value(x).data();
            for p in 0..b * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = p * h * w + 2 * y * w + 2 * xx;
                        let cands = [base, base + 1, base + w, base + w + 1];
                        let best = cands
                            .into_iter()
                            .reduce(|i, j| if xs[j] > xs[i] { j } else { i })
                            .expect("non-empty");
                        out.push(xs[best]);
                        argmax.push(best as u32);
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[b, c, oh, ow], out)?, Op::MaxPool2 { x, argmax }, ng))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[b, c, h, w] = s.as_slice() else {
            return shape_err(format!("avg_pool2 needs NCHW, got {s:?}"));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("avg_pool2 needs even dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        {
            let xs = self.value(x).data();
            for p in 0..b * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = p * h * w + 2 * y * w + 2 * xx;
                        out.push(0.25 * (xs[base] + xs[base + 1] + xs[base + w] + xs[base + w + 1]));
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&[b, c, oh, ow], out)?, Op::AvgPool2 { x }, ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| TensorError::Shape("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return shape_err(format!("concat shapes differ: {first:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = {
            let tx = self.value(x);
            let d = *tx.shape().last().expect("rank ≥ 1");
            let mut out = tx.data().to_vec();
            for row in out.chunks_mut(d) {
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            Tensor::new(tx.shape(), out).expect("same shape")
        };
        let ng = self.ng(x);
        self.push(t, Op::Softmax { x }, ng)
    }

    /// Divide each last-axis row by its Euclidean norm (floored at `eps`).
    pub fn l2_normalize(&mut self, x: Var, eps: f32) -> Var {
        let t = {
            let tx = self.value(x);
            let d = *tx.shape().last().expect("rank ≥ 1");
            let mut out = tx.data().to_vec();
            for row in out.chunks_mut(d) {
                let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(eps);
                row.iter_mut().for_each(|v| *v /= norm);
            }
            Tensor::new(tx.shape(), out).expect("same shape")
        };
        let ng = self.ng(x);
        self.push(t, Op::L2Normalize { x, eps }, ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let d = *self.shape(x).last().expect("rank ≥ 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!("layer_norm affine params must be [{d}]"));
        }
        let t = {
            let tx = self.value(x);
            let (g, b) = (self.value(gamma).data(), self.value(beta).data());
            let mut out = tx.data().to_vec();
            for row in out.chunks_mut(d) {
                let (mean, rstd) = moments(row, eps);
                for (i, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * rstd * g[i] + b[i];
                }
            }
            Tensor::new(tx.shape(), out)?
        };
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    /// Per-channel batch normalization of `[B, C, H, W]`. In train mode batch
    /// statistics are used and running-statistics updates are queued.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f32,
        momentum: f32,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let &[b, c, h, w] = s.as_slice() else {
            return shape_err(format!("batch_norm needs NCHW, got {s:?}"));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!("batch_norm affine params must be [{c}]"));
        }
        let plane = h * w;
        let count = b * plane;
        let batch_stats = self.mode == Mode::Train;
        let (mean, rstd) = if batch_stats {
            let xs = self.value(x).data();
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for bi in 0..b {
                for ci in 0..c {
                    let p = &xs[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    mean[ci] += p.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for bi in 0..b {
                for ci in 0..c {
                    let p = &xs[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    var[ci] += p.iter().map(|&v| (v as f64 - mean[ci]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let rm = self.store.get(running_mean).data();
            let rv = self.store.get(running_var).data();
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let new_rm: Vec<f32> = (0..c).map(|i| (1.0 - momentum) * rm[i] + momentum * mean[i] as f32).collect();
            let new_rv: Vec<f32> =
                (0..c).map(|i| (1.0 - momentum) * rv[i] + momentum * (var[i] * unbias) as f32).collect();
            self.buffer_updates.push((running_mean, Tensor::new(&[c], new_rm)?));
            self.buffer_updates.push((running_var, Tensor::new(&[c], new_rv)?));
            (
                mean.iter().map(|&m| m as f32).collect::<Vec<_>>(),
                var.iter().map(|&v| 1.0 / (v as f32 + eps).sqrt()).collect::<Vec<_>>(),
            )
        } else {
            let rm = self.store.get(running_mean).data().to_vec();
            let rstd = self.store.get(running_var).data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
            (rm, rstd)
        };
        let t = {
            let xs = self.value(x).data();
            let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
            let mut out = xs.to_vec();
            for bi in 0..b {
                for ci in 0..c {
                    let p = &mut out[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
                    let (scale, shift) = (rstd[ci] * g[ci], bt[ci] - mean[ci] * rstd[ci] * g[ci]);
                    p.iter_mut().for_each(|v| *v = *v * scale + shift);
                }
            }
            Tensor::new(&s, out)?
        };
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, mean, rstd, batch_stats }, ng))
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s: f64 = tx.data().iter().map(|&v| v as f64).sum();
        let m = (s / tx.len().max(1) as f64) as f32;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {
                    out.inputs.insert(i, Tensor::new(node.value.shape(), gy)?);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(t) => t.data_mut().iter_mut().zip(&gy).for_each(|(a, b)| *a += b),
                    None => {
                        out.params.insert(*id, Tensor::new(node.value.shape(), gy)?);
                    }
                },
                op => self.vjp(op, i, gy, &mut grads),
            }
        }
        Ok(out)
    }

    fn vjp(&self, op: &Op, i: usize, gy: Vec<f32>, grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        let mut acc = |v: Var, d: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Reshape(x) => acc(*x, gy),
            Op::Gather { x, src } => {
                let mut d = vec![0.0; len(*x)];
                for (&j, g) in src.iter().zip(&gy) {
                    if j != ZERO {
                        d[j as usize] += g;
                    }
                }
                acc(*x, d);
            }
            Op::Add { a, b, bmap } | Op::Sub { a, b, bmap } => {
                let sign = if matches!(op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.ng(*b) {
                    let d = match bmap {
                        None => gy.iter().map(|g| sign * g).collect(),
                        Some(m) => {
                            let mut d = vec![0.0; len(*b)];
                            for (&j, g) in m.iter().zip(&gy) {
                                d[j as usize] += sign * g;
                            }
                            d
                        }
                    };
                    acc(*b, d);
                }
                acc(*a, gy);
            }
            Op::Mul { a, b, bmap } => {
                let (va, vb) = (val(*a), val(*b));
                if self.ng(*b) {
                    let d = match bmap {
                        None => gy.iter().zip(va).map(|(g, x)| g * x).collect(),
                        Some(m) => {
                            let mut d = vec![0.0; vb.len()];
                            for ((&j, g), x) in m.iter().zip(&gy).zip(va) {
                                d[j as usize] += g * x;
                            }
                            d
                        }
                    };
                    acc(*b, d);
                }
                if self.ng(*a) {
                    let d = match bmap {
                        None => gy.iter().zip(vb).map(|(g, y)| g * y).collect(),
                        Some(m) => gy.iter().zip(m).map(|(g, &j)| g * vb[j as usize]).collect(),
                    };
                    acc(*a, d);
                }
            }
            Op::Unary { x, f } => {
                let (vx, vy) = (val(*x), self.nodes[i].value.data());
                let d = gy
                    .iter()
                    .zip(vx.iter().zip(vy))
                    .map(|(g, (&xv, &yv))| g * unary_grad(*f, xv, yv))
                    .collect();
                acc(*x, d);
            }
            Op::MatMul { a, b, ta, tb, dims } => {
                let MatDims { m, k, n, a_batch, b_batch } = *dims;
                let batch = a_batch.max(b_batch).max(1);
                let (va, vb) = (val(*a), val(*b));
                if self.ng(*a) {
                    let mut d = vec![0.0; len(*a)];
                    for bi in 0..batch {
                        let ao = if a_batch == 0 { 0 } else { bi * m * k };
                        let bo = if b_batch == 0 { 0 } else { bi * k * n };
                        let dc = &gy[bi * m * n..(bi + 1) * m * n];
                        let bmat = &vb[bo..bo + k * n];
                        let da = &mut d[ao..ao + m * k];
                        let beta = if a_batch == 0 && bi > 0 { 1.0 } else { 0.0 };
                        if !ta {
                            gemm(m, n, k, dc, false, bmat, !tb, da, beta);
                        } else {
                            gemm(k, n, m, bmat, *tb, dc, true, da, beta);
                        }
                    }
                    acc(*a, d);
                }
                if self.ng(*b) {
                    let mut d = vec![0.0; len(*b)];
                    for bi in 0..batch {
                        let ao = if a_batch == 0 { 0 } else { bi * m * k };
                        let bo = if b_batch == 0 { 0 } else { bi * k * n };
                        let dc = &gy[bi * m * n..(bi + 1) * m * n];
                        let amat = &va[ao..ao + m * k];
                        let db = &mut d[bo..bo + k * n];
                        let beta = if b_batch == 0 && bi > 0 { 1.0 } else { 0.0 };
                        if !tb {
                            gemm(k, m, n, amat, !ta, dc, false, db, beta);
                        } else {
                            gemm(n, m, k, dc, true, amat, *ta, db, beta);
                        }
                    }
                    acc(*b, d);
                }
            }
            Op::Conv2d { x, w, b, geom, c_out } => {
                let g = *geom;
                let (c_out, plane, rows) = (*c_out, g.out_h() * g.out_w(), g.col_rows());
                let img_len = g.c_in * g.h * g.w;
                let bn = len(*x) / img_len;
                let (vx, vw) = (val(*x), val(*w));
                let direct = g.k == 1 && g.pad == 0;
                let mut col = if direct { Vec::new() } else { vec![0.0; rows * plane] };
                let mut dcol = vec![0.0; rows * plane];
                let mut dx = if self.ng(*x) { vec![0.0; len(*x)] } else { Vec::new() };
                let mut dw = vec![0.0; vw.len()];
                for bi in 0..bn {
                    let dy = &gy[bi * c_out * plane..(bi + 1) * c_out * plane];
                    let img = &vx[bi * img_len..(bi + 1) * img_len];
                    if self.ng(*w) {
                        let cols: &[f32] = if direct {
                            img
                        } else {
                            im2col(img, g, &mut col);
                            &col
                        };
                        gemm(c_out, plane, rows, dy, false, cols, true, &mut dw, 1.0);
                    }
                    if self.ng(*x) {
                        let dimg = &mut dx[bi * img_len..(bi + 1) * img_len];
                        if direct {
                            gemm(rows, c_out, plane, vw, true, dy, false, dimg, 1.0);
                        } else {
                            gemm(rows, c_out, plane, vw, true, dy, false, &mut dcol, 0.0);
                            col2im_add(&dcol, g, dimg);
                        }
                    }
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![0.0; c_out];
                        for chunk in gy.chunks(plane).enumerate() {
                            db[chunk.0 % c_out] += chunk.1.iter().sum::<f32>();
                        }
                        acc(*b, db);
                    }
                }
                acc(*w, dw);
                if self.ng(*x) {
                    acc(*x, dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![0.0; len(*x)];
                for (&j, g) in argmax.iter().zip(&gy) {
                    d[j as usize] += g;
                }
                acc(*x, d);
            }
            Op::AvgPool2 { x } => {
                let s = self.nodes[x.0].value.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; len(*x)];
                for (o, g) in gy.iter().enumerate() {
                    let p = o / (oh * ow);
                    let (y, xx) = ((o % (oh * ow)) / ow, o % ow);
                    let base = p * h * w + 2 * y * w + 2 * xx;
                    for j in [base, base + 1, base + w, base + w + 1] {
                        d[j] += 0.25 * g;
                    }
                }
                acc(*x, d);
            }
            Op::Concat { xs, axis } => {
                let shape = self.nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f32>> = xs.iter().map(|&v| Vec::with_capacity(len(v))).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, &v) in parts.iter_mut().zip(xs) {
                        let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                        p.extend_from_slice(&gy[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (p, &v) in parts.into_iter().zip(xs) {
                    acc(v, p);
                }
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.data();
                let d = *self.nodes[i].value.shape().last().expect("rank ≥ 1");
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(d).zip(y.chunks(d)).zip(gy.chunks(d)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::L2Normalize { x, eps } => {
                let (vx, y) = (val(*x), self.nodes[i].value.data());
                let d = *self.nodes[i].value.shape().last().expect("rank ≥ 1");
                let mut dx = vec![0.0; y.len()];
                for (((dxr, xr), yr), gr) in dx.chunks_mut(d).zip(vx.chunks(d)).zip(y.chunks(d)).zip(gy.chunks(d)) {
                    let norm = xr.iter().map(|v| v * v).sum::<f32>().sqrt();
                    if norm <= *eps {
                        dxr.iter_mut().zip(gr).for_each(|(a, g)| *a = g / eps);
                    } else {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dxr[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = val(*x);
                let g = val(*gamma);
                let d = g.len();
                let mut dx = vec![0.0; vx.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for ((dxr, xr), gr) in dx.chunks_mut(d).zip(vx.chunks(d)).zip(gy.chunks(d)) {
                    let (mean, rstd) = moments(xr, *eps);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * g[j];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f32>() / d as f32;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / d as f32;
                    for j in 0..d {
                        dxr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(*gamma, dg);
                acc(*beta, db);
                acc(*x, dx);
            }
            Op::BatchNorm { x, gamma, beta, mean, rstd, batch_stats } => {
                let s = self.nodes[x.0].value.shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                let vx = val(*x);
                let g = val(*gamma);
                let mut dg = vec![0.0f32; c];
                let mut db = vec![0.0f32; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let o = (bi * c + ci) * plane;
                        for j in o..o + plane {
                            let xh = (vx[j] - mean[ci]) * rstd[ci];
                            dg[ci] += gy[j] * xh;
                            db[ci] += gy[j];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; vx.len()];
                    let count = (b * plane) as f32;
                    for bi in 0..b {
                        for ci in 0..c {
                            let o = (bi * c + ci) * plane;
                            for j in o..o + plane {
                                dx[j] = if *batch_stats {
                                    let xh = (vx[j] - mean[ci]) * rstd[ci];
                                    g[ci] * rstd[ci] * (gy[j] - db[ci] / count - xh * dg[ci] / count)
                                } else {
                                    gy[j] * g[ci] * rstd[ci]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Mean { x } => {
                let n = len(*x);
                acc(*x, vec![gy[0] / n as f32; n]);
            }
        }
    }
}

fn moments(row: &[f32], eps: f32) -> (f32, f32) {
    let d = row.len() as f32;
    let mean = row.iter().sum::<f32>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn apply_unary(f: Unary, x: f32) -> f32 {
    match f {
        Unary::Relu => x.max(0.0),
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Unary::Gelu => gelu(x),
        Unary::Exp => x.exp(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Scale(s) => s * x,
        Unary::AddScalar(s) => x + s,
        Unary::ClampMax(m) => x.min(m),
    }
}

fn unary_grad(f: Unary, x: f32, y: f32) -> f32 {
    match f {
        Unary::Relu => (x > 0.0) as u8 as f32,
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        Unary::Gelu => gelu_grad(x),
        Unary::Exp => y,
        Unary::Sqrt => 0.5 / y,
        Unary::Square => 2.0 * x,
        Unary::Scale(s) => s,
        Unary::AddScalar(_) => 1.0,
        Unary::ClampMax(m) => (x < m) as u8 as f32,
    }
}

/// For each element of `out_shape`, the flat index into a tensor of shape
/// `b_shape` under right-aligned numpy broadcasting.
fn broadcast_map(out_shape: &[usize], b_shape: &[usize]) -> Result<Vec<u32>> {
    if b_shape.len() > out_shape.len() {
        return shape_err(format!("cannot broadcast {b_shape:?} into {out_shape:?}"));
    }
    let offset = out_shape.len() - b_shape.len();
    let b_strides = strides_of(b_shape);
    let mut strides = vec![0usize; out_shape.len()];
    for (j, (&bd, &bs)) in b_shape.iter().zip(&b_strides).enumerate() {
        let od = out_shape[offset + j];
        if bd == od {
            strides[offset + j] = bs;
        } else if bd != 1 {
            return shape_err(format!("cannot broadcast {b_shape:?} into {out_shape:?}"));
        }
    }
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off as u32);
        for d in (0..rank).rev() {
            counter[d] += 1;
            off += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    Ok(map)
}
