//! Parameterized layers. Each layer only holds parameter ids; values live in a
//! [`ParamStore`] and forward passes run on a [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{init_uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(&[inp, out], inp, rng));
        let bias = store.add(format!("{name}.bias"), init_uniform(&[out], inp, rng));
        Self { weight, bias, in_features: inp, out_features: out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        zero_param(store, self.weight);
        zero_param(store, self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv2d {
    /// Square kernel `k` with "same" padding for odd `k`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k;
        let weight = store.add(format!("{name}.weight"), init_uniform(&[c_out, c_in, k, k], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), init_uniform(&[c_out], fan_in, rng));
        Self { weight, bias, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.pad)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        zero_param(store, self.weight);
        zero_param(store, self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.batch_norm(x, gm, bt, self.running_mean, self.running_var, self.eps, self.momentum)
    }
}

pub fn zero_param(store: &mut ParamStore, id: ParamId) {
    store.get_mut(id).data_mut().fill(0.0);
}
