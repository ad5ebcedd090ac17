//! Charbonnier-loss optimization with relative early stopping.

use std::collections::HashMap;

use gridsr_tensor::{Adam, AdamConfig, Graph, Mode, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{weighted_sample_stream, Dataset, SampleWeighting};
use crate::error::{Error, Result};
use crate::grid::SplitLabel;
use crate::models::{Checkpoint, EpochRecord, Model, ModelConfig, TilingMode};
use crate::pipeline::{Preparer, Sample};
use crate::tiling;

pub const DEFAULT_EPSILON: f64 = 1e-3;

/// `mean(sqrt((x - y)² + ε²))`.
pub fn charbonnier(pred: &[f64], target: &[f64], epsilon: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("charbonnier on {} vs {} elements", pred.len(), target.len())));
    }
    let e2 = epsilon * epsilon;
    let s: f64 = pred.iter().zip(target).map(|(x, y)| ((x - y) * (x - y) + e2).sqrt()).sum();
    Ok(s / pred.len() as f64)
}

/// Gradient of [`charbonnier`] with respect to `pred`.
pub fn charbonnier_grad(pred: &[f64], target: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("charbonnier on {} vs {} elements", pred.len(), target.len())));
    }
    let n = pred.len() as f64;
    let e2 = epsilon * epsilon;
    Ok(pred.iter().zip(target).map(|(x, y)| (x - y) / ((x - y) * (x - y) + e2).sqrt() / n).collect())
}

/// Graph version of [`charbonnier`].
pub fn charbonnier_loss(g: &mut Graph, pred: Var, target: Var, epsilon: f64) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", g.shape(pred), g.shape(target))));
    }
    let d = g.sub(pred, target)?;
    let d2 = g.square(d);
    let d2 = g.add_scalar(d2, (epsilon * epsilon) as f32);
    let r = g.sqrt(d2);
    Ok(g.mean(r))
}

/// True once the running best has gone `patience` epochs without improving
/// by at least `min_rel` relative to the previous best.
pub fn early_stop(history: &[f64], patience: usize, min_rel: f64) -> bool {
    let Some(&first) = history.first() else { return false };
    let mut best = first;
    let mut last_improvement = 0;
    for (k, &v) in history.iter().enumerate().skip(1) {
        if v <= best * (1.0 - min_rel) {
            best = v;
            last_improvement = k;
        }
    }
    history.len() - 1 - last_improvement >= patience
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Uniform,
    /// Covariate-weighted tile sampling.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub epsilon: f64,
    /// Training samples drawn per epoch; by default every training timestamp
    /// once per tile.
    pub samples_per_epoch: Option<usize>,
    /// Validation timestamps used per evaluation, evenly spaced; all by default.
    pub validation_timesteps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            max_epochs: 50,
            patience: 10,
            min_rel_improvement: 0.01,
            seed: 0,
            sampling: SamplingMode::Uniform,
            epsilon: DEFAULT_EPSILON,
            samples_per_epoch: None,
            validation_timesteps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.min_rel_improvement > 0.0 && self.min_rel_improvement < 1.0) {
            return Err(Error::Config("min_rel_improvement must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    /// Default sampling for an architecture: weighted for tiled models,
    /// uniform otherwise.
    pub fn sampling_for(tiled: bool) -> SamplingMode {
        if tiled {
            SamplingMode::Weighted
        } else {
            SamplingMode::Uniform
        }
    }
}

/// Where each training draw comes from: a timestamp index and, for tiled
/// models, a region.
type Draw = (usize, Option<tiling::TileRegion>);

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 8) | stream);
    rng
}

fn evenly_spaced(idx: &[usize], n: Option<usize>) -> Vec<usize> {
    match n {
        Some(n) if n < idx.len() && n > 0 => (0..n).map(|k| idx[k * idx.len() / n]).collect(),
        _ => idx.to_vec(),
    }
}

struct Run<'a> {
    data: &'a Dataset,
    prep: Preparer,
    tc: TrainConfig,
    train_idx: Vec<usize>,
    val_draws: Vec<Draw>,
    weighting: SampleWeighting,
}

impl<'a> Run<'a> {
    fn new(config: &ModelConfig, mode: TilingMode, data: &'a Dataset, tc: &TrainConfig) -> Result<Self> {
        tc.validate()?;
        let prep = Preparer::for_dataset(config, mode, data)?;
        let tiled = !prep.tiles.is_empty();
        let expected = TrainConfig::sampling_for(tiled);
        if tc.sampling == SamplingMode::Weighted && !tiled {
            return Err(Error::Config("weighted sampling needs a tiled model".into()));
        }
        if tc.sampling != expected {
            warn!("sampling {:?} differs from the usual {:?} for this architecture", tc.sampling, expected);
        }
        let train_idx = data.split_indices(SplitLabel::Train);
        let val_idx = data.split_indices(SplitLabel::Validation);
        if train_idx.is_empty() || val_idx.is_empty() {
            return Err(Error::Config(format!(
                "training needs non-empty train and validation splits (got {} and {})",
                train_idx.len(),
                val_idx.len()
            )));
        }
        let val_draws = evenly_spaced(&val_idx, tc.validation_timesteps)
            .into_iter()
            .flat_map(|t| {
                let regions: Vec<Option<tiling::TileRegion>> =
                    if tiled { prep.tiles.iter().copied().map(Some).collect() } else { vec![None] };
                regions.into_iter().map(move |r| (t, r))
            })
            .collect();
        let weighting = match tc.sampling {
            SamplingMode::Weighted => prep.patch_weights()?,
            SamplingMode::Uniform => SampleWeighting::uniform(prep.tiles.len().max(1)),
        };
        Ok(Self { data, prep, tc: tc.clone(), train_idx, val_draws, weighting })
    }

    fn draws(&self, epoch: usize) -> Result<Vec<Draw>> {
        let tiles = &self.prep.tiles;
        let n = self.tc.samples_per_epoch.unwrap_or(self.train_idx.len() * tiles.len().max(1));
        if tiles.is_empty() {
            let mut rng = epoch_rng(self.tc.seed, epoch, 1);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let mut order = self.train_idx.clone();
                order.shuffle(&mut rng);
                out.extend(order.into_iter().take(n - out.len()).map(|t| (t, None)));
            }
            return Ok(out);
        }
        let times: Vec<_> = self.train_idx.iter().map(|&t| self.data.times[t]).collect();
        let mut stream = weighted_sample_stream(&self.weighting, &times, self.tc.seed ^ ((epoch as u64) << 20))?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (ti, pi) = stream.next_indexed().expect("non-empty train split");
            let tile = tiles[pi];
            let region = if self.prep.mode == TilingMode::Patches {
                let cfg = &self.prep.config.tiling;
                tiling::jittered_patch(&tile, self.prep.config.scale_factor, &self.data.hr_spec, &self.data.lr_spec, cfg, stream.rng_mut())?
            } else {
                tile
            };
            out.push((self.train_idx[ti], Some(region)));
        }
        Ok(out)
    }

    fn samples(&self, draws: &[Draw]) -> Result<Vec<Sample>> {
        let mut cache: HashMap<usize, ndarray::Array2<f64>> = HashMap::new();
        draws
            .iter()
            .map(|(t, r)| {
                let lr = &self.data.lr[*t];
                let base = match cache.get(t) {
                    Some(b) => b,
                    None => {
                        let b = self.prep.baseline(lr)?;
                        cache.entry(*t).or_insert(b)
                    }
                };
                self.prep.sample(lr, base, Some(&self.data.hr[*t]), r.as_ref())
            })
            .collect()
    }

    /// One optimizer pass; returns the mean per-sample loss.
    fn train_epoch(&self, model: &mut Model, adam: &mut Adam, epoch: usize) -> Result<f64> {
        let draws = self.draws(epoch)?;
        let mut total = 0.0;
        let mut count = 0;
        for chunk in draws.chunks(self.tc.batch_size) {
            let samples = self.samples(chunk)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let (batch, target) = self.prep.batch(&refs)?;
            let target = target.expect("training samples carry targets");
            let (loss, grads, updates) = {
                let mut g = Graph::new(&model.store, Mode::Train);
                let y = model.forward(&mut g, &batch)?;
                let t = g.input(target);
                let loss = charbonnier_loss(&mut g, y, t, self.tc.epsilon)?;
                let value = g.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Ok(f64::NAN);
                }
                let grads = g.backward(loss)?.into_params();
                (value, grads, g.take_buffer_updates())
            };
            adam.step(&mut model.store, &grads);
            for (id, v) in updates {
                *model.store.get_mut(id) = v;
            }
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(total / count.max(1) as f64)
    }

    fn validation_loss(&self, model: &Model) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in self.val_draws.chunks(self.tc.batch_size.max(8)) {
            let samples = self.samples(chunk)?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let (batch, target) = self.prep.batch(&refs)?;
            let target = target.expect("validation samples carry targets");
            let pred = model.predict(&batch)?;
            let p: Vec<f64> = pred.data().iter().map(|v| *v as f64).collect();
            let t: Vec<f64> = target.data().iter().map(|v| *v as f64).collect();
            total += charbonnier(&p, &t, self.tc.epsilon)? * p.len() as f64;
            count += p.len();
        }
        Ok(total / count.max(1) as f64)
    }
}

/// Validation loss of a model under a training configuration.
pub fn validation_loss(model: &Model, mode: TilingMode, data: &Dataset, tc: &TrainConfig) -> Result<f64> {
    Run::new(&model.config, mode, data, tc)?.validation_loss(model)
}

/// Trains a freshly initialized model. The returned checkpoint holds the
/// best-validation parameters; on divergence it holds the last good ones
/// and records the failing epoch in `diverged_at`.
pub fn train(config: &ModelConfig, mode: TilingMode, data: &Dataset, tc: &TrainConfig) -> Result<Checkpoint> {
    let model = Model::build(config.clone(), tc.seed)?;
    let mut ck = Checkpoint::from_model(&model, mode, tc.seed, data.fingerprint());
    ck.grids = Some((data.lr_spec, data.hr_spec));
    run(model, ck, data, tc)
}

/// Continues training from a checkpoint, appending to its history.
pub fn resume(checkpoint: Checkpoint, data: &Dataset, tc: &TrainConfig) -> Result<Checkpoint> {
    let model = checkpoint.model()?;
    run(model, checkpoint, data, tc)
}

fn run(mut model: Model, mut ck: Checkpoint, data: &Dataset, tc: &TrainConfig) -> Result<Checkpoint> {
    if !model.is_trainable() {
        return Ok(ck);
    }
    let r = Run::new(&model.config, ck.tiling_mode, data, tc)?;
    let mut adam = Adam::new(AdamConfig { lr: tc.learning_rate as f32, ..AdamConfig::default() });
    let mut losses: Vec<f64> = ck.history.iter().map(|h| h.val_loss).collect();
    let mut best = ck.best_epoch.and_then(|e| ck.history.iter().find(|h| h.epoch == e)).map(|h| h.val_loss);
    let mut best_params = ck.params.clone();
    let start = ck.history.len();
    for epoch in start..start + tc.max_epochs {
        let train_loss = r.train_epoch(&mut model, &mut adam, epoch)?;
        let val_loss = if train_loss.is_finite() { r.validation_loss(&model)? } else { f64::NAN };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            warn!("training diverged at epoch {epoch}");
            ck.diverged_at = Some(epoch);
            ck.params = best_params;
            return Ok(ck);
        }
        info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        ck.history.push(EpochRecord { epoch, train_loss, val_loss });
        losses.push(val_loss);
        if best.is_none_or(|b| val_loss < b) {
            best = Some(val_loss);
            ck.best_epoch = Some(epoch);
            best_params = model.named_values();
        }
        if early_stop(&losses, tc.patience, tc.min_rel_improvement) {
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    ck.params = best_params;
    ck.config.param_count = model.param_count();
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gridsr_tensor::Tensor;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::grid::TimeSplit;
    use crate::models::Architecture;
    use proptest::prelude::*;

    #[test]
    fn charbonnier_hand_cases() {
        assert_eq!(charbonnier(&[0.5], &[0.5], 1e-3).unwrap(), 1e-3);
        assert_eq!(charbonnier(&[3.0], &[1.0], 0.0).unwrap(), 2.0);
        let v = charbonnier(&[0.3], &[0.1], 1e-3).unwrap();
        assert!((v - (0.04f64 + 1e-6).sqrt()).abs() < 1e-12);
        assert!((v - 0.200_002_50).abs() < 1e-8);
        assert!(charbonnier(&[1.0], &[1.0, 2.0], 1e-3).is_err());
    }

    #[test]
    fn early_stop_hand_cases() {
        assert!(!early_stop(&[1.0, 0.9, 0.8], 10, 0.01));
        let mut h = vec![1.0];
        for k in 1..=10 {
            h.push(0.995);
            assert_eq!(early_stop(&h, 10, 0.01), k == 10, "after {k} epochs");
        }
        let decreasing: Vec<f64> = (0..60).map(|k| 0.98f64.powi(k)).collect();
        for n in 1..=decreasing.len() {
            assert!(!early_stop(&decreasing[..n], 10, 0.01));
        }
    }

    #[test]
    fn graph_loss_matches_scalar_version() {
        let store = gridsr_tensor::ParamStore::new();
        let p = [0.3f32, -1.0, 2.0, 0.0];
        let t = [0.1f32, -1.0, 1.5, 0.25];
        let mut g = Graph::new(&store, Mode::Train);
        let pv = g.input_with_grad(Tensor::new(&[4], p.to_vec()).unwrap());
        let tv = g.input(Tensor::new(&[4], t.to_vec()).unwrap());
        let l = charbonnier_loss(&mut g, pv, tv, 1e-3).unwrap();
        let pf: Vec<f64> = p.iter().map(|v| *v as f64).collect();
        let tf: Vec<f64> = t.iter().map(|v| *v as f64).collect();
        assert!((g.value(l).data()[0] as f64 - charbonnier(&pf, &tf, 1e-3).unwrap()).abs() < 1e-6);
        let grads = g.backward(l).unwrap();
        let gp = grads.input(pv).unwrap();
        for (a, b) in gp.data().iter().zip(charbonnier_grad(&pf, &tf, 1e-3).unwrap()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn charbonnier_is_bounded_below_and_monotone(x in -10.0f64..10.0, y in -10.0f64..10.0, extra in 0.0f64..5.0) {
            let eps = 1e-3;
            let l = charbonnier(&[x], &[y], eps).unwrap();
            prop_assert!(l >= eps);
            prop_assert_eq!(l == eps, x == y);
            let farther = charbonnier(&[y + (x - y).signum() * ((x - y).abs() + extra)], &[y], eps).unwrap();
            prop_assert!(farther >= l);
        }

        #[test]
        fn early_stop_depends_only_on_the_prefix(h in proptest::collection::vec(0.1f64..2.0, 1..40), cut in 1usize..40) {
            let n = cut.min(h.len());
            let mut other = h[..n].to_vec();
            other.extend(std::iter::repeat_n(0.0, 5));
            prop_assert_eq!(early_stop(&h[..n], 3, 0.01), early_stop(&other[..n], 3, 0.01));
        }
    }

    fn tiny_data() -> Dataset {
        let cfg = SyntheticConfig {
            hr_spec: crate::grid::GridSpec::new(44.975, -5.975, -0.05, 0.05, 16, 16).unwrap(),
            n_timesteps: 60,
            start: chrono::TimeZone::with_ymd_and_hms(&chrono::Utc, 2015, 12, 1, 0, 0, 0).unwrap(),
            ..SyntheticConfig::default()
        };
        let split = TimeSplit::new((2015, 2015), (2016, 2016), (2017, 2017)).unwrap();
        generate_synthetic(&cfg).unwrap().into_dataset("tas", split)
    }

    #[test]
    fn history_and_reload() {
        let data = tiny_data();
        let c = ModelConfig::desk(Architecture::Deepesd, data.lr_spec.shape(), data.hr_spec.shape());
        let tc = TrainConfig { max_epochs: 5, patience: 100, learning_rate: 1e-3, ..TrainConfig::default() };
        let ck = train(&c, TilingMode::Full, &data, &tc).unwrap();
        assert_eq!(ck.history.len(), 5);
        assert_eq!(ck.history.iter().map(|h| h.epoch).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let best = ck.best_epoch.unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let v = validation_loss(&back.model().unwrap(), TilingMode::Full, &data, &tc).unwrap();
        assert!((v - ck.history[best].val_loss).abs() <= 1e-6);
        let more = resume(back, &data, &TrainConfig { max_epochs: 2, ..tc }).unwrap();
        assert_eq!(more.history.len(), 7);
        assert_eq!(more.history[6].epoch, 6);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = tiny_data();
        let c = ModelConfig::desk(Architecture::Deepesd, data.lr_spec.shape(), data.hr_spec.shape());
        let tc = TrainConfig { max_epochs: 3, learning_rate: 0.0, ..TrainConfig::default() };
        let init = Checkpoint::from_model(&Model::build(c.clone(), tc.seed).unwrap(), TilingMode::Full, 0, "");
        let ck = train(&c, TilingMode::Full, &data, &tc).unwrap();
        assert_eq!(ck.param_hash(), init.param_hash());
        let l0 = ck.history[0].train_loss;
        assert!(ck.history.iter().all(|h| (h.train_loss - l0).abs() < 1e-6 * l0.max(1.0)));
    }

    #[test]
    fn tiled_training_runs_with_weighted_sampling() {
        let cfg = SyntheticConfig { n_timesteps: 30, start: chrono::TimeZone::with_ymd_and_hms(&chrono::Utc, 2015, 12, 10, 0, 0, 0).unwrap(), ..SyntheticConfig::default() };
        let split = TimeSplit::new((2015, 2015), (2016, 2016), (2017, 2017)).unwrap();
        let data = generate_synthetic(&cfg).unwrap().into_dataset("tas", split);
        let c = ModelConfig::desk(Architecture::SwinTile, data.lr_spec.shape(), data.hr_spec.shape());
        for mode in [TilingMode::Tiles, TilingMode::Patches] {
            let tc = TrainConfig {
                max_epochs: 1,
                samples_per_epoch: Some(8),
                validation_timesteps: Some(2),
                batch_size: 4,
                sampling: SamplingMode::Weighted,
                ..TrainConfig::default()
            };
            let ck = train(&c, mode, &data, &tc).unwrap();
            assert_eq!(ck.history.len(), 1);
            assert!(ck.history[0].val_loss.is_finite());
        }
    }

    #[test]
    fn empty_split_is_a_config_error() {
        let data = tiny_data();
        let c = ModelConfig::desk(Architecture::Deepesd, data.lr_spec.shape(), data.hr_spec.shape());
        let mut d = data.clone();
        d.split = TimeSplit::new((2000, 2001), (2015, 2016), (2017, 2017)).unwrap();
        assert!(matches!(train(&c, TilingMode::Full, &d, &TrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_train_configs() {
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { min_rel_improvement: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epsilon: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    /// A single learned gain on bicubic residuals, fitted to twice those
    /// residuals, must find the least-squares gain of 2.
    #[test]
    fn scaling_probe_converges() {
        let data = tiny_data();
        let prep = crate::pipeline::Preparer::new(
            &ModelConfig::desk(Architecture::Unet, data.lr_spec.shape(), data.hr_spec.shape()),
            TilingMode::Full,
            data.lr_spec,
            data.hr_spec,
            None,
        )
        .unwrap();
        let mut x = Vec::new();
        for t in 0..8 {
            let base = prep.baseline(&data.lr[t]).unwrap();
            x.extend((&data.hr[t] - &base).iter().map(|v| *v as f32));
        }
        let n = x.len();
        let y: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
        let mut store = gridsr_tensor::ParamStore::new();
        let a = store.add("gain", Tensor::zeros(&[1]));
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..AdamConfig::default() });
        for step in 0..200 {
            adam.config.lr = 0.05 * (1.0 - step as f32 / 200.0);
            let grads = {
                let mut g = Graph::new(&store, Mode::Train);
                let xv = g.input(Tensor::new(&[n], x.clone()).unwrap());
                let av = g.param(a);
                let pred = g.mul(xv, av).unwrap();
                let tv = g.input(Tensor::new(&[n], y.clone()).unwrap());
                let l = charbonnier_loss(&mut g, pred, tv, 1e-3).unwrap();
                g.backward(l).unwrap().into_params()
            };
            adam.step(&mut store, &grads);
        }
        let gain = store.get(a).data()[0];
        assert!((gain - 2.0).abs() < 0.02, "gain {gain}");
    }
}
