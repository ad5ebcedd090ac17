//! Turns LR/HR arrays into normalized network samples and network outputs
//! back into fields. Training and inference share this path, so the
//! prediction is always `bicubic + sigma · residual`.

use chrono::{DateTime, Utc};
use gridsr_tensor::Tensor;
use ndarray::{s, Array2};

use crate::data::{compute_patch_weights, patch_sigmas, Dataset, SampleWeighting};
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, StaticCovariates};
use crate::models::{Batch, BicubicPlan, Model, ModelConfig, TilingMode};
use crate::normalization::{stats_features, InstanceStats, NormVariant};
use crate::tiling::{self, StitchMode, TileRegion};

/// Orography is fed to networks in kilometres.
const OROGRAPHY_SCALE: f64 = 1e-3;

/// One normalized sample, flattened for batching.
#[derive(Debug, Clone)]
pub struct Sample {
    pub region: Option<TileRegion>,
    pub stats: InstanceStats,
    /// Bicubic baseline over the output footprint, in physical units.
    pub base: Array2<f64>,
    lr: Vec<f32>,
    base_z: Vec<f32>,
    lr_cov: Option<Vec<f32>>,
    hr_cov: Option<Vec<f32>>,
    lr_crop: (usize, usize),
    cov_offset: (usize, usize),
    /// Normalized residual target, when the HR truth is known.
    pub target: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
struct Covariates {
    lr: [Array2<f64>; 2],
    hr: [Array2<f64>; 2],
}

impl Covariates {
    fn from_static(c: &StaticCovariates) -> Self {
        let scale = |a: &Array2<f64>| a.mapv(|v| v * OROGRAPHY_SCALE);
        Self {
            lr: [scale(&c.lr_orography.values), c.lr_landsea.values.clone()],
            hr: [scale(&c.hr_orography.values), c.hr_landsea.values.clone()],
        }
    }
}

fn to_f32(a: impl IntoIterator<Item = f64>) -> Vec<f32> {
    a.into_iter().map(|v| v as f32).collect()
}

/// Sample preparation for one model configuration on one pair of grids.
#[derive(Debug, Clone)]
pub struct Preparer {
    pub config: ModelConfig,
    pub mode: TilingMode,
    pub lr_spec: GridSpec,
    pub hr_spec: GridSpec,
    plan: BicubicPlan,
    covariates: Option<Covariates>,
    /// Disjoint tile grid (tiled modes only).
    pub tiles: Vec<TileRegion>,
    static_covariates: Option<StaticCovariates>,
}

impl Preparer {
    pub fn new(
        config: &ModelConfig,
        mode: TilingMode,
        lr_spec: GridSpec,
        hr_spec: GridSpec,
        covariates: Option<&StaticCovariates>,
    ) -> Result<Self> {
        let tiled = config.architecture.is_tiled();
        if tiled == (mode == TilingMode::Full) {
            return Err(Error::Config(format!("architecture {} cannot run in {mode:?} mode", config.architecture)));
        }
        if tiled && covariates.is_none() {
            return Err(Error::Config("tiled models need static covariates".into()));
        }
        if !tiled && (config.lr_shape != lr_spec.shape() || config.hr_shape != hr_spec.shape()) {
            return Err(Error::Shape(format!(
                "model maps {:?} -> {:?} but the data grids are {:?} -> {:?}",
                config.lr_shape,
                config.hr_shape,
                lr_spec.shape(),
                hr_spec.shape()
            )));
        }
        let plan = BicubicPlan::new(&lr_spec, &hr_spec)?;
        let tiles = if tiled { tiling::make_tile_grid(&hr_spec, &lr_spec, &config.tiling)? } else { Vec::new() };
        Ok(Self {
            config: config.clone(),
            mode,
            lr_spec,
            hr_spec,
            plan,
            covariates: covariates.map(Covariates::from_static),
            tiles,
            static_covariates: covariates.cloned(),
        })
    }

    pub fn for_dataset(config: &ModelConfig, mode: TilingMode, data: &Dataset) -> Result<Self> {
        Self::new(config, mode, data.lr_spec, data.hr_spec, data.covariates.as_ref())
    }

    /// Sampling distribution over [`Preparer::tiles`]: covariate-weighted
    /// for tiled modes, a single uniform entry for full-domain models.
    pub fn patch_weights(&self) -> Result<SampleWeighting> {
        match &self.static_covariates {
            Some(c) if !self.tiles.is_empty() => {
                let windows: Vec<_> = self.tiles.iter().map(|t| (t.hr_row0, t.hr_col0, t.hr_size)).collect();
                compute_patch_weights(&patch_sigmas(c, &windows))
            }
            _ => Ok(SampleWeighting::uniform(1)),
        }
    }

    /// Full-field bicubic baseline on the HR grid.
    pub fn baseline(&self, lr: &Array2<f64>) -> Result<Array2<f64>> {
        self.plan.apply(lr)
    }

    /// Prepares one sample. `base` is the full-field baseline of `lr`;
    /// `region` selects a tile in tiled modes.
    pub fn sample(&self, lr: &Array2<f64>, base: &Array2<f64>, hr: Option<&Array2<f64>>, region: Option<&TileRegion>) -> Result<Sample> {
        let (lr_in, base_fp, hr_fp) = match region {
            None => (lr.clone(), base.clone(), hr.cloned()),
            Some(t) => {
                let hs = s![t.hr_row0..t.hr_row0 + t.hr_size, t.hr_col0..t.hr_col0 + t.hr_size];
                let ls = s![t.lr_row0..t.lr_row0 + t.lr_size, t.lr_col0..t.lr_col0 + t.lr_size];
                (lr.slice(ls).to_owned(), base.slice(hs).to_owned(), hr.map(|h| h.slice(hs).to_owned()))
            }
        };
        let variant = self.config.norm_variant;
        let stats = match variant {
            NormVariant::LrRaw => InstanceStats::of(lr_in.iter(), variant),
            NormVariant::LrBicubic => InstanceStats::of(base_fp.iter(), variant),
        };
        let (mu, sc) = (stats.mu, stats.scale());
        let z = |v: f64| (v - mu) / sc;
        let target = hr_fp.as_ref().map(|h| to_f32(h.iter().zip(base_fp.iter()).map(|(h, b)| (h - b) / sc)));
        let mut sample = Sample {
            region: region.copied(),
            stats,
            lr: to_f32(lr_in.iter().map(|v| z(*v))),
            base_z: to_f32(base_fp.iter().map(|v| z(*v))),
            base: base_fp,
            lr_cov: None,
            hr_cov: None,
            lr_crop: (0, 0),
            cov_offset: (0, 0),
            target,
        };
        if let (Some(t), Some(cov)) = (region, &self.covariates) {
            let ls = s![t.lr_row0..t.lr_row0 + t.lr_size, t.lr_col0..t.lr_col0 + t.lr_size];
            sample.lr_cov = Some(to_f32(cov.lr.iter().flat_map(|a| a.slice(ls).to_owned())));
            sample.hr_cov = Some(to_f32(
                cov.hr
                    .iter()
                    .flat_map(|a| tiling::window_replicated(a, t.hr_cov_row0, t.hr_cov_col0, t.hr_cov_size)),
            ));
            sample.lr_crop = self.lr_crop(t);
            sample.cov_offset = t.cov_offset();
        }
        Ok(sample)
    }

    /// Origin of the processor crop inside the LR window: the crop is
    /// centered on the tile's geographic center as far as the window allows.
    pub fn lr_crop(&self, t: &TileRegion) -> (usize, usize) {
        let (ch, cw) = self.config.crop_shape();
        let c = (t.hr_size as f64 - 1.0) / 2.0;
        let (lat, lon) = (self.hr_spec.lat(0) + (t.hr_row0 as f64 + c) * self.hr_spec.dlat, self.hr_spec.lon(0) + (t.hr_col0 as f64 + c) * self.hr_spec.dlon);
        let (fi, fj) = self.lr_spec.fractional_index(lat, lon);
        let place = |f: f64, crop: usize, row0: usize| {
            let start = (f - (crop as f64 - 1.0) / 2.0).round() - row0 as f64;
            start.clamp(0.0, (t.lr_size - crop) as f64) as usize
        };
        (place(fi, ch, t.lr_row0), place(fj, cw, t.lr_col0))
    }

    /// Stacks samples into a network batch and, when every sample has one,
    /// the residual target `[B, 1, H, W]`.
    pub fn batch(&self, samples: &[&Sample]) -> Result<(Batch, Option<Tensor>)> {
        let b = samples.len();
        let (lh, lw) = self.config.lr_shape;
        let (h, w) = self.config.hr_shape;
        let cat = |f: &dyn Fn(&Sample) -> &[f32]| samples.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<f32>>();
        let lr = Tensor::new(&[b, 1, lh, lw], cat(&|s| &s.lr))?;
        let base = Tensor::new(&[b, 1, h, w], cat(&|s| &s.base_z))?;
        let stats = Tensor::new(&[b, 2], samples.iter().flat_map(|s| stats_features(&s.stats)).collect())?;
        let tiled = samples.iter().all(|s| s.lr_cov.is_some());
        let (lr_covariates, hr_covariates, lr_crop, cov_offset) = if tiled && b > 0 {
            let n = self.config.tiling.cov_size;
            (
                Some(Tensor::new(&[b, 2, lh, lw], cat(&|s| s.lr_cov.as_deref().unwrap_or(&[])))?),
                Some(Tensor::new(&[b, 2, n, n], cat(&|s| s.hr_cov.as_deref().unwrap_or(&[])))?),
                Some(samples.iter().map(|s| s.lr_crop).collect()),
                Some(samples.iter().map(|s| s.cov_offset).collect()),
            )
        } else {
            (None, None, None, None)
        };
        let target = if samples.iter().all(|s| s.target.is_some()) {
            Some(Tensor::new(&[b, 1, h, w], cat(&|s| s.target.as_deref().unwrap_or(&[])))?)
        } else {
            None
        };
        Ok((Batch { lr, base, stats, lr_covariates, hr_covariates, lr_crop, cov_offset }, target))
    }

    /// Regions covering the domain at inference.
    pub fn inference_regions(&self) -> Result<Vec<Option<TileRegion>>> {
        Ok(match self.mode {
            TilingMode::Full => vec![None],
            TilingMode::Tiles => self.tiles.iter().copied().map(Some).collect(),
            TilingMode::Patches => {
                let cfg = &self.config.tiling;
                tiling::overlapping_grid(&self.hr_spec, &self.lr_spec, cfg, (cfg.tile_size / 2).max(1))?
                    .into_iter()
                    .map(Some)
                    .collect()
            }
        })
    }

    /// Downscales each `(time, lr)` pair, running the network on at most
    /// `batch_size` samples at a time.
    pub fn downscale(&self, model: &Model, inputs: &[(DateTime<Utc>, &Array2<f64>)], batch_size: usize) -> Result<Vec<Field>> {
        let regions = self.inference_regions()?;
        let mut out = Vec::with_capacity(inputs.len());
        let mut pending: Vec<(usize, Sample)> = Vec::new();
        let mut preds: Vec<Vec<(Option<TileRegion>, Array2<f64>)>> = vec![Vec::new(); inputs.len()];
        let flush = |pending: &mut Vec<(usize, Sample)>, preds: &mut Vec<Vec<(Option<TileRegion>, Array2<f64>)>>| -> Result<()> {
            if pending.is_empty() {
                return Ok(());
            }
            let refs: Vec<&Sample> = pending.iter().map(|(_, s)| s).collect();
            let (batch, _) = self.batch(&refs)?;
            let res = model.predict(&batch)?;
            let (h, w) = self.config.hr_shape;
            for (k, (t, s)) in pending.drain(..).enumerate() {
                let r = &res.data()[k * h * w..(k + 1) * h * w];
                let sc = s.stats.scale();
                let p = Array2::from_shape_fn((h, w), |(i, j)| s.base[[i, j]] + sc * r[i * w + j] as f64);
                preds[t].push((s.region, p));
            }
            Ok(())
        };
        for (t, (_, lr)) in inputs.iter().enumerate() {
            let base = self.baseline(lr)?;
            for r in &regions {
                pending.push((t, self.sample(lr, &base, None, r.as_ref())?));
                if pending.len() >= batch_size.max(1) {
                    flush(&mut pending, &mut preds)?;
                }
            }
        }
        flush(&mut pending, &mut preds)?;
        for ((time, _), p) in inputs.iter().zip(preds) {
            let field = match self.mode {
                TilingMode::Full => {
                    let (_, values) = p.into_iter().next().ok_or_else(|| Error::Shape("no prediction".into()))?;
                    Field::new(self.hr_spec, *time, values)?
                }
                mode => {
                    let tiles: Vec<(TileRegion, Array2<f64>)> =
                        p.into_iter().map(|(r, a)| (r.expect("tiled modes always carry regions"), a)).collect();
                    let stitch = if mode == TilingMode::Tiles { StitchMode::Disjoint } else { StitchMode::Blend };
                    tiling::stitch(&tiles, &self.hr_spec, stitch, *time)?
                }
            };
            out.push(field);
        }
        Ok(out)
    }
}
