//! Per-sample standardization and the stats-embedding map.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};
use crate::models::bicubic::BicubicPlan;

/// Lower bound on the standard deviation used when dividing.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Which field the per-sample statistics are taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    /// Mean and std of the raw LR input.
    LrRaw,
    /// Mean and std of the bicubic upsample of the LR input over the HR target.
    #[default]
    LrBicubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub mu: f64,
    pub sigma: f64,
    pub variant: NormVariant,
}

impl InstanceStats {
    /// Mean and population standard deviation of `values`.
    pub fn of<'a>(values: impl IntoIterator<Item = &'a f64>, variant: NormVariant) -> Self {
        let v: Vec<f64> = values.into_iter().copied().collect();
        let n = v.len().max(1) as f64;
        let mu = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
        Self { mu, sigma: var.sqrt(), variant }
    }

    /// Divisor used by [`normalize`].
    pub fn scale(&self) -> f64 {
        self.sigma.max(SIGMA_FLOOR)
    }
}

/// Statistics of an LR patch. For [`NormVariant::LrBicubic`] the patch is
/// first interpolated onto `target`, the HR footprint being predicted.
pub fn instance_stats(lr_patch: &Field, variant: NormVariant, target: &GridSpec) -> Result<InstanceStats> {
    if lr_patch.values.is_empty() {
        return Err(Error::Shape("empty patch".into()));
    }
    Ok(match variant {
        NormVariant::LrRaw => InstanceStats::of(lr_patch.values.iter(), variant),
        NormVariant::LrBicubic => {
            let up = BicubicPlan::new(&lr_patch.spec, target)?.apply(&lr_patch.values)?;
            InstanceStats::of(up.iter(), variant)
        }
    })
}

pub fn normalize_array(x: &Array2<f64>, stats: &InstanceStats) -> Array2<f64> {
    let s = stats.scale();
    x.mapv(|v| (v - stats.mu) / s)
}

pub fn denormalize_array(z: &Array2<f64>, stats: &InstanceStats) -> Array2<f64> {
    let s = stats.scale();
    z.mapv(|v| v * s + stats.mu)
}

pub fn normalize(x: &Field, stats: &InstanceStats) -> Field {
    Field { spec: x.spec, time: x.time, values: normalize_array(&x.values, stats) }
}

pub fn denormalize(z: &Field, stats: &InstanceStats) -> Field {
    Field { spec: z.spec, time: z.time, values: denormalize_array(&z.values, stats) }
}

/// Affine map from `(mu, sigma)` to one channel of `target_shape`:
/// `out[p] = weight[p, 0]·mu + weight[p, 1]·sigma + bias[p]`.
pub fn embed_stats(stats: (f64, f64), target_shape: &[usize], weight: &Array2<f64>, bias: &Array1<f64>) -> Result<ArrayD<f64>> {
    let n: usize = target_shape.iter().product();
    if weight.dim() != (n, 2) || bias.len() != n {
        return Err(Error::Config(format!(
            "stats embedding of shape {:?}/{} does not produce {target_shape:?}",
            weight.dim(),
            bias.len()
        )));
    }
    let flat: Vec<f64> = (0..n).map(|p| weight[[p, 0]] * stats.0 + weight[[p, 1]] * stats.1 + bias[p]).collect();
    ArrayD::from_shape_vec(IxDyn(target_shape), flat).map_err(|e| Error::Shape(e.to_string()))
}

/// Fixed affine rescaling of `(mu, sigma)` in Kelvin to order-one inputs for
/// the learned embedding.
pub fn stats_features(stats: &InstanceStats) -> [f32; 2] {
    [((stats.mu - 273.15) / 20.0) as f32, (stats.sigma / 5.0) as f32]
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use ndarray::array;

    fn field(values: Array2<f64>) -> Field {
        let (h, w) = values.dim();
        let spec = GridSpec::new(10.0, 0.0, -1.0, 1.0, h, w).unwrap();
        Field::new(spec, Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(), values).unwrap()
    }

    #[test]
    fn constant_patch() {
        let f = field(Array2::from_elem((4, 4), 280.0));
        let target = GridSpec::new(10.375, -0.375, -0.25, 0.25, 16, 16).unwrap();
        for v in [NormVariant::LrRaw, NormVariant::LrBicubic] {
            let s = instance_stats(&f, v, &target).unwrap();
            assert_eq!((s.mu, s.sigma), (280.0, 0.0));
            let z = normalize(&f, &s);
            assert!(z.values.iter().all(|x| *x == 0.0));
            assert!(denormalize(&z, &s).values.iter().all(|x| *x == 280.0));
        }
    }

    #[test]
    fn two_values_population_std() {
        let f = field(array![[279.0, 281.0]]);
        let s = instance_stats(&f, NormVariant::LrRaw, &f.spec).unwrap();
        assert_eq!((s.mu, s.sigma), (280.0, 1.0));
    }

    #[test]
    fn embedding_hand_cases() {
        let w = Array2::zeros((4, 2));
        let b = Array1::zeros(4);
        assert!(embed_stats((280.0, 3.0), &[1, 2, 2], &w, &b).unwrap().iter().all(|v| *v == 0.0));
        let w = Array2::from_shape_fn((4, 2), |(_, k)| if k == 0 { 1.0 } else { 0.0 });
        let out = embed_stats((280.0, 3.0), &[1, 2, 2], &w, &b).unwrap();
        assert!(out.iter().all(|v| *v == 280.0));
        let w = Array2::zeros((169, 2));
        let b = Array1::zeros(169);
        assert_eq!(embed_stats((1.0, 1.0), &[1, 13, 13], &w, &b).unwrap().len(), 169);
        assert!(matches!(embed_stats((1.0, 1.0), &[1, 12, 13], &w, &b), Err(Error::Config(_))));
    }
}
