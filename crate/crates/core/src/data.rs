//! Paired LR/HR datasets: NetCDF ingestion, the synthetic generator, patch
//! weighting by covariate variability, and the weighted sample stream.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, TimeZone, Utc};
use ndarray::{Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{assign_split, check_three_hourly, Field, GridSpec, SplitLabel, StaticCovariates, TimeSplit};
use crate::netcdf::{number_attr, text_attr, AttrValue, NcFile, NcWriter};

/// Floor applied to raw patch weights before renormalization.
pub const WEIGHT_FLOOR: f64 = 1e-6;

pub const OROGRAPHY_VAR: &str = "orography";
pub const LANDSEA_VAR: &str = "lsm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub lr_path: PathBuf,
    pub hr_path: PathBuf,
    pub variable: String,
    pub lr_covariates: Option<PathBuf>,
    pub hr_covariates: Option<PathBuf>,
    /// Inclusive time window applied to both series.
    #[serde(default)]
    pub time_range: Option<(DateTime<Utc>, DateTime<Utc>)>,
    #[serde(default)]
    pub split: TimeSplit,
}

impl DatasetManifest {
    /// Manifest for the file layout written by [`write_dataset`].
    pub fn for_directory(dir: &Path, variable: &str, split: TimeSplit) -> Self {
        Self {
            lr_path: dir.join("lr.nc"),
            hr_path: dir.join("hr.nc"),
            variable: variable.into(),
            lr_covariates: Some(dir.join("lr_covariates.nc")),
            hr_covariates: Some(dir.join("hr_covariates.nc")),
            time_range: None,
            split,
        }
    }
}

/// Time-aligned LR/HR series on fixed grids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub lr_spec: GridSpec,
    pub hr_spec: GridSpec,
    pub variable: String,
    pub times: Vec<DateTime<Utc>>,
    pub lr: Vec<Array2<f64>>,
    pub hr: Vec<Array2<f64>>,
    pub covariates: Option<StaticCovariates>,
    pub split: TimeSplit,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn lr_field(&self, k: usize) -> Field {
        Field { spec: self.lr_spec, time: self.times[k], values: self.lr[k].clone() }
    }

    pub fn hr_field(&self, k: usize) -> Field {
        Field { spec: self.hr_spec, time: self.times[k], values: self.hr[k].clone() }
    }

    /// Chronological `(lr, hr)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (Field, Field)> + '_ {
        (0..self.len()).map(|k| (self.lr_field(k), self.hr_field(k)))
    }

    /// Indices of timesteps in one split; timesteps outside every range are skipped.
    pub fn split_indices(&self, label: SplitLabel) -> Vec<usize> {
        (0..self.len()).filter(|&k| assign_split(self.times[k], &self.split).ok() == Some(label)).collect()
    }

    pub fn covariates(&self) -> Result<&StaticCovariates> {
        self.covariates.as_ref().ok_or_else(|| Error::Config("dataset has no static covariates".into()))
    }

    /// SHA-256 over grids, timestamps and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(self.lr_spec, self.hr_spec, &self.variable)).unwrap_or_default());
        for (k, t) in self.times.iter().enumerate() {
            h.update(t.timestamp().to_le_bytes());
            for x in self.lr[k].iter().chain(self.hr[k].iter()) {
                h.update(x.to_le_bytes());
            }
        }
        if let Some(c) = &self.covariates {
            for f in [&c.lr_orography, &c.lr_landsea, &c.hr_orography, &c.hr_landsea] {
                for x in f.values.iter() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Regular grid from CF coordinate vectors.
pub fn spec_from_coords(lat: &[f64], lon: &[f64]) -> Result<GridSpec> {
    let step = |v: &[f64], name: &str| -> Result<f64> {
        if v.len() < 2 {
            return Err(Error::Ingestion(format!("coordinate `{name}` needs at least two points")));
        }
        let d = v[1] - v[0];
        let regular = v.windows(2).all(|w| ((w[1] - w[0]) - d).abs() <= 1e-4 * d.abs());
        if !regular || d == 0.0 {
            return Err(Error::Ingestion(format!("coordinate `{name}` is not regularly spaced")));
        }
        Ok(d)
    };
    GridSpec::new(lat[0], lon[0], step(lat, "latitude")?, step(lon, "longitude")?, lat.len(), lon.len())
}

/// A `(time, latitude, longitude)` series sorted by time.
#[derive(Debug, Clone)]
pub struct Series {
    pub spec: GridSpec,
    pub times: Vec<DateTime<Utc>>,
    pub values: Vec<Array2<f64>>,
}

pub fn read_series(path: &Path, variable: &str) -> Result<Series> {
    let f = NcFile::open(path)?;
    let (_, lat) = f.read("latitude")?;
    let (_, lon) = f.read("longitude")?;
    let spec = spec_from_coords(&lat, &lon)?;
    let times = f.read_times("time")?;
    let var = f.variable(variable).ok_or_else(|| Error::NetCdf {
        path: path.to_path_buf(),
        msg: format!("variable `{variable}` not found"),
    })?;
    let dim_names: Vec<&str> = var.dim_ids.iter().map(|&d| f.dims[d].name.as_str()).collect();
    if dim_names != ["time", "latitude", "longitude"] {
        return Err(Error::Ingestion(format!(
            "{}: `{variable}` must have dimensions (time, latitude, longitude), found {dim_names:?}",
            path.display()
        )));
    }
    let (shape, data) = f.read(variable)?;
    let (nt, ny, nx) = (shape[0], shape[1], shape[2]);
    if nt != times.len() || (ny, nx) != spec.shape() {
        return Err(Error::Ingestion(format!("{}: `{variable}` shape {shape:?} disagrees with coordinates", path.display())));
    }
    let mut values = Vec::with_capacity(nt);
    for (k, chunk) in data.chunks_exact(ny * nx).enumerate() {
        check_three_hourly(times[k])?;
        if let Some(p) = chunk.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { variable: variable.into(), time: times[k], i: p / nx, j: p % nx });
        }
        values.push(Array2::from_shape_vec((ny, nx), chunk.to_vec()).expect("chunk size"));
    }
    let mut order: Vec<usize> = (0..nt).collect();
    order.sort_by_key(|&k| times[k]);
    if order.windows(2).any(|w| times[w[0]] == times[w[1]]) {
        return Err(Error::Ingestion(format!("{}: duplicate timestamps", path.display())));
    }
    let times = order.iter().map(|&k| times[k]).collect();
    let mut slots: Vec<Option<Array2<f64>>> = values.into_iter().map(Some).collect();
    let values = order.iter().map(|&k| slots[k].take().expect("each index once")).collect();
    Ok(Series { spec, times, values })
}

/// Reads the orography and land-sea fields of a covariate file.
pub fn read_covariate_pair(path: &Path) -> Result<(Field, Field)> {
    let f = NcFile::open(path)?;
    let (_, lat) = f.read("latitude")?;
    let (_, lon) = f.read("longitude")?;
    let spec = spec_from_coords(&lat, &lon)?;
    let epoch = Utc.timestamp_opt(0, 0).single().expect("epoch");
    let load = |name: &str| -> Result<Field> {
        let (shape, data) = f.read(name)?;
        if shape != [spec.n_lat, spec.n_lon] {
            return Err(Error::Ingestion(format!("{}: `{name}` shape {shape:?} disagrees with coordinates", path.display())));
        }
        if let Some(p) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { variable: name.into(), time: epoch, i: p / spec.n_lon, j: p % spec.n_lon });
        }
        Field::new(spec, epoch, Array2::from_shape_vec(spec.shape(), data).expect("shape checked"))
    };
    Ok((load(OROGRAPHY_VAR)?, load(LANDSEA_VAR)?))
}

/// Loads and time-aligns the LR and HR series of a manifest.
///
/// Timestamps are compared over the overlap of the two series' time spans
/// (further restricted by `time_range`); any timestamp inside that window
/// present on one side only is an alignment error. Disjoint spans give an
/// empty dataset.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    for p in [&manifest.lr_path, &manifest.hr_path] {
        if !p.exists() {
            return Err(Error::Config(format!("input file {} does not exist", p.display())));
        }
    }
    let lr = read_series(&manifest.lr_path, &manifest.variable)?;
    let hr = read_series(&manifest.hr_path, &manifest.variable)?;
    if !hr.spec.is_refinement_of(&lr.spec) {
        return Err(Error::Config("HR grid does not refine the LR grid".into()));
    }
    let mut lo = lr.times.first().copied().max(hr.times.first().copied());
    let mut hi = match (lr.times.last(), hr.times.last()) {
        (Some(a), Some(b)) => Some(*a.min(b)),
        _ => None,
    };
    if let Some((a, b)) = manifest.time_range {
        lo = lo.map(|l| l.max(a));
        hi = hi.map(|h| h.min(b));
    }
    let inside = |t: &DateTime<Utc>| matches!((lo, hi), (Some(l), Some(h)) if l <= *t && *t <= h);
    let lr_set: BTreeSet<_> = lr.times.iter().copied().filter(inside).collect();
    let hr_set: BTreeSet<_> = hr.times.iter().copied().filter(inside).collect();
    let gaps: Vec<_> = lr_set.symmetric_difference(&hr_set).copied().collect();
    if !gaps.is_empty() {
        return Err(Error::Alignment { gaps });
    }
    let pick = |s: Series| -> (Vec<DateTime<Utc>>, Vec<Array2<f64>>) {
        s.times.into_iter().zip(s.values).filter(|(t, _)| inside(t)).unzip()
    };
    let lr_spec = lr.spec;
    let hr_spec = hr.spec;
    let (times, lr_values) = pick(lr);
    let (_, hr_values) = pick(hr);

    let covariates = match (&manifest.lr_covariates, &manifest.hr_covariates) {
        (Some(lp), Some(hp)) => {
            let (lo_f, ls_f) = read_covariate_pair(lp)?;
            let (ho_f, hs_f) = read_covariate_pair(hp)?;
            if lo_f.spec.shape() != lr_spec.shape() || ho_f.spec.shape() != hr_spec.shape() {
                return Err(Error::Config("covariate grids do not match the series grids".into()));
            }
            Some(StaticCovariates::new(lo_f, ls_f, ho_f, hs_f)?)
        }
        (None, None) => None,
        _ => return Err(Error::Config("covariates must be given at both resolutions".into())),
    };
    Ok(Dataset {
        lr_spec,
        hr_spec,
        variable: manifest.variable.clone(),
        times,
        lr: lr_values,
        hr: hr_values,
        covariates,
        split: manifest.split,
    })
}

pub(crate) fn write_coords(w: &mut NcWriter, spec: &GridSpec) -> Result<(usize, usize)> {
    let y = w.add_dim("latitude", spec.n_lat);
    let x = w.add_dim("longitude", spec.n_lon);
    w.add_var_f64("latitude", &[y], (0..spec.n_lat).map(|i| spec.lat(i)).collect(), vec![text_attr("units", "degrees_north")])?;
    w.add_var_f64("longitude", &[x], (0..spec.n_lon).map(|j| spec.lon(j)).collect(), vec![text_attr("units", "degrees_east")])?;
    Ok((y, x))
}

/// Writes a `(time, latitude, longitude)` series in the ingestion layout.
pub fn write_series(path: &Path, variable: &str, spec: &GridSpec, times: &[DateTime<Utc>], values: &[Array2<f64>]) -> Result<()> {
    let mut w = NcWriter::new();
    w.add_global_attr("Conventions", AttrValue::Text("CF-1.8".into()));
    let t = w.add_dim("time", times.len());
    let (y, x) = write_coords(&mut w, spec)?;
    let hours = times.iter().map(|t| t.timestamp() as f64 / 3600.0).collect();
    w.add_var_f64("time", &[t], hours, vec![text_attr("units", "hours since 1970-01-01 00:00:00"), text_attr("calendar", "gregorian")])?;
    let mut data = Vec::with_capacity(times.len() * spec.n_lat * spec.n_lon);
    for v in values {
        if v.dim() != spec.shape() {
            return Err(Error::Shape(format!("series value shape {:?} vs grid {:?}", v.dim(), spec.shape())));
        }
        data.extend(v.iter().map(|&x| x as f32));
    }
    w.add_var_f32(variable, &[t, y, x], data, vec![text_attr("units", "K"), number_attr("_FillValue", f32::MAX as f64)])?;
    w.write(path)
}

pub fn write_covariates(path: &Path, orography: &Field, landsea: &Field) -> Result<()> {
    let mut w = NcWriter::new();
    let (y, x) = write_coords(&mut w, &orography.spec)?;
    w.add_var_f64(OROGRAPHY_VAR, &[y, x], orography.values.iter().copied().collect(), vec![text_attr("units", "m")])?;
    w.add_var_f64(LANDSEA_VAR, &[y, x], landsea.values.iter().copied().collect(), vec![text_attr("units", "1")])?;
    w.write(path)
}

/// Writes a synthetic dataset as `lr.nc`, `hr.nc` and the two covariate files.
pub fn write_dataset(dir: &Path, variable: &str, data: &SyntheticData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_series(&dir.join("lr.nc"), variable, &data.lr_spec, &data.times, &data.lr)?;
    write_series(&dir.join("hr.nc"), variable, &data.hr_spec, &data.times, &data.hr)?;
    let c = &data.covariates;
    write_covariates(&dir.join("lr_covariates.nc"), &c.lr_orography, &c.lr_landsea)?;
    write_covariates(&dir.join("hr_covariates.nc"), &c.hr_orography, &c.hr_landsea)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub hr_spec: GridSpec,
    pub scale_factor: usize,
    pub n_timesteps: usize,
    pub seed: u64,
    pub start: DateTime<Utc>,
    pub step_hours: u32,
    /// Peak height of the procedural terrain in meters; 0 gives flat land.
    pub orography_amplitude: f64,
    /// Temperature change per meter of elevation.
    pub lapse_rate: f64,
    pub seasonal_amplitude: f64,
    pub mean_temperature: f64,
    /// Standard deviation of the smooth weather anomaly in Kelvin.
    pub noise_std: f64,
    /// Lag-one autocorrelation of the weather anomaly between steps.
    pub noise_persistence: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            hr_spec: GridSpec { lat_start: 44.975, lon_start: -5.975, dlat: -0.05, dlon: 0.05, n_lat: 80, n_lon: 80 },
            scale_factor: 4,
            n_timesteps: 2000,
            seed: 0,
            start: Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).single().expect("valid date"),
            step_hours: 24,
            orography_amplitude: 1500.0,
            lapse_rate: -6.5e-3,
            seasonal_amplitude: 10.0,
            mean_temperature: 285.0,
            noise_std: 2.0,
            noise_persistence: 0.7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub lr_spec: GridSpec,
    pub hr_spec: GridSpec,
    pub times: Vec<DateTime<Utc>>,
    pub lr: Vec<Array2<f64>>,
    pub hr: Vec<Array2<f64>>,
    pub covariates: StaticCovariates,
}

impl SyntheticData {
    pub fn into_dataset(self, variable: &str, split: TimeSplit) -> Dataset {
        Dataset {
            lr_spec: self.lr_spec,
            hr_spec: self.hr_spec,
            variable: variable.into(),
            times: self.times,
            lr: self.lr,
            hr: self.hr,
            covariates: Some(self.covariates),
            split,
        }
    }
}

/// Mean over non-overlapping `f × f` blocks.
pub fn block_mean(a: &Array2<f64>, f: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut out = Array2::zeros((h / f, w / f));
    for ((i, j), v) in out.indexed_iter_mut() {
        *v = a.slice(ndarray::s![i * f..(i + 1) * f, j * f..(j + 1) * f]).sum() / (f * f) as f64;
    }
    out
}

/// A plane wave `cos(kx·x + ky·y + φ)` stored separably so a field of many
/// waves costs one multiply-add per cell and wave.
struct Wave {
    cos_y: Vec<f64>,
    sin_y: Vec<f64>,
    cos_x: Vec<f64>,
    sin_x: Vec<f64>,
}

impl Wave {
    fn random<R: Rng>(h: usize, w: usize, wavelength: f64, rng: &mut R) -> Self {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let k = std::f64::consts::TAU / wavelength;
        let (ky, kx) = (k * theta.sin(), k * theta.cos());
        let ys: Vec<f64> = (0..h).map(|i| ky * i as f64 + phase).collect();
        let xs: Vec<f64> = (0..w).map(|j| kx * j as f64).collect();
        Self {
            cos_y: ys.iter().map(|a| a.cos()).collect(),
            sin_y: ys.iter().map(|a| a.sin()).collect(),
            cos_x: xs.iter().map(|a| a.cos()).collect(),
            sin_x: xs.iter().map(|a| a.sin()).collect(),
        }
    }

    fn accumulate(&self, out: &mut Array2<f64>, amp: f64) {
        for ((i, j), v) in out.indexed_iter_mut() {
            *v += amp * (self.cos_y[i] * self.cos_x[j] - self.sin_y[i] * self.sin_x[j]);
        }
    }
}

/// Fractal terrain: octaves of random plane waves with amplitude falling
/// as wavelength shrinks. Returns `(orography ≥ 0, land-sea fraction)`.
fn procedural_terrain<R: Rng>(h: usize, w: usize, amplitude: f64, rng: &mut R) -> (Array2<f64>, Array2<f64>) {
    let mut raw = Array2::zeros((h, w));
    let longest = h.max(w) as f64;
    let mut wavelength = longest;
    let mut amp = 1.0;
    while wavelength >= 3.0 {
        for _ in 0..4 {
            let jitter = rng.random_range(0.8..1.25);
            Wave::random(h, w, wavelength * jitter, rng).accumulate(&mut raw, amp * rng.random_range(0.5..1.0));
        }
        wavelength /= 1.8;
        amp *= 0.7;
    }
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    // shift so roughly a fifth of the domain is sea
    let mut sorted: Vec<f64> = raw.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let sea_level = sorted[sorted.len() / 5];
    let height = raw.mapv(|v| (v - sea_level) / peak * amplitude);
    let orography = height.mapv(|v| v.max(0.0));
    let landsea = if amplitude > 0.0 {
        height.mapv(|v| 1.0 / (1.0 + (-v / (0.02 * amplitude)).exp()))
    } else {
        Array2::from_elem((h, w), 1.0)
    };
    (orography, landsea)
}

/// Deterministic synthetic paired dataset. HR temperature is a spatially
/// uniform seasonal (and, for sub-daily steps, diurnal) cycle, plus a lapse
/// rate times terrain height, plus a smooth AR(1) weather anomaly. LR is the
/// HR block mean, and LR covariates are HR covariate block means.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    let f = config.scale_factor;
    let hr_spec = config.hr_spec;
    let lr_spec = hr_spec.coarsen(f)?;
    if config.step_hours == 0 || config.step_hours % 3 != 0 {
        return Err(Error::Config(format!("step_hours must be a positive multiple of 3, got {}", config.step_hours)));
    }
    if !(0.0..1.0).contains(&config.noise_persistence) || config.noise_std < 0.0 {
        return Err(Error::Config("noise_persistence must lie in [0, 1) and noise_std must be ≥ 0".into()));
    }
    let (h, w) = hr_spec.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (orography, landsea) = procedural_terrain(h, w, config.orography_amplitude, &mut rng);
    let static_part = orography.mapv(|z| config.lapse_rate * z);

    let n_waves = 8;
    let waves: Vec<Wave> = (0..n_waves)
        .map(|k| {
            let wavelength = h.max(w) as f64 * (2.0 - 1.2 * k as f64 / n_waves as f64);
            Wave::random(h, w, wavelength, &mut rng)
        })
        .collect();
    // each wave contributes variance amp²/2
    let wave_amp = config.noise_std * (2.0 / n_waves as f64).sqrt();
    let rho = config.noise_persistence;
    let mut coeffs: Vec<f64> = (0..n_waves).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

    let mut times = Vec::with_capacity(config.n_timesteps);
    let mut lr = Vec::with_capacity(config.n_timesteps);
    let mut hr = Vec::with_capacity(config.n_timesteps);
    for k in 0..config.n_timesteps {
        let t = config.start + Duration::hours(config.step_hours as i64 * k as i64);
        let doy = t.timestamp() as f64 / 86400.0 % 365.25;
        let hour = (t.timestamp() % 86400) as f64 / 3600.0;
        let mut base = config.mean_temperature - config.seasonal_amplitude * (std::f64::consts::TAU * (doy + 10.0) / 365.25).cos();
        if config.step_hours < 24 {
            base += 3.0 * (std::f64::consts::TAU * (hour - 15.0) / 24.0).cos();
        }
        if k > 0 {
            for c in coeffs.iter_mut() {
                *c = rho * *c + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut field = static_part.mapv(|s| s + base);
        if config.noise_std > 0.0 {
            for (wave, c) in waves.iter().zip(&coeffs) {
                wave.accumulate(&mut field, wave_amp * c);
            }
        }
        lr.push(block_mean(&field, f));
        hr.push(field);
        times.push(t);
    }
    let epoch = Utc.timestamp_opt(0, 0).single().expect("epoch");
    let covariates = StaticCovariates::new(
        Field::new(lr_spec, epoch, block_mean(&orography, f))?,
        Field::new(lr_spec, epoch, block_mean(&landsea, f))?,
        Field::new(hr_spec, epoch, orography)?,
        Field::new(hr_spec, epoch, landsea)?,
    )?;
    Ok(SyntheticData { lr_spec, hr_spec, times, lr, hr, covariates })
}

/// Per-patch covariate spread and the sampling distribution derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeighting {
    /// `N × n` standard deviations, one row per patch.
    pub sigma: Array2<f64>,
    /// Weights before flooring and renormalization.
    pub raw: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SampleWeighting {
    /// The single-patch case used for full-domain (uniform) sampling.
    pub fn uniform(n_patches: usize) -> Self {
        let n = n_patches.max(1);
        Self { sigma: Array2::zeros((n, 1)), raw: vec![1.0; n], weights: vec![1.0 / n as f64; n] }
    }
}

/// `raw_i = Σ_j σ_ij + (1 − mean_k Σ_j σ_kj)`, floored at [`WEIGHT_FLOOR`] and
/// renormalized to sum to one.
pub fn compute_patch_weights(sigma: &Array2<f64>) -> Result<SampleWeighting> {
    let (n_patches, n_cov) = sigma.dim();
    if n_patches == 0 || n_cov == 0 {
        return Err(Error::Domain("weighting needs at least one patch and one covariate".into()));
    }
    if let Some(v) = sigma.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("standard deviations must be finite and non-negative, got {v}")));
    }
    let totals: Vec<f64> = sigma.sum_axis(Axis(1)).to_vec();
    let mean_total = totals.iter().sum::<f64>() / n_patches as f64;
    let raw: Vec<f64> = totals.iter().map(|t| t + (1.0 - mean_total)).collect();
    let floored: Vec<f64> = raw.iter().map(|r| r.max(WEIGHT_FLOOR)).collect();
    let sum: f64 = floored.iter().sum();
    let weights = floored.iter().map(|r| r / sum).collect();
    Ok(SampleWeighting { sigma: sigma.clone(), raw, weights })
}

fn standardize(a: &Array2<f64>) -> Array2<f64> {
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let std = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 0.0 {
        a.mapv(|v| (v - mean) / std)
    } else {
        a.mapv(|_| 0.0)
    }
}

fn population_std<'a>(values: impl Iterator<Item = &'a f64>) -> f64 {
    let v: Vec<f64> = values.copied().collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `N × 2` matrix of HR orography and land-sea standard deviations within each
/// `(row0, col0, size)` window, computed on covariates standardized over the
/// whole HR domain.
pub fn patch_sigmas(covariates: &StaticCovariates, windows: &[(usize, usize, usize)]) -> Array2<f64> {
    let orog = standardize(&covariates.hr_orography.values);
    let lsm = standardize(&covariates.hr_landsea.values);
    let mut out = Array2::zeros((windows.len(), 2));
    for (k, &(r, c, s)) in windows.iter().enumerate() {
        let sl = ndarray::s![r..r + s, c..c + s];
        out[[k, 0]] = population_std(orog.slice(sl).iter());
        out[[k, 1]] = population_std(lsm.slice(sl).iter());
    }
    out
}

/// Endless stream of `(timestamp, patch index)` draws. Timestamps are visited
/// in a fresh random order each cycle; patch indices are i.i.d. from the
/// weighting.
pub struct SampleStream {
    rng: ChaCha8Rng,
    dist: WeightedIndex<f64>,
    timestamps: Vec<DateTime<Utc>>,
    order: Vec<usize>,
    cursor: usize,
}

impl SampleStream {
    /// The timestamp position (within the list given at construction) of the
    /// next draw is returned alongside the patch index by [`next_indexed`].
    ///
    /// [`next_indexed`]: SampleStream::next_indexed
    pub fn next_indexed(&mut self) -> Option<(usize, usize)> {
        if self.timestamps.is_empty() {
            return None;
        }
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let t = self.order[self.cursor];
        self.cursor += 1;
        Some((t, self.dist.sample(&mut self.rng)))
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl Iterator for SampleStream {
    type Item = (DateTime<Utc>, usize);

    fn next(&mut self) -> Option<Self::Item> {
        self.next_indexed().map(|(t, p)| (self.timestamps[t], p))
    }
}

pub fn weighted_sample_stream(weighting: &SampleWeighting, timestamps: &[DateTime<Utc>], seed: u64) -> Result<SampleStream> {
    let sum: f64 = weighting.weights.iter().sum();
    if weighting.weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain("weights must be non-negative and sum to one".into()));
    }
    let dist = WeightedIndex::new(&weighting.weights).map_err(|e| Error::Domain(e.to_string()))?;
    let order: Vec<usize> = (0..timestamps.len()).collect();
    let cursor = order.len();
    Ok(SampleStream { rng: ChaCha8Rng::seed_from_u64(seed), dist, timestamps: timestamps.to_vec(), order, cursor })
}
