//! Tile grids over the HR domain, the LR and covariate windows that feed each
//! tile, random patch placement, and reassembly of tile predictions.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};

/// Smallest blend weight at a patch edge, so every covered cell has weight.
pub const MIN_BLEND_WEIGHT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingConfig {
    pub tile_size: usize,
    pub lr_size: usize,
    pub cov_size: usize,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self { tile_size: 40, lr_size: 13, cov_size: 52 }
    }
}

/// An HR output window together with its LR context window and its HR
/// covariate window. The covariate origin may be negative when the domain is
/// smaller than the window; such cells are filled by edge replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRegion {
    pub hr_row0: usize,
    pub hr_col0: usize,
    pub hr_size: usize,
    pub lr_row0: usize,
    pub lr_col0: usize,
    pub lr_size: usize,
    pub hr_cov_row0: isize,
    pub hr_cov_col0: isize,
    pub hr_cov_size: usize,
}

impl TileRegion {
    /// Position of the tile inside its covariate window.
    pub fn cov_offset(&self) -> (usize, usize) {
        ((self.hr_row0 as isize - self.hr_cov_row0) as usize, (self.hr_col0 as isize - self.hr_cov_col0) as usize)
    }

    pub fn contains_cell(&self, i: usize, j: usize) -> bool {
        (self.hr_row0..self.hr_row0 + self.hr_size).contains(&i) && (self.hr_col0..self.hr_col0 + self.hr_size).contains(&j)
    }
}

fn centered_start(center: f64, size: usize, n: usize) -> Option<usize> {
    if size > n {
        return None;
    }
    let start = (center - (size as f64 - 1.0) / 2.0 + 0.5 + 1e-9).floor();
    Some(start.clamp(0.0, (n - size) as f64) as usize)
}

/// LR window origin for an HR window: `lr_size × lr_size` cells centered on
/// the HR window's geographic center and clamped inside the LR domain. The
/// window's footprint must contain the HR window's footprint.
pub fn lr_window_for_tile(
    hr_row0: usize,
    hr_col0: usize,
    hr_size: usize,
    lr_spec: &GridSpec,
    hr_spec: &GridSpec,
    lr_size: usize,
) -> Result<(usize, usize)> {
    let c = (hr_size as f64 - 1.0) / 2.0;
    let (lat, lon) = (hr_spec.lat(0) + (hr_row0 as f64 + c) * hr_spec.dlat, hr_spec.lon(0) + (hr_col0 as f64 + c) * hr_spec.dlon);
    let (fi, fj) = lr_spec.fractional_index(lat, lon);
    let too_big = || Error::Geometry(format!("LR window of {lr_size} exceeds LR domain {}x{}", lr_spec.n_lat, lr_spec.n_lon));
    let r0 = centered_start(fi, lr_size, lr_spec.n_lat).ok_or_else(too_big)?;
    let c0 = centered_start(fj, lr_size, lr_spec.n_lon).ok_or_else(too_big)?;
    let lr_win = lr_spec.window(r0, c0, lr_size, lr_size)?;
    let hr_win = hr_spec.window(hr_row0, hr_col0, hr_size, hr_size)?;
    if !hr_win.is_refinement_of(&lr_win) {
        return Err(Error::Geometry(format!(
            "LR window of {lr_size} cells does not contain the footprint of an HR window of {hr_size} cells"
        )));
    }
    Ok((r0, c0))
}

fn cov_origin(row0: usize, tile: usize, cov: usize, n: usize) -> isize {
    let centered = row0 as isize - ((cov - tile) / 2) as isize;
    if cov <= n {
        centered.clamp(0, (n - cov) as isize)
    } else {
        centered
    }
}

/// Builds the full region for an HR window origin.
pub fn region_at(row0: usize, col0: usize, lr_spec: &GridSpec, hr_spec: &GridSpec, cfg: &TilingConfig) -> Result<TileRegion> {
    if cfg.cov_size < cfg.tile_size {
        return Err(Error::Geometry("covariate window must be at least the tile size".into()));
    }
    if row0 + cfg.tile_size > hr_spec.n_lat || col0 + cfg.tile_size > hr_spec.n_lon {
        return Err(Error::Geometry(format!("tile at ({row0},{col0}) leaves the HR domain")));
    }
    let (lr_row0, lr_col0) = lr_window_for_tile(row0, col0, cfg.tile_size, lr_spec, hr_spec, cfg.lr_size)?;
    Ok(TileRegion {
        hr_row0: row0,
        hr_col0: col0,
        hr_size: cfg.tile_size,
        lr_row0,
        lr_col0,
        lr_size: cfg.lr_size,
        hr_cov_row0: cov_origin(row0, cfg.tile_size, cfg.cov_size, hr_spec.n_lat),
        hr_cov_col0: cov_origin(col0, cfg.tile_size, cfg.cov_size, hr_spec.n_lon),
        hr_cov_size: cfg.cov_size,
    })
}

/// Disjoint tiles covering the HR domain in row-major order.
pub fn make_tile_grid(hr_spec: &GridSpec, lr_spec: &GridSpec, cfg: &TilingConfig) -> Result<Vec<TileRegion>> {
    let t = cfg.tile_size;
    if t == 0 || hr_spec.n_lat % t != 0 || hr_spec.n_lon % t != 0 {
        return Err(Error::Geometry(format!("HR grid {}x{} is not divisible by tile size {t}", hr_spec.n_lat, hr_spec.n_lon)));
    }
    let mut out = Vec::with_capacity((hr_spec.n_lat / t) * (hr_spec.n_lon / t));
    for r in (0..hr_spec.n_lat).step_by(t) {
        for c in (0..hr_spec.n_lon).step_by(t) {
            out.push(region_at(r, c, lr_spec, hr_spec, cfg)?);
        }
    }
    Ok(out)
}

/// Window with origin uniform over every position inside the domain.
pub fn random_patch<R: Rng + ?Sized>(hr_spec: &GridSpec, lr_spec: &GridSpec, cfg: &TilingConfig, rng: &mut R) -> Result<TileRegion> {
    let t = cfg.tile_size;
    if hr_spec.n_lat < t || hr_spec.n_lon < t {
        return Err(Error::Geometry("domain smaller than the tile".into()));
    }
    let r = rng.random_range(0..=hr_spec.n_lat - t);
    let c = rng.random_range(0..=hr_spec.n_lon - t);
    region_at(r, c, lr_spec, hr_spec, cfg)
}

/// Training patch near `tile`: the origin is moved by up to half a tile in
/// each direction in steps of `step` cells and clamped to the domain.
pub fn jittered_patch<R: Rng + ?Sized>(
    tile: &TileRegion,
    step: usize,
    hr_spec: &GridSpec,
    lr_spec: &GridSpec,
    cfg: &TilingConfig,
    rng: &mut R,
) -> Result<TileRegion> {
    let step = step.max(1);
    let half = (cfg.tile_size / 2 / step) as i64;
    let mv = |origin: usize, n: usize, rng: &mut R| -> usize {
        let k = rng.random_range(0..=2 * half) - half;
        let max = (n - cfg.tile_size) as isize;
        let max_aligned = max - max % step as isize;
        (origin as isize + k as isize * step as isize).clamp(0, max_aligned) as usize
    };
    let r = mv(tile.hr_row0, hr_spec.n_lat, rng);
    let c = mv(tile.hr_col0, hr_spec.n_lon, rng);
    region_at(r, c, lr_spec, hr_spec, cfg)
}

/// Overlapping inference windows at the given stride; the last row and
/// column of windows are pinned to the domain edge.
pub fn overlapping_grid(hr_spec: &GridSpec, lr_spec: &GridSpec, cfg: &TilingConfig, stride: usize) -> Result<Vec<TileRegion>> {
    let t = cfg.tile_size;
    if stride == 0 || hr_spec.n_lat < t || hr_spec.n_lon < t {
        return Err(Error::Geometry("invalid stride or domain smaller than the tile".into()));
    }
    let starts = |n: usize| {
        let mut v: Vec<usize> = (0..=n - t).step_by(stride).collect();
        if *v.last().expect("non-empty") != n - t {
            v.push(n - t);
        }
        v
    };
    let mut out = Vec::new();
    for r in starts(hr_spec.n_lat) {
        for c in starts(hr_spec.n_lon) {
            out.push(region_at(r, c, lr_spec, hr_spec, cfg)?);
        }
    }
    Ok(out)
}

/// Values of the HR window of each region.
pub fn extract(field: &Array2<f64>, regions: &[TileRegion]) -> Vec<(TileRegion, Array2<f64>)> {
    regions
        .iter()
        .map(|t| (*t, field.slice(ndarray::s![t.hr_row0..t.hr_row0 + t.hr_size, t.hr_col0..t.hr_col0 + t.hr_size]).to_owned()))
        .collect()
}

/// `size × size` window of `a` at a possibly negative origin, replicating
/// edge values outside the array.
pub fn window_replicated(a: &Array2<f64>, row0: isize, col0: isize, size: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((size, size), |(i, j)| {
        let r = (row0 + i as isize).clamp(0, h as isize - 1) as usize;
        let c = (col0 + j as isize).clamp(0, w as isize - 1) as usize;
        a[[r, c]]
    })
}

/// 1-D blend profile: Hann window floored at [`MIN_BLEND_WEIGHT`].
pub fn blend_profile(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let s = (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin();
            (s * s).max(MIN_BLEND_WEIGHT)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StitchMode {
    Disjoint,
    Blend,
}

fn uncovered(count: &Array2<f64>) -> Vec<(usize, usize)> {
    count.indexed_iter().filter(|(_, c)| **c == 0.0).map(|(ij, _)| ij).collect()
}

/// Per-patch weight maps normalized so that at each covered cell the weights
/// of all patches sum to one.
pub fn normalized_blend_weights(windows: &[(usize, usize, usize)], shape: (usize, usize)) -> Result<Vec<Array2<f64>>> {
    let mut den = Array2::<f64>::zeros(shape);
    for &(r, c, s) in windows {
        if r + s > shape.0 || c + s > shape.1 {
            return Err(Error::Geometry(format!("patch at ({r},{c}) of size {s} leaves the domain")));
        }
        let p = blend_profile(s);
        for i in 0..s {
            for j in 0..s {
                den[[r + i, c + j]] += p[i] * p[j];
            }
        }
    }
    let gaps = uncovered(&den);
    if !gaps.is_empty() {
        return Err(Error::Coverage { cells: gaps });
    }
    Ok(windows
        .iter()
        .map(|&(r, c, s)| {
            let p = blend_profile(s);
            Array2::from_shape_fn((s, s), |(i, j)| p[i] * p[j] / den[[r + i, c + j]])
        })
        .collect())
}

/// Reassembles patch predictions into a field on `hr_spec`.
pub fn stitch(predictions: &[(TileRegion, Array2<f64>)], hr_spec: &GridSpec, mode: StitchMode, time: chrono::DateTime<chrono::Utc>) -> Result<Field> {
    let shape = hr_spec.shape();
    for (t, p) in predictions {
        if p.dim() != (t.hr_size, t.hr_size) {
            return Err(Error::Shape(format!("patch {:?} does not match tile size {}", p.dim(), t.hr_size)));
        }
        if t.hr_row0 + t.hr_size > shape.0 || t.hr_col0 + t.hr_size > shape.1 {
            return Err(Error::Geometry(format!("tile at ({},{}) leaves the domain", t.hr_row0, t.hr_col0)));
        }
    }
    let mut out = Array2::<f64>::zeros(shape);
    match mode {
        StitchMode::Disjoint => {
            let mut count = Array2::<f64>::zeros(shape);
            for (t, p) in predictions {
                let sl = ndarray::s![t.hr_row0..t.hr_row0 + t.hr_size, t.hr_col0..t.hr_col0 + t.hr_size];
                if count.slice(sl).iter().any(|c| *c > 0.0) {
                    return Err(Error::Geometry(format!("tile at ({},{}) overlaps another tile", t.hr_row0, t.hr_col0)));
                }
                count.slice_mut(sl).fill(1.0);
                out.slice_mut(sl).assign(p);
            }
            let gaps = uncovered(&count);
            if !gaps.is_empty() {
                return Err(Error::Coverage { cells: gaps });
            }
        }
        StitchMode::Blend => {
            let windows: Vec<_> = predictions.iter().map(|(t, _)| (t.hr_row0, t.hr_col0, t.hr_size)).collect();
            let weights = normalized_blend_weights(&windows, shape)?;
            for ((t, p), w) in predictions.iter().zip(&weights) {
                let mut sl = out.slice_mut(ndarray::s![t.hr_row0..t.hr_row0 + t.hr_size, t.hr_col0..t.hr_col0 + t.hr_size]);
                sl.zip_mut_with(&(p * w), |o, v| *o += v);
            }
        }
    }
    Field::new(*hr_spec, time, out)
}

pub fn export_layout(path: &Path, regions: &[TileRegion]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(regions)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn grids(h: usize, w: usize, f: usize) -> (GridSpec, GridSpec) {
        let hr = GridSpec::new(45.0, -6.0, -0.05, 0.05, h, w).unwrap();
        (hr, hr.coarsen(f).unwrap())
    }

    #[test]
    fn forty_tiles_on_reference_domain() {
        let (hr, lr) = grids(200, 320, 5);
        let tiles = make_tile_grid(&hr, &lr, &TilingConfig::default()).unwrap();
        assert_eq!(tiles.len(), 40);
        assert_eq!((tiles[1].hr_row0, tiles[1].hr_col0), (0, 40));
        assert_eq!((tiles[8].hr_row0, tiles[8].hr_col0), (40, 0));
    }

    #[test]
    fn single_tile_domain() {
        let (hr, lr) = grids(40, 40, 4);
        let cfg = TilingConfig { tile_size: 40, lr_size: 10, cov_size: 52 };
        let tiles = make_tile_grid(&hr, &lr, &cfg).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!((tiles[0].hr_row0, tiles[0].lr_row0, tiles[0].lr_col0), (0, 0, 0));
        assert_eq!(tiles[0].cov_offset(), (6, 6));
    }

    #[test]
    fn interior_window_overhangs_by_two_or_three() {
        let (hr, lr) = grids(200, 320, 5);
        // tile at HR (80, 120): footprint LR rows 16..24, cols 24..32
        let (r0, c0) = lr_window_for_tile(80, 120, 40, &lr, &hr, 13).unwrap();
        assert_eq!((r0, c0), (14, 22));
        assert_eq!((16 - r0, r0 + 13 - 24), (2, 3));
    }

    #[test]
    fn corner_window_clamps_and_small_window_fails() {
        let (hr, lr) = grids(200, 320, 5);
        assert_eq!(lr_window_for_tile(0, 0, 40, &lr, &hr, 13).unwrap(), (0, 0));
        assert_eq!(lr_window_for_tile(160, 280, 40, &lr, &hr, 13).unwrap(), (27, 51));
        assert!(matches!(lr_window_for_tile(80, 120, 40, &lr, &hr, 7), Err(Error::Geometry(_))));
    }

    #[test]
    fn scale_four_interior_offset_is_one() {
        let (hr, lr) = grids(120, 120, 4);
        let t = region_at(40, 40, &lr, &hr, &TilingConfig::default()).unwrap();
        assert_eq!((t.lr_row0, t.lr_col0), (9, 9));
        // on an 80x80 domain the same tile touches the edge and the window clamps
        let (hr, lr) = grids(80, 80, 4);
        let t = region_at(40, 40, &lr, &hr, &TilingConfig::default()).unwrap();
        assert_eq!((t.lr_row0, t.lr_col0), (7, 7));
        assert_eq!((t.hr_cov_row0, t.hr_cov_col0), (28, 28));
        let t = region_at(0, 0, &lr, &hr, &TilingConfig::default()).unwrap();
        assert_eq!((t.hr_cov_row0, t.cov_offset()), (0, (0, 0)));
    }

    #[test]
    fn blend_of_constant_patches_is_constant() {
        let (hr, lr) = grids(40, 60, 4);
        let cfg = TilingConfig { tile_size: 40, lr_size: 10, cov_size: 40 };
        let a = region_at(0, 0, &lr, &hr, &cfg).unwrap();
        let b = region_at(0, 20, &lr, &hr, &cfg).unwrap();
        let t = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let c = 281.5;
        let f = stitch(&[(a, Array2::from_elem((40, 40), c)), (b, Array2::from_elem((40, 40), c))], &hr, StitchMode::Blend, t).unwrap();
        assert!(f.values.iter().all(|v| (v - c).abs() < 1e-12));
        let f = stitch(&[(a, Array2::from_elem((40, 40), 1.0)), (b, Array2::from_elem((40, 40), 3.0))], &hr, StitchMode::Blend, t).unwrap();
        for j in 20..40 {
            let v = f.values[[17, j]];
            assert!(v > 1.0 && v < 3.0, "col {j}: {v}");
        }
    }

    #[test]
    fn disjoint_errors() {
        let (hr, lr) = grids(40, 80, 4);
        let cfg = TilingConfig { tile_size: 40, lr_size: 10, cov_size: 40 };
        let a = region_at(0, 0, &lr, &hr, &cfg).unwrap();
        let b = region_at(0, 20, &lr, &hr, &cfg).unwrap();
        let t = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let z = Array2::zeros((40, 40));
        assert!(matches!(stitch(&[(a, z.clone()), (b, z.clone())], &hr, StitchMode::Disjoint, t), Err(Error::Geometry(_))));
        match stitch(&[(a, z)], &hr, StitchMode::Blend, t) {
            Err(Error::Coverage { cells }) => assert_eq!(cells.len(), 40 * 40),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overlapping_grid_pins_last_window() {
        let (hr, lr) = grids(80, 100, 4);
        let w = overlapping_grid(&hr, &lr, &TilingConfig::default(), 20).unwrap();
        let cols: Vec<usize> = w.iter().filter(|t| t.hr_row0 == 0).map(|t| t.hr_col0).collect();
        assert_eq!(cols, vec![0, 20, 40, 60]);
    }

    #[test]
    fn replicated_window_pads_with_edges() {
        let a = Array2::from_shape_fn((2, 2), |(i, j)| (i * 2 + j) as f64);
        let w = window_replicated(&a, -1, -1, 4);
        assert_eq!(w[[0, 0]], 0.0);
        assert_eq!(w[[3, 3]], 3.0);
        assert_eq!(w[[1, 2]], 1.0);
    }
}
