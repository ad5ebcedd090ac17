//! Georeferenced regular lat-lon grids, fields, seasons and temporal splits.

use std::fmt;

use chrono::{DateTime, Datelike, Timelike, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular lat-lon grid. Index `(i, j)` has its cell center at
/// `(lat_start + i·dlat, lon_start + j·dlon)`; latitude is usually stored
/// north-to-south, i.e. with a negative `dlat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat_start: f64,
    pub lon_start: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub n_lat: usize,
    pub n_lon: usize,
}

const COORD_TOL: f64 = 1e-6;

impl GridSpec {
    pub fn new(lat_start: f64, lon_start: f64, dlat: f64, dlon: f64, n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat == 0 || n_lon == 0 {
            return Err(Error::Config(format!("grid must be non-empty, got {n_lat}x{n_lon}")));
        }
        if dlat == 0.0 || dlon == 0.0 || !dlat.is_finite() || !dlon.is_finite() {
            return Err(Error::Config(format!("grid spacing must be finite and non-zero, got {dlat}, {dlon}")));
        }
        if !lat_start.is_finite() || !lon_start.is_finite() {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(Self { lat_start, lon_start, dlat, dlon, n_lat, n_lon })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }

    pub fn lat(&self, i: usize) -> f64 {
        self.lat_start + i as f64 * self.dlat
    }

    pub fn lon(&self, j: usize) -> f64 {
        self.lon_start + j as f64 * self.dlon
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.lat(i), self.lon(j))
    }

    /// Continuous index coordinates of a geographic point.
    pub fn fractional_index(&self, lat: f64, lon: f64) -> (f64, f64) {
        ((lat - self.lat_start) / self.dlat, (lon - self.lon_start) / self.dlon)
    }

    /// Nearest grid index, or `None` when the point falls outside the cells.
    pub fn nearest_index(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let (fi, fj) = self.fractional_index(lat, lon);
        let (i, j) = (fi.round(), fj.round());
        if i < 0.0 || j < 0.0 || i >= self.n_lat as f64 || j >= self.n_lon as f64 {
            return None;
        }
        Some((i as usize, j as usize))
    }

    /// Cell-edge extent as `(lat_min, lat_max, lon_min, lon_max)`.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let la = self.lat_start - 0.5 * self.dlat;
        let lb = self.lat_start + (self.n_lat as f64 - 0.5) * self.dlat;
        let oa = self.lon_start - 0.5 * self.dlon;
        let ob = self.lon_start + (self.n_lon as f64 - 0.5) * self.dlon;
        (la.min(lb), la.max(lb), oa.min(ob), oa.max(ob))
    }

    /// True when this grid is at least as fine as `coarse`, with the same axis
    /// orientation, and its extent lies inside `coarse`'s extent.
    pub fn is_refinement_of(&self, coarse: &GridSpec) -> bool {
        let same_sign = self.dlat.signum() == coarse.dlat.signum() && self.dlon.signum() == coarse.dlon.signum();
        let finer = self.dlat.abs() <= coarse.dlat.abs() + COORD_TOL && self.dlon.abs() <= coarse.dlon.abs() + COORD_TOL;
        let (a0, a1, b0, b1) = self.extent();
        let (c0, c1, d0, d1) = coarse.extent();
        let tol = COORD_TOL * (1.0 + coarse.dlat.abs().max(coarse.dlon.abs()));
        same_sign && finer && a0 >= c0 - tol && a1 <= c1 + tol && b0 >= d0 - tol && b1 <= d1 + tol
    }

    /// Symmetric alignment predicate: one grid refines the other.
    pub fn aligned_with(&self, other: &GridSpec) -> bool {
        self.is_refinement_of(other) || other.is_refinement_of(self)
    }

    /// Sub-grid starting at index `(row0, col0)`.
    pub fn window(&self, row0: usize, col0: usize, n_lat: usize, n_lon: usize) -> Result<GridSpec> {
        if row0 + n_lat > self.n_lat || col0 + n_lon > self.n_lon {
            return Err(Error::Geometry(format!(
                "window {n_lat}x{n_lon} at ({row0},{col0}) exceeds grid {}x{}",
                self.n_lat, self.n_lon
            )));
        }
        GridSpec::new(self.lat(row0), self.lon(col0), self.dlat, self.dlon, n_lat, n_lon)
    }

    /// Grid of `factor × factor` block means.
    pub fn coarsen(&self, factor: usize) -> Result<GridSpec> {
        if factor == 0 || self.n_lat % factor != 0 || self.n_lon % factor != 0 {
            return Err(Error::Config(format!(
                "grid {}x{} is not divisible by scale factor {factor}",
                self.n_lat, self.n_lon
            )));
        }
        let half = (factor as f64 - 1.0) / 2.0;
        GridSpec::new(
            self.lat_start + half * self.dlat,
            self.lon_start + half * self.dlon,
            self.dlat * factor as f64,
            self.dlon * factor as f64,
            self.n_lat / factor,
            self.n_lon / factor,
        )
    }
}

/// A 2-D array of values on a grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub spec: GridSpec,
    pub time: DateTime<Utc>,
    pub values: Array2<f64>,
}

impl Field {
    pub fn new(spec: GridSpec, time: DateTime<Utc>, values: Array2<f64>) -> Result<Self> {
        if values.dim() != spec.shape() {
            return Err(Error::Shape(format!(
                "field values {:?} do not match grid {:?}",
                values.dim(),
                spec.shape()
            )));
        }
        if let Some(((i, j), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { variable: "field".into(), time, i, j });
        }
        Ok(Self { spec, time, values })
    }

    pub fn constant(spec: GridSpec, time: DateTime<Utc>, value: f64) -> Self {
        Self { spec, time, values: Array2::from_elem(spec.shape(), value) }
    }

    /// Sub-field over a window of the grid.
    pub fn window(&self, row0: usize, col0: usize, n_lat: usize, n_lon: usize) -> Result<Field> {
        let spec = self.spec.window(row0, col0, n_lat, n_lon)?;
        let values = self
            .values
            .slice(ndarray::s![row0..row0 + n_lat, col0..col0 + n_lon])
            .to_owned();
        Ok(Field { spec, time: self.time, values })
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

/// Time-invariant predictors at both resolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticCovariates {
    pub lr_orography: Field,
    pub lr_landsea: Field,
    pub hr_orography: Field,
    pub hr_landsea: Field,
}

impl StaticCovariates {
    pub fn new(lr_orography: Field, lr_landsea: Field, hr_orography: Field, hr_landsea: Field) -> Result<Self> {
        if lr_orography.spec != lr_landsea.spec || hr_orography.spec != hr_landsea.spec {
            return Err(Error::Config("covariates at one resolution must share a grid".into()));
        }
        for f in [&lr_landsea, &hr_landsea] {
            if f.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain("land-sea fraction outside [0, 1]".into()));
            }
        }
        Ok(Self { lr_orography, lr_landsea, hr_orography, hr_landsea })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Season {
    #[serde(rename = "DJF")]
    Djf,
    #[serde(rename = "MAM")]
    Mam,
    #[serde(rename = "JJA")]
    Jja,
    #[serde(rename = "SON")]
    Son,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Djf, Season::Mam, Season::Jja, Season::Son];

    pub fn label(self) -> &'static str {
        match self {
            Season::Djf => "DJF",
            Season::Mam => "MAM",
            Season::Jja => "JJA",
            Season::Son => "SON",
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn season_of(time: DateTime<Utc>) -> Season {
    match time.month() {
        12 | 1 | 2 => Season::Djf,
        3..=5 => Season::Mam,
        6..=8 => Season::Jja,
        _ => Season::Son,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Validation,
    Test,
}

/// Inclusive year ranges for the three splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeSplit {
    pub train: (i32, i32),
    pub validation: (i32, i32),
    pub test: (i32, i32),
}

impl Default for TimeSplit {
    /// 1985–2013 training, 2014–2018 validation, 2019–2020 test.
    fn default() -> Self {
        Self { train: (1985, 2013), validation: (2014, 2018), test: (2019, 2020) }
    }
}

impl TimeSplit {
    pub fn new(train: (i32, i32), validation: (i32, i32), test: (i32, i32)) -> Result<Self> {
        let ordered = train.0 <= train.1
            && validation.0 <= validation.1
            && test.0 <= test.1
            && train.1 < validation.0
            && validation.1 < test.0;
        if !ordered {
            return Err(Error::Config(format!(
                "split ranges must be disjoint and ordered train < validation < test, got {train:?}, {validation:?}, {test:?}"
            )));
        }
        Ok(Self { train, validation, test })
    }
}

pub fn assign_split(time: DateTime<Utc>, split: &TimeSplit) -> Result<SplitLabel> {
    let y = time.year();
    let within = |r: (i32, i32)| r.0 <= y && y <= r.1;
    if within(split.train) {
        Ok(SplitLabel::Train)
    } else if within(split.validation) {
        Ok(SplitLabel::Validation)
    } else if within(split.test) {
        Ok(SplitLabel::Test)
    } else {
        Err(Error::OutOfSplit { time })
    }
}

/// Timestamps must sit on the 3-hourly UTC grid.
pub fn check_three_hourly(time: DateTime<Utc>) -> Result<()> {
    if time.hour() % 3 != 0 || time.minute() != 0 || time.second() != 0 || time.nanosecond() != 0 {
        return Err(Error::Ingestion(format!("timestamp {time} is not on a 3-hourly step")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t(y: i32, m: u32, d: u32, h: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(y, m, d, h, 0, 0).unwrap()
    }

    #[test]
    fn seasons() {
        assert_eq!(season_of(t(2020, 1, 13, 0)), Season::Djf);
        assert_eq!(season_of(t(2020, 2, 3, 12)), Season::Djf);
        assert_eq!(season_of(t(2019, 9, 1, 0)), Season::Son);
        assert_eq!(season_of(t(2019, 12, 31, 21)), Season::Djf);
        assert_eq!(season_of(t(2019, 6, 1, 0)), Season::Jja);
        assert_eq!(season_of(t(2019, 5, 31, 0)), Season::Mam);
    }

    #[test]
    fn default_split_years() {
        let s = TimeSplit::default();
        assert_eq!(assign_split(t(1985, 1, 1, 0), &s).unwrap(), SplitLabel::Train);
        assert_eq!(assign_split(t(2013, 12, 31, 21), &s).unwrap(), SplitLabel::Train);
        assert_eq!(assign_split(t(2014, 6, 1, 0), &s).unwrap(), SplitLabel::Validation);
        assert_eq!(assign_split(t(2020, 2, 4, 0), &s).unwrap(), SplitLabel::Test);
        assert!(matches!(assign_split(t(1984, 9, 1, 0), &s), Err(Error::OutOfSplit { .. })));
        assert!(matches!(assign_split(t(2021, 1, 1, 0), &s), Err(Error::OutOfSplit { .. })));
    }

    #[test]
    fn overlapping_split_rejected() {
        assert!(TimeSplit::new((2000, 2010), (2010, 2012), (2013, 2014)).is_err());
        assert!(TimeSplit::new((2000, 2009), (2010, 2012), (2013, 2014)).is_ok());
    }

    #[test]
    fn index_coordinate_round_trip() {
        let g = GridSpec::new(45.0, -6.0, -0.05, 0.05, 200, 320).unwrap();
        for i in 0..g.n_lat {
            for j in (0..g.n_lon).step_by(7) {
                let (la, lo) = g.cell_center(i, j);
                assert_eq!(g.nearest_index(la, lo), Some((i, j)));
            }
        }
        assert_eq!(g.nearest_index(50.0, 0.0), None);
    }

    #[test]
    fn coarsened_grid_is_refined_by_original() {
        let hr = GridSpec::new(45.0, -6.0, -0.05, 0.05, 200, 320).unwrap();
        let lr = hr.coarsen(5).unwrap();
        assert_eq!(lr.shape(), (40, 64));
        assert!(hr.is_refinement_of(&lr));
        assert!(!lr.is_refinement_of(&hr));
        assert!(hr.aligned_with(&lr) && lr.aligned_with(&hr));
        let (a0, a1, b0, b1) = hr.extent();
        let (c0, c1, d0, d1) = lr.extent();
        for (x, y) in [(a0, c0), (a1, c1), (b0, d0), (b1, d1)] {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(hr.coarsen(3).is_err());
    }

    #[test]
    fn reanalysis_grids_are_aligned() {
        // ERA5-like 0.25° grid over 33–47N, 8W–12E and a 0.05° grid over 35–45N, 6W–10E
        let lr = GridSpec::new(47.0, -8.0, -0.25, 0.25, 57, 81).unwrap();
        let hr = GridSpec::new(44.975, -5.975, -0.05, 0.05, 200, 320).unwrap();
        assert!(hr.is_refinement_of(&lr));
    }

    #[test]
    fn invalid_specs() {
        assert!(GridSpec::new(0.0, 0.0, 0.0, 1.0, 2, 2).is_err());
        assert!(GridSpec::new(0.0, 0.0, 1.0, 1.0, 0, 2).is_err());
    }

    #[test]
    fn field_rejects_non_finite_and_bad_shape() {
        let g = GridSpec::new(0.0, 0.0, 1.0, 1.0, 2, 2).unwrap();
        let mut v = Array2::zeros((2, 2));
        v[[1, 0]] = f64::NAN;
        match Field::new(g, t(2020, 1, 1, 0), v) {
            Err(Error::NonFinite { i: 1, j: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(Field::new(g, t(2020, 1, 1, 0), Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn three_hourly_check() {
        assert!(check_three_hourly(t(2020, 1, 1, 21)).is_ok());
        assert!(check_three_hourly(t(2020, 1, 1, 1)).is_err());
    }
}
