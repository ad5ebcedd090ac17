//! Keys cubic-convolution interpolation (`a = -0.5`) between aligned grids.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};

const A: f64 = -0.5;

/// Keys kernel with `a = -0.5`.
pub fn keys_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Four source taps and weights for one output coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
}

fn taps_for(pos: f64, n: usize) -> Taps {
    let base = pos.floor();
    let t = pos - base;
    let mut idx = [0; 4];
    let mut w = [0.0; 4];
    for k in 0..4 {
        let off = k as isize - 1;
        // edge replication outside the source grid
        idx[k] = (base as isize + off).clamp(0, n as isize - 1) as usize;
        w[k] = keys_kernel(t - off as f64);
    }
    Taps { idx, w }
}

/// Precomputed separable interpolation from one grid onto another.
#[derive(Debug, Clone, PartialEq)]
pub struct BicubicPlan {
    src_shape: (usize, usize),
    rows: Vec<Taps>,
    cols: Vec<Taps>,
}

impl BicubicPlan {
    /// Plan from `source` onto `target`, which must refine `source`'s extent.
    pub fn new(source: &GridSpec, target: &GridSpec) -> Result<Self> {
        if !target.is_refinement_of(source) {
            return Err(Error::Config(format!(
                "bicubic target {}x{} (d = {}, {}) does not refine the source grid {}x{} (d = {}, {})",
                target.n_lat, target.n_lon, target.dlat, target.dlon, source.n_lat, source.n_lon, source.dlat, source.dlon
            )));
        }
        let rows = (0..target.n_lat)
            .map(|i| taps_for((target.lat(i) - source.lat_start) / source.dlat, source.n_lat))
            .collect();
        let cols = (0..target.n_lon)
            .map(|j| taps_for((target.lon(j) - source.lon_start) / source.dlon, source.n_lon))
            .collect();
        Ok(Self { src_shape: source.shape(), rows, cols })
    }

    pub fn target_shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn apply(&self, src: &Array2<f64>) -> Result<Array2<f64>> {
        if src.dim() != self.src_shape {
            return Err(Error::Shape(format!("bicubic source {:?} does not match plan {:?}", src.dim(), self.src_shape)));
        }
        // Taps are combined relative to the one just below the sample, so a constant
        // neighbourhood is reproduced bit for bit. Columns first, then rows.
        let mut tmp = Array2::<f64>::zeros((self.src_shape.0, self.cols.len()));
        for r in 0..self.src_shape.0 {
            for (j, t) in self.cols.iter().enumerate() {
                let anchor = src[[r, t.idx[1]]];
                tmp[[r, j]] = anchor + (0..4).map(|k| t.w[k] * (src[[r, t.idx[k]]] - anchor)).sum::<f64>();
            }
        }
        let mut out = Array2::<f64>::zeros(self.target_shape());
        for (i, t) in self.rows.iter().enumerate() {
            for j in 0..self.cols.len() {
                let anchor = tmp[[t.idx[1], j]];
                out[[i, j]] = anchor + (0..4).map(|k| t.w[k] * (tmp[[t.idx[k], j]] - anchor)).sum::<f64>();
            }
        }
        Ok(out)
    }
}

/// Interpolates `field` onto `target`.
pub fn bicubic_upsample(field: &Field, target: &GridSpec) -> Result<Field> {
    let values = BicubicPlan::new(&field.spec, target)?.apply(&field.values)?;
    Field::new(*target, field.time, values)
}
