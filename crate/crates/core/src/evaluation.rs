//! Verification metrics, seasonal tables, per-gridbox maps and case-study
//! exports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::write_coords;
use crate::error::{Error, Result};
use crate::grid::{season_of, Field, GridSpec, Season};
use crate::netcdf::{number_attr, text_attr, AttrValue, NcWriter};

/// Fill value written for undefined map cells.
pub const UNDEFINED_FILL: f64 = -9999.0;

fn check(pred: &[f64], reference: &[f64]) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!("{} predicted vs {} reference values", pred.len(), reference.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("metrics need at least one value".into()));
    }
    Ok(())
}

fn mean(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    it.sum::<f64>() / n as f64
}

pub fn rmse(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check(pred, reference)?;
    Ok(mean(pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)), pred.len()).sqrt())
}

pub fn mae(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check(pred, reference)?;
    Ok(mean(pred.iter().zip(reference).map(|(p, r)| (p - r).abs()), pred.len()))
}

/// Mean of `pred - reference`; positive when the prediction is too warm.
pub fn bias(pred: &[f64], reference: &[f64]) -> Result<f64> {
    check(pred, reference)?;
    Ok(mean(pred.iter().zip(reference).map(|(p, r)| p - r), pred.len()))
}

/// Stabilizing constants of the structural similarity index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    /// `C1 = (0.01 L)²`, `C2 = (0.03 L)²` for data range `L`.
    pub fn from_range(l: f64) -> Result<Self> {
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::Config(format!("SSIM data range must be positive, got {l}")));
        }
        Ok(Self { c1: (0.01 * l).powi(2), c2: (0.03 * l).powi(2) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnrParams {
    pub max: f64,
}

impl PsnrParams {
    pub fn new(max: f64) -> Result<Self> {
        if !(max > 0.0) || !max.is_finite() {
            return Err(Error::Config(format!("PSNR peak value must be positive, got {max}")));
        }
        Ok(Self { max })
    }
}

/// Global SSIM from whole-field means, population variances and covariance.
pub fn ssim(pred: &[f64], reference: &[f64], params: &SsimParams) -> Result<f64> {
    check(pred, reference)?;
    let n = pred.len();
    let mx = mean(pred.iter().copied(), n);
    let my = mean(reference.iter().copied(), n);
    let vx = mean(pred.iter().map(|x| (x - mx) * (x - mx)), n);
    let vy = mean(reference.iter().map(|y| (y - my) * (y - my)), n);
    let cxy = mean(pred.iter().zip(reference).map(|(x, y)| (x - mx) * (y - my)), n);
    let SsimParams { c1, c2 } = *params;
    Ok(((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
}

/// Peak signal-to-noise ratio in dB; `+inf` when the fields are identical.
pub fn psnr(pred: &[f64], reference: &[f64], params: &PsnrParams) -> Result<f64> {
    check(pred, reference)?;
    let mse = mean(pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)), pred.len());
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (params.max * params.max / mse).log10())
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

fn check_series(pred: &[Array2<f64>], reference: &[Array2<f64>]) -> Result<(usize, usize)> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!("{} predicted vs {} reference timesteps", pred.len(), reference.len())));
    }
    let first = reference.first().ok_or_else(|| Error::Shape("empty series".into()))?;
    let dim = first.dim();
    if pred.iter().chain(reference).any(|a| a.dim() != dim) {
        return Err(Error::Shape("series fields differ in shape".into()));
    }
    Ok(dim)
}

/// Per-gridbox metrics over the time axis. `rmse_over_std` is `None` where
/// the reference has no temporal variability.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMaps {
    pub bias: Array2<f64>,
    pub rmse: Array2<f64>,
    pub rmse_over_std: Array2<Option<f64>>,
}

impl MetricMaps {
    pub fn undefined_cells(&self) -> usize {
        self.rmse_over_std.iter().filter(|v| v.is_none()).count()
    }
}

pub fn gridbox_maps(pred: &[Array2<f64>], reference: &[Array2<f64>]) -> Result<MetricMaps> {
    let dim = check_series(pred, reference)?;
    let n = pred.len() as f64;
    let mut sum_d = Array2::<f64>::zeros(dim);
    let mut sum_d2 = Array2::<f64>::zeros(dim);
    let mut sum_r = Array2::<f64>::zeros(dim);
    for (p, r) in pred.iter().zip(reference) {
        ndarray::Zip::from(&mut sum_d).and(&mut sum_d2).and(&mut sum_r).and(p).and(r).for_each(|d, d2, sr, p, r| {
            *d += p - r;
            *d2 += (p - r) * (p - r);
            *sr += r;
        });
    }
    let mean_r = sum_r / n;
    let mut var_r = Array2::<f64>::zeros(dim);
    for r in reference {
        ndarray::Zip::from(&mut var_r).and(r).and(&mean_r).for_each(|v, r, m| *v += (r - m) * (r - m));
    }
    let bias = sum_d / n;
    let rmse = (sum_d2 / n).mapv(f64::sqrt);
    let rmse_over_std = ndarray::Zip::from(&rmse).and(&var_r).map_collect(|e, v| {
        let std = (v / n).sqrt();
        (std > 0.0).then(|| e / std)
    });
    Ok(MetricMaps { bias, rmse, rmse_over_std })
}

/// Writes one set of maps per method as variables `<method>_bias`,
/// `<method>_rmse`, `<method>_rmse_over_std`.
pub fn write_maps_netcdf(path: &Path, spec: &GridSpec, maps: &[(String, MetricMaps)]) -> Result<()> {
    let mut w = NcWriter::new();
    w.add_global_attr("title", AttrValue::Text("per-gridbox verification metrics".into()));
    let (y, x) = write_coords(&mut w, spec)?;
    for (name, m) in maps {
        if m.bias.dim() != spec.shape() {
            return Err(Error::Shape(format!("maps for {name} do not match the grid")));
        }
        w.add_var_f64(&format!("{name}_bias"), &[y, x], flat(&m.bias), vec![text_attr("units", "K")])?;
        w.add_var_f64(&format!("{name}_rmse"), &[y, x], flat(&m.rmse), vec![text_attr("units", "K")])?;
        w.add_var_f64(
            &format!("{name}_rmse_over_std"),
            &[y, x],
            m.rmse_over_std.iter().map(|v| v.unwrap_or(UNDEFINED_FILL)).collect(),
            vec![text_attr("units", "1"), number_attr("_FillValue", UNDEFINED_FILL)],
        )?;
    }
    w.write(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Rmse,
    Mae,
    Bias,
    Ssim,
    Psnr,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Rmse, Metric::Mae, Metric::Bias, Metric::Ssim, Metric::Psnr];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Rmse => "RMSE",
            Metric::Mae => "MAE",
            Metric::Bias => "Bias",
            Metric::Ssim => "SSIM",
            Metric::Psnr => "PSNR",
        }
    }

    /// Score used to rank methods; lower is better.
    fn badness(self, v: f64) -> f64 {
        match self {
            Metric::Rmse | Metric::Mae => v,
            Metric::Bias => v.abs(),
            Metric::Ssim | Metric::Psnr => -v,
        }
    }
}

/// Column labels: the four seasons then `Annual`.
pub fn column_labels() -> Vec<String> {
    Season::ALL.iter().map(|s| s.label().to_string()).chain(std::iter::once("Annual".to_string())).collect()
}

/// Provenance recorded with every table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ReportHeader {
    pub code_version: String,
    /// Checkpoint fingerprint per method.
    pub checkpoints: BTreeMap<String, String>,
    pub normalization: String,
    /// Data range used for the SSIM constants.
    pub ssim_range: f64,
    /// Peak value used for PSNR.
    pub psnr_max: f64,
    pub aggregation: String,
    /// Creation time; left out of reproducible runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

pub const AGGREGATION_NOTE: &str = "RMSE, MAE and Bias: per-gridbox over the column's timesteps, then spatial mean \
(RMSE as the root of the spatially averaged gridbox mean square error); SSIM and PSNR: whole-field per timestep, then time mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: Metric,
    pub method: String,
    /// One value per column; `None` when the column has no timesteps.
    pub values: Vec<Option<f64>>,
    /// Whether this method is best (or tied for best at two decimals) in each column.
    pub best: Vec<bool>,
    /// Whether the best mark in each column is shared after rounding.
    pub tied: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub header: ReportHeader,
    pub columns: Vec<String>,
    pub rows: Vec<MetricRow>,
}

fn season_cells(
    pred: &[Array2<f64>],
    reference: &[Array2<f64>],
    idx: &[usize],
    ssim_p: &SsimParams,
    psnr_p: &PsnrParams,
) -> Result<[Option<f64>; 5]> {
    if idx.is_empty() {
        return Ok([None; 5]);
    }
    let p: Vec<Array2<f64>> = idx.iter().map(|&t| pred[t].clone()).collect();
    let r: Vec<Array2<f64>> = idx.iter().map(|&t| reference[t].clone()).collect();
    let n = idx.len() as f64;
    let dim = r[0].dim();
    let mut sd = Array2::<f64>::zeros(dim);
    let mut sa = Array2::<f64>::zeros(dim);
    let mut s2 = Array2::<f64>::zeros(dim);
    for (a, b) in p.iter().zip(&r) {
        ndarray::Zip::from(&mut sd).and(&mut sa).and(&mut s2).and(a).and(b).for_each(|d, ab, d2, a, b| {
            *d += a - b;
            *ab += (a - b).abs();
            *d2 += (a - b) * (a - b);
        });
    }
    let cells = (dim.0 * dim.1) as f64;
    let bias_v = sd.sum() / n / cells;
    let mae_v = sa.sum() / n / cells;
    let rmse_v = (s2.sum() / n / cells).sqrt();
    let mut ssim_sum = 0.0;
    let mut psnr_sum = 0.0;
    for (a, b) in p.iter().zip(&r) {
        let (fa, fb) = (flat(a), flat(b));
        ssim_sum += ssim(&fa, &fb, ssim_p)?;
        psnr_sum += psnr(&fa, &fb, psnr_p)?;
    }
    Ok([Some(rmse_v), Some(mae_v), Some(bias_v), Some(ssim_sum / n), Some(psnr_sum / n)])
}

/// Range `max - min` over a reference series, the default `L` and `MAX`.
pub fn reference_range(reference: &[Array2<f64>]) -> f64 {
    let (lo, hi) = reference
        .iter()
        .flat_map(|a| a.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    hi - lo
}

/// Seasonal and annual metrics for each method against the reference.
pub fn seasonal_table(
    methods: &[(String, Vec<Array2<f64>>)],
    reference: &[Array2<f64>],
    times: &[DateTime<Utc>],
    mut header: ReportHeader,
) -> Result<MetricTable> {
    if methods.is_empty() {
        return Err(Error::Config("no methods to evaluate".into()));
    }
    if times.len() != reference.len() {
        return Err(Error::Shape(format!("{} timestamps for {} reference fields", times.len(), reference.len())));
    }
    for (name, p) in methods {
        check_series(p, reference).map_err(|e| Error::Shape(format!("{name}: {e}")))?;
    }
    let range = reference_range(reference);
    let range = if range > 0.0 { range } else { 1.0 };
    if header.ssim_range <= 0.0 {
        header.ssim_range = range;
    }
    if header.psnr_max <= 0.0 {
        header.psnr_max = range;
    }
    if header.aggregation.is_empty() {
        header.aggregation = AGGREGATION_NOTE.to_string();
    }
    let ssim_p = SsimParams::from_range(header.ssim_range)?;
    let psnr_p = PsnrParams::new(header.psnr_max)?;
    let mut groups: Vec<Vec<usize>> =
        Season::ALL.iter().map(|s| (0..times.len()).filter(|&t| season_of(times[t]) == *s).collect()).collect();
    groups.push((0..times.len()).collect());

    let mut cells: Vec<Vec<[Option<f64>; 5]>> = Vec::new();
    for (_, p) in methods {
        cells.push(groups.iter().map(|g| season_cells(p, reference, g, &ssim_p, &psnr_p)).collect::<Result<_>>()?);
    }
    let columns = column_labels();
    let mut rows = Vec::new();
    for (mi, metric) in Metric::ALL.iter().enumerate() {
        let mut best = vec![vec![false; columns.len()]; methods.len()];
        let mut tied = vec![false; columns.len()];
        for c in 0..columns.len() {
            let rounded: Vec<Option<f64>> =
                (0..methods.len()).map(|k| cells[k][c][mi].map(|v| (metric.badness(v) * 100.0).round() / 100.0)).collect();
            let top = rounded.iter().flatten().copied().fold(f64::INFINITY, f64::min);
            let winners: Vec<usize> = (0..methods.len()).filter(|&k| rounded[k] == Some(top)).collect();
            for &k in &winners {
                best[k][c] = true;
            }
            tied[c] = winners.len() > 1;
        }
        for (k, (name, _)) in methods.iter().enumerate() {
            rows.push(MetricRow {
                metric: *metric,
                method: name.clone(),
                values: (0..columns.len()).map(|c| cells[k][c][mi]).collect(),
                best: best[k].clone(),
                tied: tied.clone(),
            });
        }
    }
    Ok(MetricTable { header, columns, rows })
}

fn format_value(v: Option<f64>) -> String {
    match v {
        None => "undefined".into(),
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v:.2}"),
    }
}

impl MetricTable {
    pub fn value(&self, metric: Metric, method: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r.metric == metric && r.method == method)?.values[c]
    }

    /// Text layout: one block per metric, one line per method, best cells
    /// starred and ties marked with `=`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<6} {:<12}", "Metric", "Method"));
        for c in &self.columns {
            out.push_str(&format!(" {c:>10}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<6} {:<12}", r.metric.label(), r.method));
            for (k, v) in r.values.iter().enumerate() {
                let mark = match (r.best[k], r.tied[k]) {
                    (true, true) => "=",
                    (true, false) => "*",
                    _ => " ",
                };
                out.push_str(&format!(" {:>9}{mark}", format_value(*v)));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut head = vec!["metric".to_string(), "method".to_string()];
        head.extend(self.columns.iter().cloned());
        head.extend(self.columns.iter().map(|c| format!("best_{c}")));
        w.write_record(&head)?;
        for r in &self.rows {
            let mut rec = vec![r.metric.label().to_string(), r.method.clone()];
            rec.extend(r.values.iter().map(|v| match v {
                None => String::new(),
                Some(v) if v.is_infinite() => "inf".into(),
                Some(v) => format!("{v:.10e}"),
            }));
            rec.extend(r.best.iter().zip(&r.tied).map(|(b, t)| match (b, t) {
                (true, true) => "tie".to_string(),
                (true, false) => "best".to_string(),
                _ => String::new(),
            }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON with undefined cells as `null` and infinite PSNR as `"inf"`.
    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                let values: Vec<serde_json::Value> = r
                    .values
                    .iter()
                    .map(|v| match v {
                        None => serde_json::Value::Null,
                        Some(v) if v.is_infinite() => serde_json::Value::from("inf"),
                        Some(v) => serde_json::Value::from(*v),
                    })
                    .collect();
                serde_json::json!({
                    "metric": r.metric.label(),
                    "method": r.method,
                    "values": values,
                    "best": r.best,
                    "tied": r.tied,
                })
            })
            .collect();
        serde_json::json!({ "header": self.header, "columns": self.columns, "rows": rows })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }
}

/// Diverging blue-white-red color for `t` in `[0, 1]`.
fn color(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if t < 0.5 {
        let s = t / 0.5;
        (0.23 + 0.77 * s, 0.30 + 0.70 * s, 0.75 + 0.25 * s)
    } else {
        let s = (t - 0.5) / 0.5;
        (1.0 - 0.30 * s, 1.0 - 0.98 * s, 1.0 - 0.85 * s)
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Renders `values` as an RGB PNG on the color scale `[vmin, vmax]`, north up.
pub fn write_png(path: &Path, values: &Array2<f64>, vmin: f64, vmax: f64) -> Result<()> {
    let (h, w) = values.dim();
    let span = if vmax > vmin { vmax - vmin } else { 1.0 };
    let mut data = Vec::with_capacity(h * w * 3);
    for row in values.rows() {
        for v in row {
            data.extend_from_slice(&color((v - vmin) / span));
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
    writer.write_image_data(&data).map_err(|e| Error::Image(e.to_string()))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))
}

/// Writes one field as a single-timestep NetCDF file.
pub fn write_field_netcdf(path: &Path, variable: &str, field: &Field) -> Result<()> {
    crate::data::write_series(path, variable, &field.spec, &[field.time], std::slice::from_ref(&field.values))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaseStudyOutcome {
    pub files: Vec<PathBuf>,
    /// Requested timestamps no method had a prediction for.
    pub missing: Vec<DateTime<Utc>>,
}

impl CaseStudyOutcome {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Writes `<method>_<YYYYmmddHH>.nc` and `.png` for every requested
/// timestamp, with one color scale per timestamp shared by all methods.
pub fn export_case_study(
    methods: &[(String, Vec<Field>)],
    timestamps: &[DateTime<Utc>],
    variable: &str,
    out_dir: &Path,
) -> Result<CaseStudyOutcome> {
    if methods.is_empty() {
        return Err(Error::Config("case study needs at least one method".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut outcome = CaseStudyOutcome::default();
    for &t in timestamps {
        let fields: Vec<(&str, &Field)> =
            methods.iter().filter_map(|(m, fs)| fs.iter().find(|f| f.time == t).map(|f| (m.as_str(), f))).collect();
        if fields.is_empty() {
            outcome.missing.push(t);
            continue;
        }
        let (lo, hi) = fields
            .iter()
            .flat_map(|(_, f)| f.values.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let stamp = t.format("%Y%m%d%H");
        for (m, f) in fields {
            let nc = out_dir.join(format!("{m}_{stamp}.nc"));
            write_field_netcdf(&nc, variable, f)?;
            let img = out_dir.join(format!("{m}_{stamp}.png"));
            write_png(&img, &f.values, lo, hi)?;
            outcome.files.push(nc);
            outcome.files.push(img);
        }
    }
    Ok(outcome)
}
