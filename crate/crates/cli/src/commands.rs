use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use gridsr::data::{self, load_dataset, read_covariate_pair, read_series, Dataset, DatasetManifest, Series};
use gridsr::evaluation::{self, MetricMaps, ReportHeader};
use gridsr::grid::{assign_split, Field, GridSpec, SplitLabel, StaticCovariates, TimeSplit};
use gridsr::models::{Architecture, Checkpoint, Model, ModelConfig, TilingMode};
use gridsr::pipeline::Preparer;
use gridsr::training;
use log::{info, warn};
use ndarray::Array2;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{CliError, DownscaleArgs, EvaluateArgs, Global, ReportArgs, SynthArgs, TrainArgs};

const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

fn load_config(g: &Global) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    Ok(cfg)
}

fn created(g: &Global) -> Option<String> {
    (!g.reproducible).then(|| Utc::now().to_rfc3339())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(gridsr::Error::from)?;
    std::fs::write(path, text + "\n").map_err(gridsr::Error::from)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Intermediate-artifact cache, `$GRIDSR_CACHE` or `.gridsr/`.
fn cache_dir() -> PathBuf {
    std::env::var_os("GRIDSR_CACHE").filter(|v| !v.is_empty()).map(PathBuf::from).unwrap_or_else(|| ".gridsr".into())
}

fn load_data(dir: &Path, variable: &str, split: TimeSplit) -> Result<Dataset, CliError> {
    let mut m = DatasetManifest::for_directory(dir, variable, split);
    let has_cov = m.lr_covariates.as_ref().is_some_and(|p| p.exists()) && m.hr_covariates.as_ref().is_some_and(|p| p.exists());
    if !has_cov {
        m.lr_covariates = None;
        m.hr_covariates = None;
    }
    Ok(load_dataset(&m)?)
}

fn load_covariates(dir: &Path) -> Result<StaticCovariates, CliError> {
    let (lo, ls) = read_covariate_pair(&dir.join("lr_covariates.nc"))?;
    let (ho, hs) = read_covariate_pair(&dir.join("hr_covariates.nc"))?;
    Ok(StaticCovariates::new(lo, ls, ho, hs)?)
}

fn same_grid(a: &GridSpec, b: &GridSpec) -> bool {
    a.shape() == b.shape() && a.is_refinement_of(b) && b.is_refinement_of(a)
}

pub fn synth(g: &Global, a: SynthArgs) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    let mut syn = cfg.synthetic();
    if let Some(n) = a.timesteps {
        syn.n_timesteps = n;
    }
    if let Some(s) = a.scale {
        syn.scale_factor = s;
    }
    let out = a.out.unwrap_or_else(|| cfg.data_dir.clone());
    let data = data::generate_synthetic(&syn)?;
    create_dir(&out)?;
    data::write_dataset(&out, &cfg.variable, &data)?;
    write_json(
        &out.join("synthetic.json"),
        &json!({ "code_version": CODE_VERSION, "variable": cfg.variable, "synthetic": syn, "created": created(g) }),
    )?;
    info!("wrote {} timesteps to {}", data.times.len(), out.display());
    Ok(())
}

pub fn train(g: &Global, a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(g)?;
    if a.arch.is_some() {
        cfg.model.architecture = a.arch;
    }
    if a.mode.is_some() {
        cfg.model.mode = a.mode;
    }
    if let Some(p) = a.preset {
        cfg.model.preset = p;
    }
    let t = &mut cfg.train;
    t.max_epochs = a.epochs.or(t.max_epochs);
    t.learning_rate = a.lr.or(t.learning_rate);
    t.batch_size = a.batch_size.or(t.batch_size);
    t.sampling = a.sampling.or(t.sampling);
    t.samples_per_epoch = a.samples_per_epoch.or(t.samples_per_epoch);
    if let Some(d) = a.data {
        cfg.data_dir = d;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }

    let data = load_data(&cfg.data_dir, &cfg.variable, cfg.split)?;
    let ck = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.data_fingerprint != data.fingerprint() {
                warn!("resuming on data that differs from the checkpoint's training data");
            }
            cfg.model.architecture = Some(ck.config.architecture);
            cfg.model.mode = Some(ck.tiling_mode);
            let tc = cfg.train_config(ck.config.architecture.is_tiled());
            info!("resuming {} after {} epochs", ck.config.architecture, ck.history.len());
            training::resume(ck, &data, &tc)?
        }
        None => {
            let mc = cfg.model_config(data.lr_spec.shape(), data.hr_spec.shape());
            let tc = cfg.train_config(mc.architecture.is_tiled());
            info!("training {} in {:?} mode with {:?} sampling", mc.architecture, cfg.mode(), tc.sampling);
            training::train(&mc, cfg.mode(), &data, &tc)?
        }
    };

    let out = &cfg.out_dir;
    create_dir(out)?;
    let ck_path = out.join("checkpoint.ckpt");
    ck.save(&ck_path)?;
    write_json(
        &out.join("history.json"),
        &json!({ "history": ck.history, "best_epoch": ck.best_epoch, "diverged_at": ck.diverged_at }),
    )?;
    let tc = cfg.train_config(ck.config.architecture.is_tiled());
    write_json(
        &out.join("run_manifest.json"),
        &json!({
            "command": "train",
            "code_version": CODE_VERSION,
            "architecture": ck.config.architecture,
            "tiling_mode": ck.tiling_mode,
            "seed": ck.seed,
            "data_dir": cfg.data_dir,
            "data_fingerprint": ck.data_fingerprint,
            "param_count": ck.config.param_count,
            "param_hash": ck.param_hash(),
            "model": ck.config,
            "train": tc,
            "resumed_from": a.resume,
            "created": created(g),
        }),
    )?;
    let run_toml = toml::to_string(&cfg).map_err(|e| CliError::Runtime(format!("cannot serialize the run config: {e}")))?;
    std::fs::write(out.join("run_config.toml"), run_toml).map_err(gridsr::Error::from)?;

    if let Some(epoch) = ck.diverged_at {
        return Err(CliError::Runtime(format!(
            "training diverged at epoch {epoch}; the last good parameters were saved to {}",
            ck_path.display()
        )));
    }
    info!("checkpoint written to {}", ck_path.display());
    Ok(())
}

/// Runs the pipeline over `inputs`, split into contiguous chunks across
/// `threads` workers; results come back in input order.
fn run_downscale(
    prep: &Preparer,
    model: &Model,
    inputs: &[(DateTime<Utc>, &Array2<f64>)],
    batch_size: usize,
    threads: usize,
) -> Result<Vec<Field>, CliError> {
    if threads <= 1 || inputs.len() < 2 {
        return Ok(prep.downscale(model, inputs, batch_size)?);
    }
    let chunk = inputs.len().div_ceil(threads);
    let parts: Vec<gridsr::Result<Vec<Field>>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            inputs.chunks(chunk).map(|c| s.spawn(move || prep.downscale(model, c, batch_size))).collect();
        handles.into_iter().map(|h| h.join().expect("downscale worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(inputs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn downscale(g: &Global, a: DownscaleArgs) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (lr_spec, hr_spec) =
        ck.grids.ok_or_else(|| CliError::Usage("checkpoint does not record its data grids".into()))?;
    let input = read_series(&a.input, &cfg.variable)?;
    if !same_grid(&input.spec, &lr_spec) {
        return Err(CliError::Usage("input grid differs from the checkpoint's LR grid".into()));
    }
    let cov = if ck.config.architecture.is_tiled() {
        let dir = a.covariates.clone().unwrap_or_else(|| a.input.parent().map(Path::to_path_buf).unwrap_or_default());
        Some(load_covariates(&dir)?)
    } else {
        None
    };
    let prep = Preparer::new(&ck.config, ck.tiling_mode, lr_spec, hr_spec, cov.as_ref())?;
    let model = ck.model()?;
    let inputs: Vec<_> = input.times.iter().copied().zip(input.values.iter()).collect();
    let fields = run_downscale(&prep, &model, &inputs, a.batch_size, g.threads as usize)?;
    let values: Vec<Array2<f64>> = fields.into_iter().map(|f| f.values).collect();
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    data::write_series(&a.output, &cfg.variable, &hr_spec, &input.times, &values)?;
    info!("downscaled {} timesteps with {} to {}", values.len(), ck.config.architecture, a.output.display());
    Ok(())
}

fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(gridsr::Error::from)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Series restricted to `times`, which must all be present.
fn select(series: &Series, times: &[DateTime<Utc>]) -> Vec<Array2<f64>> {
    times
        .iter()
        .map(|t| {
            let k = series.times.binary_search(t).expect("timestamp present");
            series.values[k].clone()
        })
        .collect()
}

struct Evaluation<'a> {
    spec: GridSpec,
    variable: &'a str,
    times: Vec<DateTime<Utc>>,
    reference: Vec<Array2<f64>>,
    methods: Vec<(String, Vec<Array2<f64>>)>,
    header: ReportHeader,
    case_study: &'a [DateTime<Utc>],
}

/// Writes the metric table, the per-gridbox maps and any case-study panels.
fn write_evaluation(out: &Path, e: Evaluation) -> Result<(), CliError> {
    create_dir(out)?;
    let table = evaluation::seasonal_table(&e.methods, &e.reference, &e.times, e.header)?;
    table.write_csv(&out.join("metrics.csv"))?;
    table.write_json(&out.join("metrics.json"))?;
    std::fs::write(out.join("metrics.txt"), table.render()).map_err(gridsr::Error::from)?;

    let mut maps: Vec<(String, MetricMaps)> = Vec::new();
    for (name, p) in &e.methods {
        maps.push((name.clone(), evaluation::gridbox_maps(p, &e.reference)?));
    }
    evaluation::write_maps_netcdf(&out.join("maps.nc"), &e.spec, &maps)?;
    let map_dir = out.join("maps");
    create_dir(&map_dir)?;
    let rmse_max = maps.iter().flat_map(|(_, m)| m.rmse.iter().copied()).fold(0.0, f64::max);
    let bias_max = maps.iter().flat_map(|(_, m)| m.bias.iter().map(|v| v.abs())).fold(0.0, f64::max);
    for (name, m) in &maps {
        evaluation::write_png(&map_dir.join(format!("{name}_rmse.png")), &m.rmse, -rmse_max, rmse_max)?;
        evaluation::write_png(&map_dir.join(format!("{name}_bias.png")), &m.bias, -bias_max, bias_max)?;
    }

    if !e.case_study.is_empty() {
        let to_fields = |series: &[Array2<f64>]| -> Vec<Field> {
            e.times.iter().zip(series).map(|(t, v)| Field { spec: e.spec, time: *t, values: v.clone() }).collect()
        };
        let mut panels: Vec<(String, Vec<Field>)> = vec![("reference".to_string(), to_fields(&e.reference))];
        panels.extend(e.methods.iter().map(|(n, p)| (n.clone(), to_fields(p))));
        let outcome = evaluation::export_case_study(&panels, e.case_study, e.variable, &out.join("case_study"))?;
        if !outcome.is_complete() {
            let missing: Vec<String> = outcome.missing.iter().map(|t| t.format("%Y-%m-%dT%H").to_string()).collect();
            return Err(CliError::Runtime(format!("no data for case-study timestamps {}", missing.join(", "))));
        }
    }
    info!("evaluation written to {}", out.display());
    Ok(())
}

fn split_label(name: &str) -> SplitLabel {
    match name {
        "train" => SplitLabel::Train,
        "validation" => SplitLabel::Validation,
        _ => SplitLabel::Test,
    }
}

pub fn evaluate(g: &Global, a: EvaluateArgs) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    if !a.reference.exists() {
        return Err(CliError::Usage(format!("reference file {} does not exist", a.reference.display())));
    }
    let reference = read_series(&a.reference, &cfg.variable)?;
    let mut preds = Vec::new();
    for (name, path) in &a.predictions {
        if !path.exists() {
            return Err(CliError::Usage(format!("prediction file {} does not exist", path.display())));
        }
        let s = read_series(path, &cfg.variable)?;
        if !same_grid(&s.spec, &reference.spec) {
            return Err(CliError::Usage(format!("prediction `{name}` is not on the reference grid")));
        }
        preds.push((name.clone(), path, s));
    }
    let label = a.split.as_deref().map(split_label);
    let times: Vec<DateTime<Utc>> = reference
        .times
        .iter()
        .copied()
        .filter(|t| label.is_none_or(|l| assign_split(*t, &cfg.split).ok() == Some(l)))
        .filter(|t| preds.iter().all(|(_, _, s)| s.times.binary_search(t).is_ok()))
        .collect();
    if times.is_empty() {
        return Err(CliError::Usage("predictions and reference share no timestamps".into()));
    }
    let mut header =
        ReportHeader { code_version: CODE_VERSION.into(), normalization: "n/a".into(), created: created(g), ..Default::default() };
    for (name, path, _) in &preds {
        header.checkpoints.insert(name.clone(), format!("file-sha256:{}", file_hash(path)?));
    }
    let methods = preds.iter().map(|(n, _, s)| (n.clone(), select(s, &times))).collect();
    write_evaluation(
        &a.out,
        Evaluation {
            spec: reference.spec,
            variable: &cfg.variable,
            reference: select(&reference, &times),
            times,
            methods,
            header,
            case_study: &a.case_study,
        },
    )
}

/// Test-split prediction of one checkpoint, cached under `GRIDSR_CACHE`.
/// Predictions are always read back from the cached file, so a cold and a
/// warm run see the same values.
fn cached_prediction(
    ck: &Checkpoint,
    data: &Dataset,
    test: &[usize],
    batch_size: usize,
    threads: usize,
) -> Result<Series, CliError> {
    let mut h = Sha256::new();
    h.update(ck.param_hash());
    h.update(serde_json::to_vec(&ck.config).map_err(gridsr::Error::from)?);
    h.update(format!("{:?}", ck.tiling_mode));
    h.update(data.fingerprint());
    for &k in test {
        h.update(data.times[k].timestamp().to_le_bytes());
    }
    let path = cache_dir().join("predictions").join(format!("{}.nc", hex::encode(h.finalize())));
    if !path.exists() {
        let prep = Preparer::for_dataset(&ck.config, ck.tiling_mode, data)?;
        let model = ck.model()?;
        let inputs: Vec<_> = test.iter().map(|&k| (data.times[k], &data.lr[k])).collect();
        let fields = run_downscale(&prep, &model, &inputs, batch_size, threads)?;
        let values: Vec<Array2<f64>> = fields.into_iter().map(|f| f.values).collect();
        let times: Vec<_> = inputs.iter().map(|(t, _)| *t).collect();
        create_dir(path.parent().expect("cache path has a parent"))?;
        let tmp = path.with_extension("nc.tmp");
        data::write_series(&tmp, &data.variable, &data.hr_spec, &times, &values)?;
        std::fs::rename(&tmp, &path).map_err(gridsr::Error::from)?;
    } else {
        info!("using cached predictions {}", path.display());
    }
    Ok(read_series(&path, &data.variable)?)
}

pub fn report(g: &Global, a: ReportArgs) -> Result<(), CliError> {
    let mut cfg = load_config(g)?;
    if let Some(d) = a.data {
        cfg.data_dir = d;
    }
    let data = load_data(&cfg.data_dir, &cfg.variable, cfg.split)?;
    let test = data.split_indices(SplitLabel::Test);
    if test.is_empty() {
        return Err(CliError::Usage("the dataset has no test-split timesteps".into()));
    }
    let mut checkpoints = Vec::new();
    for (name, path) in &a.checkpoints {
        let ck = Checkpoint::load(path)?;
        if ck.data_fingerprint != data.fingerprint() {
            warn!("checkpoint `{name}` was trained on different data");
        }
        checkpoints.push((name.clone(), ck));
    }
    if !checkpoints.iter().any(|(_, c)| c.config.architecture == Architecture::Bicubic) {
        let mc = ModelConfig::desk(Architecture::Bicubic, data.lr_spec.shape(), data.hr_spec.shape());
        let model = Model::build(mc, 0)?;
        checkpoints.insert(0, ("bicubic".to_string(), Checkpoint::from_model(&model, TilingMode::Full, 0, data.fingerprint())));
    }

    let times: Vec<_> = test.iter().map(|&k| data.times[k]).collect();
    let mut header = ReportHeader { code_version: CODE_VERSION.into(), created: created(g), ..Default::default() };
    let mut norms: Vec<String> = Vec::new();
    let mut methods = Vec::new();
    for (name, ck) in &checkpoints {
        info!("predicting the test split with `{name}`");
        let s = cached_prediction(ck, &data, &test, a.batch_size, g.threads as usize)?;
        header.checkpoints.insert(name.clone(), ck.param_hash());
        if ck.config.architecture != Architecture::Bicubic {
            let n = serde_json::to_value(ck.config.norm_variant).map_err(gridsr::Error::from)?;
            norms.push(format!("{name}: {}", n.as_str().unwrap_or_default()));
        }
        methods.push((name.clone(), select(&s, &times)));
    }
    header.normalization = if norms.is_empty() { "n/a".into() } else { norms.join(", ") };
    write_evaluation(
        &a.out,
        Evaluation {
            spec: data.hr_spec,
            variable: &cfg.variable,
            reference: test.iter().map(|&k| data.hr[k].clone()).collect(),
            times,
            methods,
            header,
            case_study: &a.case_study,
        },
    )
}
