//! Experiment harness: perturbation sweeps, sampler curves, training
//! trade-offs, and the train / eval / visualize commands behind the CLI.
//!
//! Every `(axis point, seed)` evaluation seeds its per-sample generators
//! from `hash(seed, experiment, param, value)`, so curves are comparable
//! across sweeps and reruns overwrite identical files.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::extract::{load_image, save_image, Image};
use crate::geometry::{rasterize_coverage, ImageSpec, PatchSet};
use crate::model::{
    evaluate_detailed, load_checkpoint, save_checkpoint, train_from, write_history, Checkpoint,
    EvalReport, EvalSpec, ModelConfig, ModelParams, Scalar, SetTransform, TrainConfig, TrainState,
};
use crate::par::Exec;
use crate::perturb::{Dropout, PerturbConfig, Shake};
use crate::rng::{hash_str, hash_words, Rng};
use crate::sampling::{CentralParams, EdgeParams, Sampler};

pub const EXPERIMENTS: [&str; 12] = [
    "scale_sweep",
    "dropout_sweep",
    "shake_sweep",
    "shake_dropout",
    "shake_scale",
    "dropout_scale",
    "grid_density",
    "dropout_vs_rescale",
    "redundancy",
    "sampler_curve",
    "training_tradeoff",
    "seed_stability",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// One swept parameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub param: String,
    pub values: Vec<f64>,
}

/// Model and optimizer settings for experiments that train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    /// Restrict the sweep to one series and override its values.
    #[serde(default)]
    pub axis: Option<Axis>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Sampler used by the perturbation sweeps.
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub training: Option<TrainSetup>,
}

impl ExperimentConfig {
    pub fn new(experiment: &str, data: DataConfig) -> Self {
        Self {
            experiment: experiment.into(),
            checkpoint: None,
            data,
            axis: None,
            seeds: None,
            out: None,
            sampler: Sampler::Grid,
            precision: Precision::F32,
            training: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let series = default_series(&self.experiment)?;
        if let Some(axis) = &self.axis {
            if !series.iter().any(|(p, _)| p == &axis.param) {
                let known: Vec<&str> = series.iter().map(|(p, _)| p.as_str()).collect();
                return Err(Error::Config(format!(
                    "experiment {} has no parameter {:?}; expected one of {known:?}",
                    self.experiment, axis.param
                )));
            }
            if axis.values.is_empty() {
                return Err(Error::Config("axis.values must not be empty".into()));
            }
        }
        if self.seeds.as_ref().is_some_and(|s| s.is_empty()) {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.experiment == "training_tradeoff" {
            if self.training.is_none() {
                return Err(Error::Config("training_tradeoff requires key `training`".into()));
            }
            if self.out.is_none() {
                return Err(Error::Config("training_tradeoff requires key `out`".into()));
            }
        } else if self.checkpoint.is_none() {
            return Err(Error::Config(format!(
                "{} requires key `checkpoint`",
                self.experiment
            )));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| {
            if self.experiment == "seed_stability" {
                (0..5).collect()
            } else {
                vec![0]
            }
        })
    }

    /// `(param, values)` series to evaluate.
    pub fn series(&self) -> Result<Vec<(String, Vec<f64>)>> {
        let series = default_series(&self.experiment)?;
        Ok(match &self.axis {
            Some(axis) => vec![(axis.param.clone(), axis.values.clone())],
            None => series,
        })
    }
}

fn steps(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Default axes, scaled to desk size: scale 0.5-2, shake 0-50% of the patch
/// side, dropout 0-80%.
fn default_series(experiment: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let one = |p: &str, v: Vec<f64>| vec![(p.to_string(), v)];
    Ok(match experiment {
        "scale_sweep" => one(
            "scale",
            vec![0.5, 0.625, 0.75, 0.875, 1.0, 1.25, 1.5, 1.75, 2.0],
        ),
        "dropout_sweep" => one("dropout", steps(0.0, 0.8, 9)),
        "shake_sweep" => one("shake", steps(0.0, 0.5, 6)),
        "shake_dropout" | "shake_scale" | "dropout_scale" => one("intensity", steps(0.0, 1.0, 6)),
        "grid_density" => one("n", vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 16.0]),
        "dropout_vs_rescale" => {
            let k = vec![0.0, 1.0, 2.0, 4.0, 8.0, 12.0, 16.0];
            vec![("drop_blocks".into(), k.clone()), ("rescale_blocks".into(), k)]
        }
        "redundancy" => one("redundant", vec![0.0, 8.0, 16.0, 32.0, 64.0, 128.0]),
        "sampler_curve" => vec![
            ("grid".into(), vec![16.0, 36.0, 64.0, 100.0, 144.0]),
            ("central".into(), vec![16.0, 34.0, 64.0, 100.0, 148.0]),
            ("edge".into(), vec![16.0, 34.0, 64.0, 100.0, 148.0]),
        ],
        "training_tradeoff" => {
            let f = vec![0.0, 0.15, 0.3, 0.7, 1.0];
            vec![("clean".into(), f.clone()), ("perturbed".into(), f)]
        }
        "seed_stability" => one("intensity", vec![1.0]),
        other => {
            return Err(Error::Config(format!(
                "unknown experiment {other:?}; known: {}",
                EXPERIMENTS.join(", ")
            )))
        }
    })
}

/// Scale `U[1 - t/2, 1 + t]`, shake `t/2`, dropout `t/2`: at `t = 1` all
/// three perturbations at once.
pub fn combined_perturbation(t: f64) -> PerturbConfig {
    PerturbConfig {
        scale_min: 1.0 - 0.5 * t,
        scale_max: 1.0 + t,
        shake: Shake(0.5 * t),
        dropout: Dropout::Fraction(0.5 * t),
    }
}

fn as_count(value: f64, what: &str) -> Result<usize> {
    if value < 0.0 || value.fract() != 0.0 {
        return Err(Error::Config(format!("{what} must be a whole number, got {value}")));
    }
    Ok(value as usize)
}

/// Evaluation path for one axis point.
pub fn point_spec(experiment: &str, base: &Sampler, param: &str, v: f64) -> Result<EvalSpec> {
    let id = PerturbConfig::identity();
    let perturbed = |p: PerturbConfig| Ok(EvalSpec::new(base.clone(), p));
    match (experiment, param) {
        ("scale_sweep", _) => perturbed(PerturbConfig { scale_min: v, scale_max: v, ..id }),
        ("dropout_sweep", _) => perturbed(PerturbConfig { dropout: Dropout::Fraction(v), ..id }),
        ("shake_sweep", _) => perturbed(PerturbConfig { shake: Shake(v), ..id }),
        ("shake_dropout", _) => perturbed(PerturbConfig {
            shake: Shake(0.5 * v),
            dropout: Dropout::Fraction(0.8 * v),
            ..id
        }),
        ("shake_scale", _) => perturbed(PerturbConfig {
            scale_min: 1.0 - 0.5 * v,
            scale_max: 1.0 + v,
            shake: Shake(0.5 * v),
            ..id
        }),
        ("dropout_scale", _) => perturbed(PerturbConfig {
            scale_min: 1.0 - 0.5 * v,
            scale_max: 1.0 + v,
            dropout: Dropout::Fraction(0.8 * v),
            ..id
        }),
        ("grid_density", _) => Ok(EvalSpec::new(
            Sampler::Density { n: as_count(v, "n")? },
            id,
        )),
        ("dropout_vs_rescale", p) => {
            let blocks = as_count(v, "block count")?;
            let t = if p == "drop_blocks" {
                SetTransform::BlockDrop { blocks }
            } else {
                SetTransform::BlockRescale { blocks }
            };
            Ok(EvalSpec::new(Sampler::Grid, id).with_transform(t))
        }
        ("redundancy", _) => Ok(EvalSpec::new(Sampler::Grid, id).with_transform(
            SetTransform::Redundant {
                count: as_count(v, "redundant count")?,
                s_min: 0.5,
                s_max: 2.0,
            },
        )),
        ("sampler_curve", p) => {
            let tokens = as_count(v, "token count")?;
            let sampler = match p {
                "grid" => Sampler::Grid.with_tokens(tokens)?,
                "central" => Sampler::Central {
                    tokens,
                    params: CentralParams::default(),
                },
                _ => Sampler::Edge {
                    tokens,
                    params: EdgeParams::default(),
                },
            };
            Ok(EvalSpec::new(sampler, id))
        }
        ("training_tradeoff", "clean") => Ok(EvalSpec::default()),
        ("training_tradeoff", _) => Ok(EvalSpec::new(Sampler::Grid, combined_perturbation(1.0))),
        ("seed_stability", _) => perturbed(combined_perturbation(v)),
        (other, _) => Err(Error::Config(format!("unknown experiment {other:?}"))),
    }
}

/// Seed for one `(seed, axis point)`; sample `i` then uses
/// `Rng::derive(point_seed, i)`.
pub fn point_seed(seed: u64, experiment: &str, param: &str, value: f64) -> u64 {
    hash_words(&[seed, hash_str(experiment), hash_str(param), value.to_bits()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub experiment: String,
    pub seed: u64,
    pub param: String,
    pub value: f64,
    /// Mean token count per image.
    pub tokens: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub param: String,
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub metadata: BTreeMap<String, String>,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SeriesSummary>,
}

/// Population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn summarize(rows: &[SweepRow]) -> Vec<SeriesSummary> {
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.param.clone(), r.value.to_bits()))
            .or_default()
            .push(r.accuracy);
    }
    let mut out: Vec<SeriesSummary> = groups
        .into_iter()
        .map(|((param, bits), acc)| {
            let (mean, std) = mean_std(&acc);
            SeriesSummary {
                param,
                value: f64::from_bits(bits),
                mean,
                std,
                seeds: acc.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.param.cmp(&b.param).then(a.value.total_cmp(&b.value)));
    out
}

fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        a.param
            .cmp(&b.param)
            .then(a.value.total_cmp(&b.value))
            .then(a.seed.cmp(&b.seed))
    });
}

fn metadata(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert(
        "rng".into(),
        "sample i uses derive(hash(seed, experiment, param, value), i)".into(),
    );
    let note = match cfg.experiment.as_str() {
        "scale_sweep" => "every grid patch gets scale = value",
        "shake_dropout" => "intensity t: shake 0.5 t, dropout 0.8 t",
        "shake_scale" => "intensity t: scale U[1 - 0.5 t, 1 + t], shake 0.5 t",
        "dropout_scale" => "intensity t: scale U[1 - 0.5 t, 1 + t], dropout 0.8 t",
        "grid_density" => "n x n tiling, tokens = n^2",
        "dropout_vs_rescale" => "k random 2x2 blocks of the native grid, each dropped to one patch or merged into one patch of twice the scale",
        "redundancy" => "native full grid of the configured image (not a fixed 16x16 grid) plus k random patches with scale U[0.5, 2] inside the image",
        "sampler_curve" => "grid uses an n x n density grid; central and edge use default quadtree parameters",
        "training_tradeoff" => "clean = native grid; perturbed = scale U[0.5, 2], shake 0.5, dropout 0.5",
        "seed_stability" => "intensity t: scale U[1 - 0.5 t, 1 + t], shake 0.5 t, dropout 0.5 t",
        _ => "",
    };
    if !note.is_empty() {
        m.insert("axis".into(), note.into());
    }
    m
}

/// Run a registered experiment and write `<out>/<experiment>.csv` and
/// `.json` when `out` is set.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Exec) -> Result<SweepResult> {
    cfg.validate()?;
    let result = match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, exec)?,
        Precision::F64 => run_typed::<f64>(cfg, exec)?,
    };
    if let Some(out) = &cfg.out {
        write_sweep(&result, out)?;
    }
    Ok(result)
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, exec: Exec) -> Result<SweepResult> {
    let series = cfg.series()?;
    let seeds = cfg.seeds();
    let eval_set = cfg.data.eval_set()?;
    if eval_set.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }

    // one model per series point for training_tradeoff, otherwise one model
    let models: BTreeMap<u64, ModelParams<T>> = if cfg.experiment == "training_tradeoff" {
        let mut fractions: Vec<f64> = series.iter().flat_map(|(_, v)| v.clone()).collect();
        fractions.sort_by(f64::total_cmp);
        fractions.dedup();
        let mut m = BTreeMap::new();
        for f in fractions {
            m.insert(f.to_bits(), tradeoff_model::<T>(cfg, f, exec)?);
        }
        m
    } else {
        let path = cfg.checkpoint.as_ref().expect("validated");
        let ck = load_checkpoint(path).map_err(|e| Error::Config(format!("bad checkpoint: {e}")))?;
        BTreeMap::from([(0, ck.params::<T>()?)])
    };

    let mut jobs = Vec::new();
    for (param, values) in &series {
        for &v in values {
            for &seed in &seeds {
                jobs.push((param.clone(), v, seed));
            }
        }
    }
    let outcomes = exec.map(&jobs, |_, (param, v, seed)| -> Result<SweepRow> {
        let params = if cfg.experiment == "training_tradeoff" {
            &models[&v.to_bits()]
        } else {
            &models[&0]
        };
        let spec = point_spec(&cfg.experiment, &cfg.sampler, param, *v)?;
        let report = evaluate_detailed(
            params,
            &eval_set,
            &spec,
            point_seed(*seed, &cfg.experiment, param, *v),
            exec,
        )?;
        Ok(SweepRow {
            experiment: cfg.experiment.clone(),
            seed: *seed,
            param: param.clone(),
            value: *v,
            tokens: report.mean_tokens,
            accuracy: report.accuracy,
        })
    });
    let mut rows = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    sort_rows(&mut rows);
    Ok(SweepResult {
        experiment: cfg.experiment.clone(),
        config: cfg.clone(),
        metadata: metadata(cfg),
        summary: summarize(&rows),
        rows,
    })
}

/// Train (or reuse a finished checkpoint for) one elastic fraction.
fn tradeoff_model<T: Scalar>(cfg: &ExperimentConfig, fraction: f64, exec: Exec) -> Result<ModelParams<T>> {
    let setup = cfg.training.as_ref().expect("validated");
    let out = cfg.out.as_ref().expect("validated");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let train_cfg = TrainConfig {
        elastic_fraction: fraction,
        ..setup.train
    };
    let path = out.join(format!("tradeoff_{fraction}.ckpt"));
    let (train_set, val_set) = cfg.data.splits()?;
    let state = match resume_state::<T>(&path)? {
        Some(s) if s.params.config == setup.model => s,
        _ => TrainState::new(setup.model, &train_cfg)?,
    };
    if state.epochs_done >= train_cfg.epochs {
        return Ok(state.params);
    }
    let val = (!val_set.is_empty()).then_some(&val_set);
    let state = train_from(state, &train_set, val, &train_cfg, exec, |s| {
        checkpoint_epoch(s, &path)
    })?;
    Ok(state.params)
}

fn checkpoint_epoch<T: Scalar>(state: &TrainState<T>, path: &Path) -> ControlFlow<()> {
    let ck = Checkpoint::with_state(&state.params, &state.opt, state.epochs_done);
    match save_checkpoint(&ck, path) {
        Ok(()) => ControlFlow::Continue(()),
        Err(_) => ControlFlow::Break(()),
    }
}

fn resume_state<T: Scalar>(path: &Path) -> Result<Option<TrainState<T>>> {
    if !path.exists() {
        return Ok(None);
    }
    let ck = load_checkpoint(path)?;
    let params = ck.params::<T>()?;
    Ok(ck.train_state(&params)?.map(|(opt, epochs_done)| TrainState {
        params,
        opt,
        epochs_done,
        history: Vec::new(),
    }))
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(e: csv::Error, path: &Path) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    }
}

/// Parse a sweep CSV, rejecting any header other than
/// `experiment,seed,param,value,tokens,accuracy`.
pub fn read_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header = rd.headers()?.clone();
    let expected = ["experiment", "seed", "param", "value", "tokens", "accuracy"];
    if header.iter().ne(expected) {
        return Err(Error::parse(0, format!("unexpected CSV header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_sweep(result: &SweepResult, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_sweep_csv(&result.rows, &out.join(format!("{}.csv", result.experiment)))?;
    let json_path = out.join(format!("{}.json", result.experiment));
    let json = serde_json::to_string_pretty(result)?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
}

/// Parse a JSON config file. Errors carry the file name and serde's line
/// and key diagnostics.
pub fn load_config<T: DeserializeOwned>(path: &Path, overrides: &[(&str, Value)]) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parse JSON text, then set each dotted key in `overrides` (flags take
/// precedence over file values, which take precedence over defaults).
pub fn parse_config<T: DeserializeOwned>(text: &str, overrides: &[(&str, Value)]) -> Result<T> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    for (key, v) in overrides {
        set_path(&mut value, key, v.clone())?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot set `{key}`: parent is not an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), v);
            return Ok(());
        }
        node = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCommand {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out: PathBuf,
    /// Continue from this checkpoint's weights and optimizer state.
    #[serde(default)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation; resume later to
    /// finish the same trajectory.
    #[serde(default)]
    pub stop_after: Option<usize>,
    #[serde(default)]
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub epochs_done: usize,
    pub final_val_acc: Option<f64>,
}

/// Train per `cmd` and write `<out>/model.ckpt` (refreshed every epoch) and
/// `<out>/history.csv`.
pub fn train_cmd(
    cmd: &TrainCommand,
    exec: Exec,
    on_epoch: impl FnMut(&crate::model::EpochStats),
) -> Result<TrainOutcome> {
    match cmd.precision {
        Precision::F32 => train_typed::<f32>(cmd, exec, on_epoch),
        Precision::F64 => train_typed::<f64>(cmd, exec, on_epoch),
    }
}

fn train_typed<T: Scalar>(
    cmd: &TrainCommand,
    exec: Exec,
    mut on_epoch: impl FnMut(&crate::model::EpochStats),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(&cmd.out).map_err(|e| Error::io(&cmd.out, e))?;
    let (train_set, val_set) = cmd.data.splits()?;
    let state = match &cmd.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let params = ck.params::<T>()?;
            let (opt, epochs_done) = ck.train_state(&params)?.ok_or_else(|| {
                Error::Config(format!("{} has no optimizer state to resume", path.display()))
            })?;
            TrainState {
                params,
                opt,
                epochs_done,
                history: Vec::new(),
            }
        }
        None => TrainState::new(cmd.model, &cmd.train)?,
    };
    let ck_path = cmd.out.join("model.ckpt");
    let val = (!val_set.is_empty()).then_some(&val_set);
    let mut save_error = None;
    let budget = cmd.stop_after.unwrap_or(usize::MAX);
    let state = train_from(state, &train_set, val, &cmd.train, exec, |s| {
        on_epoch(s.history.last().expect("epoch recorded"));
        let ck = Checkpoint::with_state(&s.params, &s.opt, s.epochs_done);
        if let Err(e) = save_checkpoint(&ck, &ck_path) {
            save_error = Some(e);
            return ControlFlow::Break(());
        }
        if s.history.len() >= budget {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    if let Some(e) = save_error {
        return Err(e);
    }
    // a resumed run that was already complete still leaves a checkpoint
    save_checkpoint(
        &Checkpoint::with_state(&state.params, &state.opt, state.epochs_done),
        &ck_path,
    )?;
    let history = cmd.out.join("history.csv");
    write_history(&state.history, &history)?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        history,
        epochs_done: state.epochs_done,
        final_val_acc: state.history.last().map(|s| s.val_acc).filter(|v| !v.is_nan()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCommand {
    pub checkpoint: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

pub fn eval_cmd(cmd: &EvalCommand, exec: Exec) -> Result<EvalReport> {
    let ck = load_checkpoint(&cmd.checkpoint)
        .map_err(|e| Error::Config(format!("bad checkpoint: {e}")))?;
    let data = cmd.data.eval_set()?;
    match cmd.precision {
        Precision::F32 => evaluate_detailed(&ck.params::<f32>()?, &data, &cmd.eval, cmd.seed, exec),
        Precision::F64 => evaluate_detailed(&ck.params::<f64>()?, &data, &cmd.eval, cmd.seed, exec),
    }
}

const BORDER: [f64; 3] = [1.0, 0.0, 0.0];
const OVERLAP_TINT: [f64; 3] = [1.0, 0.85, 0.0];
const TINT_ALPHA: f64 = 0.4;

/// RGB rendering of `set` over `img`: pixels covered by two or more
/// footprints are tinted, footprint borders are red.
pub fn render_patches(img: &Image, set: &PatchSet) -> Result<Image> {
    if img.spec.width != set.image.width || img.spec.height != set.image.height {
        return Err(Error::DimensionMismatch(format!(
            "image is {}x{}, patch set expects {}x{}",
            img.spec.width, img.spec.height, set.image.width, set.image.height
        )));
    }
    let spec = ImageSpec::new(img.spec.width, img.spec.height, 3)?;
    let mut out = Image::filled(spec, 0.0);
    let gray = (img.spec.channels == 1).then(|| img.plane(0));
    for y in 0..spec.height {
        for x in 0..spec.width {
            for c in 0..3 {
                let v = match gray {
                    Some(g) => g[y * spec.width + x],
                    None => img.get(c, x, y),
                };
                out.set(c, x, y, v);
            }
        }
    }
    let coverage = rasterize_coverage(set);
    for y in 0..spec.height {
        for x in 0..spec.width {
            if coverage.get(x, y) >= 2 {
                for (c, tint) in OVERLAP_TINT.iter().enumerate() {
                    let v = out.get(c, x, y);
                    out.set(c, x, y, (1.0 - TINT_ALPHA) * v + TINT_ALPHA * tint);
                }
            }
        }
    }
    for p in &set.patches {
        let (x0, x1, y0, y1) = p.pixel_bounds(set.r, &set.image);
        if x0 >= x1 || y0 >= y1 {
            continue;
        }
        for y in y0..y1 {
            for x in x0..x1 {
                if x == x0 || x == x1 - 1 || y == y0 || y == y1 - 1 {
                    for (c, v) in BORDER.iter().enumerate() {
                        out.set(c, x, y, *v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Load an image, sample and perturb it per `spec`, and save the rendering
/// (PNG for a `.png` path, PPM otherwise).
pub fn visualize_patches(
    image_path: &Path,
    spec: &EvalSpec,
    r: usize,
    seed: u64,
    out_path: &Path,
) -> Result<PatchSet> {
    let img = load_image(image_path)?;
    let set = spec.patch_set(&img, r, &mut Rng::seed_from_u64(seed))?;
    save_image(&render_patches(&img, &set)?, out_path)?;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualizeCommand {
    pub image: PathBuf,
    pub r: usize,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
}

pub fn visualize_cmd(cmd: &VisualizeCommand) -> Result<PatchSet> {
    visualize_patches(&cmd.image, &cmd.eval, cmd.r, cmd.seed, &cmd.out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataCommand {
    pub dataset: crate::data::DatasetSpec,
    pub out: PathBuf,
}

/// Render the synthetic dataset and store it in the binary cache format.
pub fn gen_data_cmd(cmd: &GenDataCommand, exec: Exec) -> Result<crate::data::Dataset> {
    let ds = crate::data::synth_shapes_with(&cmd.dataset, exec)?;
    crate::data::save_dataset(&ds, &cmd.out)?;
    Ok(ds)
}
