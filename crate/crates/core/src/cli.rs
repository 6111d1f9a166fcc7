//! Command-line driver: config loading, overrides and the five commands.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    load_cohort_csv, make_supervised_pairs, save_cohort_csv, simulate_cohort, Cohort, SimConfig, Target, DEFAULT_HORIZON,
    DEFAULT_MATCH_TOL, DEFAULT_VARIANCE_FRACTION,
};
use crate::error::{Error, Result};
use crate::eval::{compare_models, data_efficiency_probe, Candidate, EfficiencyReport, EvalConfig, ExperimentResult};
use crate::models::{train_on_pairs, CohortModel, ModelSpec};
use crate::net::FeatureNet;
use crate::ppl::{grid_inputs, simulate_trajectories, NeuroProgram};

pub const MODEL_FORMAT: &str = "neurogp-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub horizon: f64,
    pub match_tol: f64,
    pub variance_fraction: f64,
    pub targets: Vec<Target>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            horizon: DEFAULT_HORIZON,
            match_tol: DEFAULT_MATCH_TOL,
            variance_fraction: DEFAULT_VARIANCE_FRACTION,
            targets: Target::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub n_folds: usize,
    pub models: Vec<ModelSpec>,
    /// Adds a model that predicts the held-out truth.
    pub include_oracle: bool,
    /// When set, also reports MAE degradation with this fraction of training patients.
    pub efficiency_fraction: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            n_folds: 10,
            models: vec![ModelSpec::exact_gp(), ModelSpec::dkl(), ModelSpec::pp_dkl(), ModelSpec::pp_dkl_unconstrained()],
            include_oracle: false,
            efficiency_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    /// Patients to predict; empty means all.
    pub patients: Vec<String>,
    /// Prediction times in months after each patient's last visit.
    pub offsets: Vec<f64>,
    /// Trajectory samples per patient; zero disables the ensemble output.
    pub trajectories: usize,
    /// Draw function values jointly along the grid.
    pub joint: bool,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig { patients: Vec::new(), offsets: vec![0.0, 6.0, 12.0, 18.0, 24.0], trajectories: 0, joint: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub cohort: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub loss_trace: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub embedding: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub simulation: SimConfig,
    pub model: ModelSpec,
    pub task: TaskConfig,
    pub evaluation: EvaluationConfig,
    pub prediction: PredictionConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            simulation: SimConfig::default(),
            model: ModelSpec::pp_dkl(),
            task: TaskConfig::default(),
            evaluation: EvaluationConfig::default(),
            prediction: PredictionConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn preset_value(v: &Value) -> Result<Option<Value>> {
    match v {
        Value::String(name) => Ok(Some(serde_json::to_value(ModelSpec::preset(name)?)?)),
        _ => Ok(None),
    }
}

/// Replaces preset names ("pp_dkl", "exact_gp", ...) by their full specs.
fn expand_presets(cfg: &mut Value) -> Result<()> {
    if let Some(m) = cfg.get_mut("model") {
        if let Some(full) = preset_value(m)? {
            *m = full;
        }
    }
    if let Some(Value::Array(ms)) = cfg.pointer_mut("/evaluation/models") {
        for m in ms {
            if let Some(full) = preset_value(m)? {
                *m = full;
            }
        }
    }
    Ok(())
}

/// Recursive object merge; arrays and scalars in `top` replace those in `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Applies `key.path=value`; the value is read as JSON when it parses, else as a string.
fn apply_override(cfg: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override `{assignment}` is not KEY=VALUE")))?;
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidConfig(format!("bad override key `{key}`")));
    }
    if parts == ["model"] || (parts.len() == 3 && parts[..2] == ["evaluation", "models"]) {
        if let Some(full) = preset_value(&value)? {
            value = full;
        }
    }
    let mut node = cfg;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| Error::InvalidConfig(format!("`{part}` in `{key}` is not an index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| Error::InvalidConfig(format!("index {idx} out of range ({len}) in `{key}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Null => {
                *node = Value::Object(Default::default());
                let Value::Object(map) = node else { unreachable!() };
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(Error::InvalidConfig(format!("`{key}` descends into a scalar"))),
        };
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then the config file, then `overrides`, then the seed flag.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
        let mut cfg = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
            let mut file: Value = serde_json::from_str(&text)?;
            expand_presets(&mut file)?;
            merge(&mut cfg, file);
        }
        for o in overrides {
            apply_override(&mut cfg, o)?;
        }
        let mut run: RunConfig = serde_json::from_value(cfg)?;
        if let Some(s) = seed {
            run.seed = s;
        }
        Ok(run)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_folds: self.evaluation.n_folds,
            horizon: self.task.horizon,
            match_tol: self.task.match_tol,
            variance_fraction: self.task.variance_fraction,
        }
    }
}

/// Versioned, self-describing model bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub biomarker_names: Vec<String>,
    pub match_tol: f64,
    pub model: CohortModel,
}

impl ModelFile {
    pub fn new(model: CohortModel, biomarker_names: Vec<String>, match_tol: f64, seed: u64) -> Self {
        ModelFile { format: MODEL_FORMAT.into(), version: MODEL_VERSION, seed, biomarker_names, match_tol, model }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text)?;
        match (v.get("format").and_then(Value::as_str), v.get("version").and_then(Value::as_u64)) {
            (Some(MODEL_FORMAT), Some(ver)) if ver == MODEL_VERSION as u64 => Ok(serde_json::from_value(v)?),
            (Some(MODEL_FORMAT), ver) => Err(Error::Schema(format!("unsupported model file version {ver:?}"))),
            _ => Err(Error::Schema(format!("{} is not a model file", path.display()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub experiment: ExperimentResult,
    pub efficiency: Option<Vec<EfficiencyReport>>,
}

#[derive(Parser, Debug)]
#[command(name = "neurogp", version, about = "Probabilistic disease-progression models on longitudinal cohorts")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for all randomness; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config override, e.g. `model.optimizer.iterations=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a cohort and write it as long-format CSV.
    Simulate,
    /// Train per-target models on a cohort.
    Train,
    /// Predict patients' scores from a trained model.
    Predict {
        /// Also sample this many trajectories per patient.
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Cross-validate and compare models.
    Evaluate,
    /// Export learned two-dimensional feature embeddings.
    Embed,
}

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::InvalidConfig(format!("paths.{key} is required for this command")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::InvalidConfig(format!("cannot write {}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

fn load_cohort(cfg: &RunConfig) -> Result<Cohort> {
    load_cohort_csv(need(&cfg.paths.cohort, "cohort")?)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<String> {
    let path = need(&cfg.paths.cohort, "cohort")?;
    let cohort = simulate_cohort(&cfg.simulation, cfg.seed)?;
    save_cohort_csv(&cohort, path)?;
    Ok(format!("simulated {} patients to {}", cohort.patients.len(), path.display()))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let model_path = need(&cfg.paths.model, "model")?;
    let cohort = load_cohort(cfg)?;
    let pairs = make_supervised_pairs(&cohort, cfg.task.horizon, cfg.task.match_tol)?;
    let model = train_on_pairs(&cfg.model, &pairs, cohort.k(), cfg.task.horizon, cfg.task.variance_fraction, &cfg.task.targets, cfg.seed)?;
    // Conditioning once surfaces numerical problems at train time.
    model.fit()?;
    let file = ModelFile::new(model, cohort.biomarker_names.clone(), cfg.task.match_tol, cfg.seed);
    file.save(model_path)?;
    let trace_path = cfg.paths.loss_trace.clone().unwrap_or_else(|| {
        let mut p = model_path.as_os_str().to_owned();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let mut w = csv::Writer::from_writer(create(&trace_path)?);
    w.write_record(["target", "iteration", "loss"]).map_err(csv_err)?;
    for t in &file.model.targets {
        for (i, l) in t.loss_trace.iter().enumerate() {
            w.write_record([t.target.name().to_string(), i.to_string(), l.to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(format!("trained {} on {} pairs; model written to {}", cfg.model.name, pairs.len(), model_path.display()))
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<String> {
    let file = ModelFile::load(need(&cfg.paths.model, "model")?)?;
    let out_path = need(&cfg.paths.predictions, "predictions")?;
    let cohort = load_cohort(cfg)?;
    if cohort.k() != file.model.pipeline.k {
        return Err(Error::DimensionMismatch(format!("model expects {} biomarkers, cohort has {}", file.model.pipeline.k, cohort.k())));
    }
    let patients: Vec<_> = if cfg.prediction.patients.is_empty() {
        cohort.patients.iter().collect()
    } else {
        cfg.prediction
            .patients
            .iter()
            .map(|id| cohort.patient(id).ok_or_else(|| Error::UnknownReference(format!("patient {id}"))))
            .collect::<Result<_>>()?
    };
    if cfg.prediction.offsets.is_empty() {
        return Err(Error::InvalidConfig("prediction.offsets is empty".into()));
    }
    let fitted = file.model.fit()?;
    let horizon = file.model.horizon;
    let mut w = csv::Writer::from_writer(create(out_path)?);
    w.write_record(["patient_id", "time", "target", "mean", "latent_var", "obs_var", "aleatoric_var", "epistemic_var"])
        .map_err(csv_err)?;
    let mut traj = match cfg.prediction.trajectories {
        0 => None,
        _ => Some(csv::Writer::from_writer(create(need(&cfg.paths.trajectories, "trajectories")?)?)),
    };
    if let Some(t) = traj.as_mut() {
        t.write_record(["patient_id", "sample_id", "time", "target", "value", "component"]).map_err(csv_err)?;
    }
    for (pi, p) in patients.iter().enumerate() {
        let last = p.visits.last().ok_or(Error::EmptyPatient)?.time_months;
        let times: Vec<f64> = cfg.prediction.offsets.iter().map(|o| last + o).collect();
        let x = grid_inputs(&fitted.pipeline, p, horizon, &times)?;
        for m in &fitted.targets {
            let pred = m.predict(&x)?;
            let noise = m.noise_var();
            for (i, t) in times.iter().enumerate() {
                w.write_record([
                    p.patient_id.clone(),
                    t.to_string(),
                    m.target.name().to_string(),
                    pred.mean[i].to_string(),
                    pred.latent_var[i].to_string(),
                    pred.obs_var[i].to_string(),
                    noise.to_string(),
                    pred.latent_var[i].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        if let Some(tw) = traj.as_mut() {
            let program = NeuroProgram::new(&fitted.targets, &fitted.pipeline, p, horizon, &times, cfg.prediction.joint)?;
            let ens = simulate_trajectories(&program, cfg.prediction.trajectories, cfg.seed.wrapping_add(pi as u64))?;
            for (ti, target) in ens.targets.iter().enumerate() {
                let total = ens.values(ti);
                for s in 0..ens.n_samples() {
                    for (g, time) in ens.times.iter().enumerate() {
                        for (name, v) in [("function", ens.function[ti][(s, g)]), ("noise", ens.noise[ti][(s, g)]), ("total", total[(s, g)])] {
                            tw.write_record([p.patient_id.clone(), s.to_string(), time.to_string(), target.name().to_string(), v.to_string(), name.to_string()])
                                .map_err(csv_err)?;
                        }
                    }
                }
            }
        }
    }
    w.flush()?;
    if let Some(mut t) = traj {
        t.flush()?;
    }
    Ok(format!("predicted {} patients to {}", patients.len(), out_path.display()))
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(String, EvaluationReport)> {
    let cohort = load_cohort(cfg)?;
    let mut candidates: Vec<Candidate> = cfg.evaluation.models.iter().cloned().map(Candidate::Model).collect();
    if cfg.evaluation.include_oracle {
        candidates.push(Candidate::Oracle);
    }
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("evaluation.models is empty".into()));
    }
    let ecfg = cfg.eval_config();
    let experiment = compare_models(&candidates, &cohort, &ecfg, cfg.seed)?;
    let efficiency = match cfg.evaluation.efficiency_fraction {
        Some(f) => Some(data_efficiency_probe(&candidates[0], &cohort, &ecfg, f, cfg.seed)?),
        None => None,
    };
    let report = EvaluationReport { experiment, efficiency };
    let table = report.experiment.table();
    if let Some(p) = &cfg.paths.report {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &report)?;
        w.flush()?;
    }
    if let Some(p) = &cfg.paths.table {
        let mut w = create(p)?;
        w.write_all(table.as_bytes())?;
        w.flush()?;
    }
    Ok((table, report))
}

/// Network features of `x`; the embedding plotted per input.
pub fn embed_inputs(net: &FeatureNet, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    net.features(x)
}

pub fn cmd_embed(cfg: &RunConfig) -> Result<String> {
    let file = ModelFile::load(need(&cfg.paths.model, "model")?)?;
    let out_path = need(&cfg.paths.embedding, "embedding")?;
    let with_net: Vec<_> = file.model.targets.iter().filter(|t| t.net().is_some()).collect();
    if with_net.is_empty() {
        return Err(Error::InvalidConfig(format!("model {} has no feature network", file.model.spec.name)));
    }
    let mut w = csv::Writer::from_writer(create(out_path)?);
    w.write_record(["target", "input_id", "embed_x", "embed_y", "normalized_target"]).map_err(csv_err)?;
    let mut rows = 0;
    for t in with_net {
        let e = embed_inputs(t.net().unwrap(), &t.x_train)?;
        if e.ncols() < 2 {
            return Err(Error::DimensionMismatch(format!("embedding has {} columns", e.ncols())));
        }
        for i in 0..e.nrows() {
            w.write_record([t.target.name().to_string(), i.to_string(), e[(i, 0)].to_string(), e[(i, 1)].to_string(), t.y_train[i].to_string()])
                .map_err(csv_err)?;
        }
        rows += e.nrows();
    }
    w.flush()?;
    Ok(format!("wrote {rows} embedded inputs to {}", out_path.display()))
}

/// Runs the command line; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = RunConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed).and_then(|cfg| match cli.command {
        Command::Simulate => cmd_simulate(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Predict { trajectories } => {
            let mut cfg = cfg;
            if let Some(n) = trajectories {
                cfg.prediction.trajectories = n;
            }
            cmd_predict(&cfg)
        }
        Command::Evaluate => cmd_evaluate(&cfg).map(|(table, _)| table),
        Command::Embed => cmd_embed(&cfg),
    });
    match result {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
