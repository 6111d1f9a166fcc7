//! A small trace-based probabilistic-program runtime and the per-patient
//! progression program built on fitted score models.

use std::io::Write;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_history, InputPipeline, PatientRecord, Target};
use crate::error::{Error, Result};
use crate::models::FittedTarget;
use crate::numerics::{cholesky_psd, SymMatrix, DEFAULT_JITTER_STEPS};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dist {
    Normal { mean: f64, sd: f64 },
    Uniform { low: f64, high: f64 },
}

impl Dist {
    pub fn normal(mean: f64, sd: f64) -> Self {
        Dist::Normal { mean, sd }
    }

    pub fn uniform(low: f64, high: f64) -> Self {
        Dist::Uniform { low, high }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dist::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd > 0.0,
            Dist::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidHyperparameter(format!("{self:?}")))
        }
    }

    pub fn log_prob(&self, x: f64) -> f64 {
        match *self {
            Dist::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - LN_SQRT_2PI
            }
            Dist::Uniform { low, high } => {
                if (low..=high).contains(&x) {
                    -(high - low).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            Dist::Uniform { low, high } => rng.gen_range(low..high),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub value: f64,
    pub log_prob: f64,
}

/// One program execution: random choices in execution order plus observations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub choices: IndexMap<String, Choice>,
    pub observations: IndexMap<String, Choice>,
    pub obs_log_lik: f64,
    pub total_log_prob: f64,
}

impl Trace {
    pub fn value(&self, address: &str) -> Option<f64> {
        self.choices.get(address).map(|c| c.value)
    }

    /// The sampled values, suitable for replay.
    pub fn values(&self) -> IndexMap<String, f64> {
        self.choices.iter().map(|(k, c)| (k.clone(), c.value)).collect()
    }

    fn claim(&self, address: &str) -> Result<()> {
        if self.choices.contains_key(address) || self.observations.contains_key(address) {
            Err(Error::AddressCollision(address.to_string()))
        } else {
            Ok(())
        }
    }
}

enum Mode<'a> {
    Forward(ChaCha8Rng),
    Replay(&'a IndexMap<String, f64>),
}

/// Handle a program uses to make random choices and condition on data.
pub struct Runtime<'a> {
    mode: Mode<'a>,
    overrides: Option<&'a IndexMap<String, f64>>,
    trace: Trace,
}

impl<'a> Runtime<'a> {
    fn forward(rng: ChaCha8Rng, overrides: Option<&'a IndexMap<String, f64>>) -> Self {
        Runtime { mode: Mode::Forward(rng), overrides, trace: Trace::default() }
    }

    fn replay(choices: &'a IndexMap<String, f64>, overrides: Option<&'a IndexMap<String, f64>>) -> Self {
        Runtime { mode: Mode::Replay(choices), overrides, trace: Trace::default() }
    }

    pub fn sample(&mut self, address: impl Into<String>, dist: Dist) -> Result<f64> {
        let address = address.into();
        dist.validate()?;
        self.trace.claim(&address)?;
        let value = match &mut self.mode {
            Mode::Forward(rng) => dist.sample(rng),
            Mode::Replay(pinned) => *pinned.get(&address).ok_or_else(|| Error::MissingChoice(address.clone()))?,
        };
        let log_prob = dist.log_prob(value);
        self.trace.total_log_prob += log_prob;
        self.trace.choices.insert(address, Choice { value, log_prob });
        Ok(value)
    }

    /// Scores `value` under `dist`; a supplied observation for this address
    /// takes precedence over `value`.
    pub fn observe(&mut self, address: impl Into<String>, dist: Dist, value: f64) -> Result<()> {
        let address = address.into();
        dist.validate()?;
        self.trace.claim(&address)?;
        let value = self.overrides.and_then(|o| o.get(&address).copied()).unwrap_or(value);
        let log_prob = dist.log_prob(value);
        self.trace.obs_log_lik += log_prob;
        self.trace.total_log_prob += log_prob;
        self.trace.observations.insert(address, Choice { value, log_prob });
        Ok(())
    }
}

pub trait Program: Sync {
    fn run(&self, rt: &mut Runtime<'_>) -> Result<()>;
}

impl<F> Program for F
where
    F: Fn(&mut Runtime<'_>) -> Result<()> + Sync,
{
    fn run(&self, rt: &mut Runtime<'_>) -> Result<()> {
        self(rt)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Executes the program with every choice drawn from its prior.
pub fn run_forward<P: Program + ?Sized>(program: &P, seed: u64) -> Result<Trace> {
    run_forward_observed(program, None, stream_rng(seed, 0))
}

fn run_forward_observed<P: Program + ?Sized>(
    program: &P,
    observations: Option<&IndexMap<String, f64>>,
    rng: ChaCha8Rng,
) -> Result<Trace> {
    let mut rt = Runtime::forward(rng, observations);
    program.run(&mut rt)?;
    Ok(rt.trace)
}

/// Re-executes the program with pinned choices.
pub fn replay<P: Program + ?Sized>(
    program: &P,
    choices: &IndexMap<String, f64>,
    observations: Option<&IndexMap<String, f64>>,
) -> Result<Trace> {
    let mut rt = Runtime::replay(choices, observations);
    program.run(&mut rt)?;
    Ok(rt.trace)
}

/// Joint log-probability of pinned choices and observations.
pub fn trace_log_prob<P: Program + ?Sized>(
    program: &P,
    choices: &IndexMap<String, f64>,
    observations: Option<&IndexMap<String, f64>>,
) -> Result<f64> {
    Ok(replay(program, choices, observations)?.total_log_prob)
}

#[derive(Debug, Clone)]
pub struct WeightedTraces {
    pub traces: Vec<Trace>,
    pub log_weights: Vec<f64>,
    /// Normalized, summing to one.
    pub weights: Vec<f64>,
    pub log_marginal: f64,
}

impl WeightedTraces {
    /// Self-normalized estimate of `E[f(trace)]`.
    pub fn expectation(&self, f: impl Fn(&Trace) -> f64) -> f64 {
        self.traces.iter().zip(&self.weights).map(|(t, w)| w * f(t)).sum()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Importance sampling with the prior as proposal.
pub fn importance_sample<P: Program + ?Sized>(
    program: &P,
    observations: &IndexMap<String, f64>,
    n_particles: usize,
    seed: u64,
) -> Result<WeightedTraces> {
    if n_particles == 0 {
        return Err(Error::InvalidConfig("need at least one particle".into()));
    }
    let traces = (0..n_particles as u64)
        .into_par_iter()
        .map(|i| run_forward_observed(program, Some(observations), stream_rng(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let log_weights: Vec<f64> = traces.iter().map(|t| t.obs_log_lik).collect();
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::AllWeightsZero);
    }
    let shifted: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = shifted.iter().sum();
    Ok(WeightedTraces {
        weights: shifted.iter().map(|w| w / total).collect(),
        log_marginal: max + (total / n_particles as f64).ln(),
        traces,
        log_weights,
    })
}

/// Precomputed predictive distribution of one target along the grid.
#[derive(Debug, Clone)]
struct TargetPath {
    target: Target,
    mean: DVector<f64>,
    /// Marginal sd or, in joint mode, the Cholesky factor of the covariance.
    sd: DVector<f64>,
    chol: Option<DMatrix<f64>>,
    noise_sd: f64,
}

/// Per-patient simulator: for each target, function draws along the time
/// grid followed by observation-noise draws.
#[derive(Debug, Clone)]
pub struct NeuroProgram {
    pub patient_id: String,
    pub grid: Vec<f64>,
    paths: Vec<TargetPath>,
}

pub fn function_address(target: Target, i: usize) -> String {
    format!("{}/f/{i}", target.name())
}

pub fn noise_address(target: Target, i: usize) -> String {
    format!("{}/noise/{i}", target.name())
}

/// Model inputs for predicting a patient's scores at each grid time `s`, from
/// the history available at `s - horizon`.
pub fn grid_inputs(pipeline: &InputPipeline, patient: &PatientRecord, horizon: f64, grid: &[f64]) -> Result<DMatrix<f64>> {
    let raw = DMatrix::from_fn(grid.len(), 2 * pipeline.k + 1, |i, j| encode_history(patient, pipeline.k, grid[i] - horizon)[j]);
    pipeline.transform(&raw)
}

impl NeuroProgram {
    /// `joint` draws each target's function values jointly along the grid;
    /// otherwise each grid point is drawn from its marginal.
    pub fn new(
        models: &[FittedTarget],
        pipeline: &InputPipeline,
        patient: &PatientRecord,
        horizon: f64,
        grid: &[f64],
        joint: bool,
    ) -> Result<Self> {
        if patient.visits.is_empty() {
            return Err(Error::EmptyPatient);
        }
        if grid.is_empty() || grid.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("time grid must be non-empty and finite".into()));
        }
        let x = grid_inputs(pipeline, patient, horizon, grid)?;
        let mut paths = Vec::with_capacity(models.len());
        for m in models {
            let noise_sd = m.noise_var().sqrt();
            let path = if joint {
                let (mean, cov) = m.predict_joint(&x)?;
                let l = cholesky_psd(&SymMatrix::symmetrize(cov)?, DEFAULT_JITTER_STEPS)?.lower().clone();
                TargetPath { target: m.target, mean, sd: l.diagonal(), chol: Some(l), noise_sd }
            } else {
                let p = m.predict(&x)?;
                let sd = p.latent_var.map(|v| v.max(1e-300).sqrt());
                TargetPath { target: m.target, mean: p.mean, sd, chol: None, noise_sd }
            };
            paths.push(path);
        }
        Ok(NeuroProgram { patient_id: patient.patient_id.clone(), grid: grid.to_vec(), paths })
    }

    pub fn targets(&self) -> Vec<Target> {
        self.paths.iter().map(|p| p.target).collect()
    }

    /// Posterior predictive latent means along the grid, per target.
    pub fn means(&self) -> Vec<DVector<f64>> {
        self.paths.iter().map(|p| p.mean.clone()).collect()
    }

    /// Function and noise components of an execution, per target.
    pub fn components(&self, trace: &Trace) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
        let get = |a: String| trace.value(&a).ok_or(Error::MissingChoice(a));
        self.paths
            .iter()
            .map(|p| {
                let n = self.grid.len();
                let mut f = DVector::zeros(n);
                let mut e = DVector::zeros(n);
                for i in 0..n {
                    f[i] = get(function_address(p.target, i))?;
                    e[i] = get(noise_address(p.target, i))?;
                }
                Ok((f, e))
            })
            .collect()
    }
}

impl Program for NeuroProgram {
    fn run(&self, rt: &mut Runtime<'_>) -> Result<()> {
        let n = self.grid.len();
        for p in &self.paths {
            // Standardized innovations of the draws so far, for joint mode.
            let mut z = Vec::with_capacity(n);
            for i in 0..n {
                let dist = match &p.chol {
                    None => Dist::normal(p.mean[i], p.sd[i]),
                    Some(l) => {
                        let shift: f64 = (0..i).map(|j| l[(i, j)] * z[j]).sum();
                        Dist::normal(p.mean[i] + shift, l[(i, i)])
                    }
                };
                let f = rt.sample(function_address(p.target, i), dist)?;
                if let Dist::Normal { mean, sd } = dist {
                    z.push((f - mean) / sd);
                }
            }
            for i in 0..n {
                rt.sample(noise_address(p.target, i), Dist::normal(0.0, p.noise_sd))?;
            }
        }
        Ok(())
    }
}

/// Simulated trajectories sharing a time grid. Matrices are samples × grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub times: Vec<f64>,
    pub targets: Vec<Target>,
    pub function: Vec<DMatrix<f64>>,
    pub noise: Vec<DMatrix<f64>>,
}

impl TrajectoryEnsemble {
    pub fn n_samples(&self) -> usize {
        self.function.first().map_or(0, |m| m.nrows())
    }

    /// Observed-scale values (function plus noise) for target slot `t`.
    pub fn values(&self, t: usize) -> DMatrix<f64> {
        &self.function[t] + &self.noise[t]
    }

    /// Long CSV: sample_id,time,target,value,component with component in
    /// {function, noise, total}.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample_id", "time", "target", "value", "component"])
            .map_err(|e| Error::Io(e.into()))?;
        for (ti, target) in self.targets.iter().enumerate() {
            let total = self.values(ti);
            for s in 0..self.n_samples() {
                for (g, time) in self.times.iter().enumerate() {
                    for (name, m) in [("function", &self.function[ti]), ("noise", &self.noise[ti]), ("total", &total)] {
                        w.write_record([s.to_string(), time.to_string(), target.name().to_string(), m[(s, g)].to_string(), name.to_string()])
                            .map_err(|e| Error::Io(e.into()))?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Independent executions of the program, one seeded stream per sample.
pub fn simulate_trajectories(program: &NeuroProgram, n_samples: usize, seed: u64) -> Result<TrajectoryEnsemble> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let runs = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let trace = run_forward_observed(program, None, stream_rng(seed, i))?;
            program.components(&trace)
        })
        .collect::<Result<Vec<_>>>()?;
    let g = program.grid.len();
    let targets = program.targets();
    let mut function = vec![DMatrix::zeros(n_samples, g); targets.len()];
    let mut noise = function.clone();
    for (s, run) in runs.iter().enumerate() {
        for (t, (f, e)) in run.iter().enumerate() {
            function[t].set_row(s, &f.transpose());
            noise[t].set_row(s, &e.transpose());
        }
    }
    Ok(TrajectoryEnsemble { times: program.grid.clone(), targets, function, noise })
}

/// Per grid point variance split for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSplit {
    pub target: Target,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
    pub total: Vec<f64>,
}

fn column_var(m: &DMatrix<f64>, j: usize) -> f64 {
    let c = m.column(j);
    let mean = c.mean();
    c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (c.len() - 1) as f64
}

/// Epistemic variance is the spread of function draws, aleatoric the spread
/// of noise draws.
pub fn uncertainty_decompose(ensemble: &TrajectoryEnsemble) -> Result<Vec<VarianceSplit>> {
    let n = ensemble.n_samples();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    Ok((0..ensemble.targets.len())
        .map(|t| {
            let total = ensemble.values(t);
            let g = ensemble.times.len();
            VarianceSplit {
                target: ensemble.targets[t],
                aleatoric: (0..g).map(|j| column_var(&ensemble.noise[t], j)).collect(),
                epistemic: (0..g).map(|j| column_var(&ensemble.function[t], j)).collect(),
                total: (0..g).map(|j| column_var(&total, j)).collect(),
            }
        })
        .collect())
}
