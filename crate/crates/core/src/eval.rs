//! Accuracy metrics and patient-level cross-validation.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_supervised_pairs, Cohort, SupervisedPair, Target, DEFAULT_HORIZON, DEFAULT_MATCH_TOL, DEFAULT_VARIANCE_FRACTION};
use crate::error::{Error, Result};
use crate::models::{train_on_pairs, CohortModel, ModelSpec};

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

fn sample_var(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Shrout-Fleiss ICC(3,1) with predictions and truth as the two raters.
///
/// With two raters the between-subject and residual mean squares reduce to
/// half the variances of the pairwise sums and differences.
pub fn icc31(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(Error::DegenerateInput(format!("ICC needs at least two subjects, got {}", pred.len())));
    }
    let pairs = pred.iter().zip(truth);
    let bms = 0.5 * sample_var(pairs.clone().map(|(p, t)| p + t));
    let ems = 0.5 * sample_var(pairs.map(|(p, t)| p - t));
    if !(bms + ems > 0.0) {
        return Err(Error::DegenerateInput("both vectors are constant".into()));
    }
    Ok(((bms - ems) / (bms + ems)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_folds: usize,
    pub horizon: f64,
    pub match_tol: f64,
    pub variance_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_folds: 10,
            horizon: DEFAULT_HORIZON,
            match_tol: DEFAULT_MATCH_TOL,
            variance_fraction: DEFAULT_VARIANCE_FRACTION,
        }
    }
}

/// A model under evaluation. `Oracle` predicts the held-out truth and is
/// used to check the harness wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Candidate {
    Model(ModelSpec),
    Oracle,
}

impl Candidate {
    pub fn name(&self) -> &str {
        match self {
            Candidate::Model(s) => &s.name,
            Candidate::Oracle => "Oracle",
        }
    }
}

impl From<ModelSpec> for Candidate {
    fn from(s: ModelSpec) -> Self {
        Candidate::Model(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    pub target: Target,
    pub mae: Option<f64>,
    pub icc: Option<f64>,
    pub n_test: usize,
}

/// Which patients a fold used where; checked by [`FoldSplit::audit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_patients: Vec<String>,
    pub test_patients: Vec<String>,
    /// Patients whose rows fitted the input preprocessing.
    pub preprocessing_patients: Vec<String>,
}

impl FoldSplit {
    /// Fails if any test patient reached training or preprocessing.
    pub fn audit(&self) -> Result<()> {
        let test: BTreeSet<&String> = self.test_patients.iter().collect();
        if let Some(p) = self.train_patients.iter().chain(&self.preprocessing_patients).find(|p| test.contains(p)) {
            return Err(Error::InvalidConfig(format!("test patient {p} leaked into training in fold {}", self.fold_index)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_index: usize,
    pub model: String,
    pub scores: Vec<TargetScore>,
    pub n_test_pairs: usize,
    pub split: FoldSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// `None` when no value is present; SD uses the n-1 denominator.
    pub fn of(values: &[f64]) -> Option<MeanSd> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { sample_var(values.iter().copied()).sqrt() } else { 0.0 };
        Some(MeanSd { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: Target,
    pub mae: Option<MeanSd>,
    pub icc: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: String,
    pub summary: Vec<TargetSummary>,
    pub folds: Vec<FoldReport>,
}

impl ModelResult {
    pub fn mean_mae(&self, t: Target) -> Option<f64> {
        self.summary.iter().find(|s| s.target == t).and_then(|s| s.mae.map(|m| m.mean))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: EvalConfig,
    pub seed: u64,
    pub models: Vec<ModelResult>,
}

impl ExperimentResult {
    pub fn model(&self, name: &str) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.model == name)
    }

    /// Aligned text table, one row per model, MAE and ICC per target.
    pub fn table(&self) -> String {
        let cell = |m: Option<MeanSd>| m.map_or("-".to_string(), |m| format!("{:.2} ± {:.2}", m.mean, m.sd));
        let mut rows = vec![{
            let mut h = vec!["Model".to_string()];
            for t in Target::ALL {
                h.push(format!("{} MAE", t.name()));
                h.push(format!("{} ICC", t.name()));
            }
            h
        }];
        for m in &self.models {
            let mut r = vec![m.model.clone()];
            for t in Target::ALL {
                let s = m.summary.iter().find(|s| s.target == t);
                r.push(cell(s.and_then(|s| s.mae)));
                r.push(cell(s.and_then(|s| s.icc)));
            }
            rows.push(r);
        }
        let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap()).collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Seeded patient partition: fold `f` holds every `n_folds`-th patient of a shuffle.
pub fn assign_folds(patient_ids: &[String], n_folds: usize, seed: u64) -> Vec<Vec<String>> {
    let mut ids = patient_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); n_folds];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % n_folds].push(id);
    }
    folds
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407 ^ fold as u64)
}

struct Prepared {
    k: usize,
    pairs: Vec<SupervisedPair>,
    folds: Vec<Vec<String>>,
}

fn prepare(cohort: &Cohort, cfg: &EvalConfig, seed: u64) -> Result<Prepared> {
    if cfg.n_folds < 2 {
        return Err(Error::InvalidConfig("need at least two folds".into()));
    }
    let pairs = make_supervised_pairs(cohort, cfg.horizon, cfg.match_tol)?;
    let usable: BTreeSet<&str> = pairs.iter().map(|p| p.patient_id.as_str()).collect();
    if usable.len() < cfg.n_folds {
        return Err(Error::InsufficientPatients { needed: cfg.n_folds, available: usable.len() });
    }
    let ids: Vec<String> = cohort.patients.iter().map(|p| p.patient_id.clone()).collect();
    Ok(Prepared { k: cohort.k(), folds: assign_folds(&ids, cfg.n_folds, seed), pairs })
}

fn score(target: Target, test: &[SupervisedPair], preds: Option<&DVector<f64>>) -> TargetScore {
    let truth: Vec<f64> = test.iter().filter_map(|p| p.targets[target.index()]).collect();
    let (mae_v, icc_v) = match preds {
        Some(p) if !truth.is_empty() => (mae(p.as_slice(), &truth).ok(), icc31(p.as_slice(), &truth).ok()),
        _ => (None, None),
    };
    TargetScore { target, mae: mae_v, icc: icc_v, n_test: truth.len() }
}

/// Trains (or reuses) each candidate on one fold's training pairs and scores
/// it on the test pairs.
fn run_fold(
    prep: &Prepared,
    fold: usize,
    train_ids: &BTreeSet<&str>,
    candidates: &[Candidate],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<FoldReport>> {
    let test_ids: BTreeSet<&str> = prep.folds[fold].iter().map(String::as_str).collect();
    let train: Vec<SupervisedPair> = prep.pairs.iter().filter(|p| train_ids.contains(p.patient_id.as_str())).cloned().collect();
    let test: Vec<SupervisedPair> = prep.pairs.iter().filter(|p| test_ids.contains(p.patient_id.as_str())).cloned().collect();
    let split = FoldSplit {
        fold_index: fold,
        train_patients: train_ids.iter().map(|s| s.to_string()).collect(),
        test_patients: prep.folds[fold].clone(),
        preprocessing_patients: train.iter().map(|p| p.patient_id.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    split.audit()?;
    let raw_test = crate::data::stack_inputs(&test);

    // Specs differing only in the monotone layer share one training run.
    let mut trained: Vec<(ModelSpec, CohortModel)> = Vec::new();
    let mut reports = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let preds: Vec<(Target, Option<DVector<f64>>)> = match cand {
            Candidate::Oracle => Target::ALL
                .iter()
                .map(|&t| (t, Some(DVector::from_vec(test.iter().filter_map(|p| p.targets[t.index()]).collect()))))
                .collect(),
            Candidate::Model(spec) => {
                let model = match trained.iter().find(|(s, _)| s.shares_training_with(spec)) {
                    Some((_, m)) => m,
                    None => {
                        let train_spec = candidates
                            .iter()
                            .filter_map(|c| match c {
                                Candidate::Model(s) if s.shares_training_with(spec) && s.monotonic.is_some() => Some(s),
                                _ => None,
                            })
                            .next()
                            .unwrap_or(spec);
                        let m = train_on_pairs(train_spec, &train, prep.k, cfg.horizon, cfg.variance_fraction, &Target::ALL, fold_seed(seed, fold))?;
                        trained.push((spec.clone(), m));
                        &trained.last().unwrap().1
                    }
                };
                let fitted = model.fit_with(spec.monotonic.is_some())?;
                let x = fitted.pipeline.transform(&raw_test)?;
                Target::ALL
                    .iter()
                    .map(|&t| {
                        let rows: Vec<usize> = (0..test.len()).filter(|&i| test[i].targets[t.index()].is_some()).collect();
                        let p = match fitted.target(t) {
                            Some(m) if !rows.is_empty() => Some(m.predict(&x.select_rows(&rows))?.mean),
                            _ => None,
                        };
                        Ok((t, p))
                    })
                    .collect::<Result<_>>()?
            }
        };
        reports.push(FoldReport {
            fold_index: fold,
            model: cand.name().to_string(),
            scores: preds.iter().map(|(t, p)| score(*t, &test, p.as_ref())).collect(),
            n_test_pairs: test.len(),
            split: split.clone(),
        });
    }
    Ok(reports)
}

fn summarize(name: &str, folds: Vec<FoldReport>) -> ModelResult {
    let summary = Target::ALL
        .iter()
        .map(|&t| {
            let pick = |f: &dyn Fn(&TargetScore) -> Option<f64>| -> Vec<f64> {
                folds.iter().filter_map(|r| r.scores.iter().find(|s| s.target == t).and_then(|s| f(s))).collect()
            };
            TargetSummary { target: t, mae: MeanSd::of(&pick(&|s| s.mae)), icc: MeanSd::of(&pick(&|s| s.icc)) }
        })
        .collect();
    ModelResult { model: name.to_string(), summary, folds }
}

fn evaluate(
    prep: &Prepared,
    candidates: &[Candidate],
    cfg: &EvalConfig,
    seed: u64,
    train_ids_of: impl Fn(usize) -> BTreeSet<String> + Sync,
) -> Result<Vec<ModelResult>> {
    let per_fold = (0..cfg.n_folds)
        .into_par_iter()
        .map(|f| {
            let ids = train_ids_of(f);
            let ids: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            run_fold(prep, f, &ids, candidates, cfg, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_model: Vec<Vec<FoldReport>> = vec![Vec::new(); candidates.len()];
    for fold in per_fold {
        for (i, r) in fold.into_iter().enumerate() {
            by_model[i].push(r);
        }
    }
    Ok(candidates.iter().zip(by_model).map(|(c, f)| summarize(c.name(), f)).collect())
}

fn train_ids(prep: &Prepared, fold: usize) -> BTreeSet<String> {
    prep.folds.iter().enumerate().filter(|(i, _)| *i != fold).flat_map(|(_, ids)| ids.iter().cloned()).collect()
}

/// Cross-validates every candidate on the same seeded patient folds.
pub fn compare_models(candidates: &[Candidate], cohort: &Cohort, cfg: &EvalConfig, seed: u64) -> Result<ExperimentResult> {
    let prep = prepare(cohort, cfg, seed)?;
    let models = evaluate(&prep, candidates, cfg, seed, |f| train_ids(&prep, f))?;
    Ok(ExperimentResult { config: *cfg, seed, models })
}

pub fn cross_validate(candidate: &Candidate, cohort: &Cohort, cfg: &EvalConfig, seed: u64) -> Result<ExperimentResult> {
    compare_models(std::slice::from_ref(candidate), cohort, cfg, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub target: Target,
    pub full_mae: f64,
    pub reduced_mae: f64,
    /// `(reduced - full) / full`.
    pub degradation: f64,
}

/// Compares cross-validated MAE with all training patients against keeping
/// only `fraction` of them in every fold.
pub fn data_efficiency_probe(
    candidate: &Candidate,
    cohort: &Cohort,
    cfg: &EvalConfig,
    fraction: f64,
    seed: u64,
) -> Result<Vec<EfficiencyReport>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("fraction {fraction} must be in (0, 1]")));
    }
    let prep = prepare(cohort, cfg, seed)?;
    let cands = std::slice::from_ref(candidate);
    let full = evaluate(&prep, cands, cfg, seed, |f| train_ids(&prep, f))?.remove(0);
    let reduced = if fraction == 1.0 {
        full.clone()
    } else {
        evaluate(&prep, cands, cfg, seed, |f| {
            let mut ids: Vec<String> = train_ids(&prep, f).into_iter().collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(fold_seed(seed ^ 0xDA7A, f)));
            let keep = ((ids.len() as f64) * fraction).round().max(1.0) as usize;
            ids.truncate(keep);
            ids.into_iter().collect()
        })?
        .remove(0)
    };
    Target::ALL
        .iter()
        .filter_map(|&t| Some((t, full.mean_mae(t)?, reduced.mean_mae(t)?)))
        .map(|(t, a, b)| {
            let degradation = if a > 0.0 { (b - a) / a } else if b > 0.0 { f64::INFINITY } else { 0.0 };
            Ok(EfficiencyReport { target: t, full_mae: a, reduced_mae: b, degradation })
        })
        .collect()
}

/// Patient ids grouped per fold, for callers that need the assignment.
pub fn fold_assignment(cohort: &Cohort, cfg: &EvalConfig, seed: u64) -> Result<HashMap<String, usize>> {
    let prep = prepare(cohort, cfg, seed)?;
    Ok(prep.folds.iter().enumerate().flat_map(|(f, ids)| ids.iter().map(move |id| (id.clone(), f))).collect())
}
