//! Longitudinal cohorts: simulation, CSV I/O and input preprocessing.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 4] = ["patient_id", "time_months", "field", "value"];
pub const DEFAULT_HORIZON: f64 = 12.0;
pub const DEFAULT_MATCH_TOL: f64 = 1.5;
pub const DEFAULT_VARIANCE_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "MMSE")]
    Mmse,
    #[serde(rename = "ADAS13")]
    Adas13,
    #[serde(rename = "CDRSB")]
    Cdrsb,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Mmse, Target::Adas13, Target::Cdrsb];

    pub fn name(self) -> &'static str {
        match self {
            Target::Mmse => "MMSE",
            Target::Adas13 => "ADAS13",
            Target::Cdrsb => "CDRSB",
        }
    }

    pub fn from_name(s: &str) -> Option<Target> {
        Target::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Valid score range, inclusive.
    pub fn range(self) -> (f64, f64) {
        match self {
            Target::Mmse => (0.0, 30.0),
            Target::Adas13 => (0.0, 85.0),
            Target::Cdrsb => (0.0, 18.0),
        }
    }

    /// `+1` when the score grows with severity, `−1` when it falls.
    pub fn severity_sign(self) -> f64 {
        match self {
            Target::Mmse => -1.0,
            _ => 1.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CognitiveScores {
    pub mmse: Option<f64>,
    pub adas13: Option<f64>,
    pub cdrsb: Option<f64>,
}

impl CognitiveScores {
    pub fn get(&self, t: Target) -> Option<f64> {
        match t {
            Target::Mmse => self.mmse,
            Target::Adas13 => self.adas13,
            Target::Cdrsb => self.cdrsb,
        }
    }

    pub fn set(&mut self, t: Target, v: Option<f64>) {
        match t {
            Target::Mmse => self.mmse = v,
            Target::Adas13 => self.adas13 = v,
            Target::Cdrsb => self.cdrsb = v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in Target::ALL {
            if let Some(v) = self.get(t) {
                let (lo, hi) = t.range();
                if !(lo..=hi).contains(&v) {
                    return Err(Error::Schema(format!("{} = {v} outside [{lo}, {hi}]", t.name())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub time_months: f64,
    pub biomarkers: Vec<Option<f64>>,
    pub scores: CognitiveScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.visits.is_empty() {
            return Err(Error::EmptyPatient);
        }
        let mut prev = f64::NEG_INFINITY;
        for v in &self.visits {
            if !(v.time_months >= 0.0 && v.time_months.is_finite()) || v.time_months <= prev {
                return Err(Error::Schema(format!(
                    "patient {}: visit times must be non-negative and strictly increasing",
                    self.patient_id
                )));
            }
            prev = v.time_months;
            if v.biomarkers.len() != k {
                return Err(Error::Schema(format!(
                    "patient {}: {} biomarkers, expected {k}",
                    self.patient_id,
                    v.biomarkers.len()
                )));
            }
            v.scores.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Simulated { seed: u64, config: SimConfig },
    LoadedFrom(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub biomarker_names: Vec<String>,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn k(&self) -> usize {
        self.biomarker_names.len()
    }

    pub fn patient(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for p in &self.patients {
            if seen.insert(p.patient_id.as_str(), ()).is_some() {
                return Err(Error::Schema(format!("duplicate patient id {}", p.patient_id)));
            }
            p.validate(self.k())?;
        }
        Ok(())
    }

    /// Same patients and biomarkers, ignoring provenance.
    pub fn same_records(&self, other: &Cohort) -> bool {
        self.patients == other.patients && self.biomarker_names == other.biomarker_names
    }

    /// The sub-cohort of the given patients, in the given order.
    pub fn subset(&self, ids: &[&str]) -> Result<Cohort> {
        let patients = ids
            .iter()
            .map(|id| {
                self.patient(id)
                    .cloned()
                    .ok_or_else(|| Error::UnknownReference(format!("patient {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(Cohort {
            patients,
            biomarker_names: self.biomarker_names.clone(),
            provenance: self.provenance.clone(),
        })
    }
}

/// `L / (1 + exp(−a (t − o − onset)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub scale: f64,
    pub steepness: f64,
    pub offset: f64,
}

impl SigmoidParams {
    pub fn value(&self, t: f64, onset: f64) -> f64 {
        self.scale / (1.0 + (-self.steepness * (t - self.offset - onset)).exp())
    }
}

/// `score = intercept + slope · severity + noise`, clamped to the score range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreLink {
    pub intercept: f64,
    pub slope: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_patients: usize,
    pub k_biomarkers: usize,
    pub visit_interval_months: f64,
    pub visit_jitter_sd: f64,
    pub min_visits: usize,
    pub max_visits: usize,
    pub missing_rate: f64,
    /// Per-biomarker curves; empty means a built-in spread of `k_biomarkers` curves.
    pub biomarkers: Vec<SigmoidParams>,
    /// SD of the per-patient onset shift, months.
    pub onset_sd: f64,
    /// Measurement noise SD as a fraction of each biomarker's scale.
    pub biomarker_noise_sd: f64,
    pub mmse: ScoreLink,
    pub adas13: ScoreLink,
    pub cdrsb: ScoreLink,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_patients: 300,
            k_biomarkers: 8,
            visit_interval_months: 6.0,
            visit_jitter_sd: 0.25,
            min_visits: 3,
            max_visits: 8,
            missing_rate: 0.2,
            biomarkers: Vec::new(),
            onset_sd: 30.0,
            biomarker_noise_sd: 0.05,
            mmse: ScoreLink {
                intercept: 29.0,
                slope: -24.0,
                noise_sd: 1.0,
            },
            adas13: ScoreLink {
                intercept: 8.0,
                slope: 55.0,
                noise_sd: 2.5,
            },
            cdrsb: ScoreLink {
                intercept: 0.3,
                slope: 15.0,
                noise_sd: 0.7,
            },
        }
    }
}

impl SimConfig {
    pub fn link(&self, t: Target) -> ScoreLink {
        match t {
            Target::Mmse => self.mmse,
            Target::Adas13 => self.adas13,
            Target::Cdrsb => self.cdrsb,
        }
    }

    pub fn curves(&self) -> Vec<SigmoidParams> {
        if !self.biomarkers.is_empty() {
            return self.biomarkers.clone();
        }
        let k = self.k_biomarkers;
        (0..k)
            .map(|i| SigmoidParams {
                scale: 1.0 + 0.5 * (i % 3) as f64,
                steepness: 0.06 + 0.02 * (i % 4) as f64,
                offset: if k > 1 {
                    -24.0 + 60.0 * i as f64 / (k - 1) as f64
                } else {
                    0.0
                },
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        if !self.biomarkers.is_empty() && self.biomarkers.len() != self.k_biomarkers {
            return bad("biomarkers must list k_biomarkers curves");
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1]");
        }
        if !(self.visit_interval_months > 0.0) || !(self.visit_jitter_sd >= 0.0) {
            return bad("visit spacing must be positive and jitter non-negative");
        }
        if self.min_visits == 0 || self.max_visits < self.min_visits {
            return bad("need 1 <= min_visits <= max_visits");
        }
        if !(self.onset_sd >= 0.0) || !(self.biomarker_noise_sd >= 0.0) {
            return bad("standard deviations must be non-negative");
        }
        for c in self.curves() {
            if !(c.scale > 0.0 && c.steepness > 0.0 && c.offset.is_finite()) {
                return bad("sigmoid scale and steepness must be positive");
            }
        }
        for t in Target::ALL {
            let l = self.link(t);
            if !(l.noise_sd >= 0.0 && l.intercept.is_finite() && l.slope.is_finite()) {
                return bad("score links need finite coefficients and non-negative noise");
            }
        }
        Ok(())
    }
}

/// Mean normalized biomarker level, in `(0, 1)`: the latent disease stage.
pub fn disease_severity(curves: &[SigmoidParams], t: f64, onset: f64) -> f64 {
    if curves.is_empty() {
        return 0.0;
    }
    curves.iter().map(|c| c.value(t, onset) / c.scale).sum::<f64>() / curves.len() as f64
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Generates a cohort of sigmoid biomarker trajectories on a shared disease
/// clock shifted by a per-patient onset.
pub fn simulate_cohort(cfg: &SimConfig, seed: u64) -> Result<Cohort> {
    cfg.validate()?;
    let curves = cfg.curves();
    let k = curves.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patients = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        let onset = cfg.onset_sd * gauss(&mut rng);
        let n_visits = rng.gen_range(cfg.min_visits..=cfg.max_visits);
        let mut visits = Vec::with_capacity(n_visits);
        let mut prev = f64::NEG_INFINITY;
        for j in 0..n_visits {
            let jitter = if j == 0 { 0.0 } else { cfg.visit_jitter_sd * gauss(&mut rng) };
            let t = (j as f64 * cfg.visit_interval_months + jitter).max(prev + 1e-3).max(0.0);
            prev = t;
            let mut biomarkers: Vec<Option<f64>> = curves
                .iter()
                .map(|c| Some(c.value(t, onset) + cfg.biomarker_noise_sd * c.scale * gauss(&mut rng)))
                .collect();
            let sev = disease_severity(&curves, t, onset);
            let mut scores = CognitiveScores::default();
            for tg in Target::ALL {
                let l = cfg.link(tg);
                let (lo, hi) = tg.range();
                scores.set(tg, Some((l.intercept + l.slope * sev + l.noise_sd * gauss(&mut rng)).clamp(lo, hi)));
            }
            let dropped: Vec<bool> = (0..k + 3).map(|_| rng.gen::<f64>() < cfg.missing_rate).collect();
            let keep = rng.gen_range(0..k + 3);
            for (f, &d) in dropped.iter().enumerate() {
                if d && !(dropped.iter().all(|x| *x) && f == keep) {
                    if f < k {
                        biomarkers[f] = None;
                    } else {
                        scores.set(Target::ALL[f - k], None);
                    }
                }
            }
            visits.push(Visit {
                time_months: t,
                biomarkers,
                scores,
            });
        }
        patients.push(PatientRecord {
            patient_id: format!("P{:04}", i + 1),
            visits,
        });
    }
    Ok(Cohort {
        patients,
        biomarker_names: (0..k).map(|i| format!("BM{}", i + 1)).collect(),
        provenance: Provenance::Simulated {
            seed,
            config: cfg.clone(),
        },
    })
}

/// Writes the long-format CSV: one row per observed field.
pub fn write_cohort_csv<W: Write>(cohort: &Cohort, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_io)?;
    for p in &cohort.patients {
        for v in &p.visits {
            let t = v.time_months.to_string();
            for (name, b) in cohort.biomarker_names.iter().zip(&v.biomarkers) {
                if let Some(x) = b {
                    w.write_record([p.patient_id.as_str(), &t, name, &x.to_string()])
                        .map_err(csv_io)?;
                }
            }
            for tg in Target::ALL {
                if let Some(x) = v.scores.get(tg) {
                    w.write_record([p.patient_id.as_str(), &t, tg.name(), &x.to_string()])
                        .map_err(csv_io)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

pub fn save_cohort_csv(cohort: &Cohort, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_cohort_csv(cohort, std::io::BufWriter::new(f))
}

pub fn load_cohort_csv(path: &Path) -> Result<Cohort> {
    let f = std::fs::File::open(path)?;
    read_cohort_csv(f, &path.display().to_string())
}

/// Orders strings with embedded numbers by value, so `BM2 < BM10`.
fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    fn chunks(s: &str) -> Vec<(bool, String)> {
        let mut out: Vec<(bool, String)> = Vec::new();
        for c in s.chars() {
            let d = c.is_ascii_digit();
            match out.last_mut() {
                Some((ld, buf)) if *ld == d => buf.push(c),
                _ => out.push((d, c.to_string())),
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for ((da, sa), (db, sb)) in ca.iter().zip(&cb) {
        let ord = if *da && *db {
            let (ta, tb) = (sa.trim_start_matches('0'), sb.trim_start_matches('0'));
            ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb)).then_with(|| sa.len().cmp(&sb.len()))
        } else {
            sa.cmp(sb)
        };
        if ord.is_ne() {
            return ord;
        }
    }
    ca.len().cmp(&cb.len())
}

/// Parses the long-format CSV. Biomarker columns are every non-score field,
/// in natural order (`BM2` before `BM10`); visits are sorted by time.
pub fn read_cohort_csv<R: Read>(input: R, source: &str) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols != CSV_HEADER {
        let missing: Vec<&str> = CSV_HEADER.iter().copied().filter(|c| !cols.contains(c)).collect();
        return Err(Error::Schema(if missing.is_empty() {
            format!("header must be exactly `{}`", CSV_HEADER.join(","))
        } else {
            format!("missing columns: {}", missing.join(", "))
        }));
    }

    type Row = (String, f64, String, f64, usize);
    let mut rows: Vec<Row> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("{what} `{s}` is not a finite number"),
                })
        };
        let pid = rec[0].trim().to_string();
        if pid.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty patient_id".into(),
            });
        }
        let t = num(&rec[1], "time_months")?;
        if t < 0.0 {
            return Err(Error::Schema(format!("line {line}: negative time {t}")));
        }
        let field = rec[2].trim().to_string();
        if field.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty field name".into(),
            });
        }
        let value = num(&rec[3], "value")?;
        if let Some(tg) = Target::from_name(&field) {
            let (lo, hi) = tg.range();
            if !(lo..=hi).contains(&value) {
                return Err(Error::Schema(format!("line {line}: {field} = {value} outside [{lo}, {hi}]")));
            }
        }
        rows.push((pid, t, field, value, line));
    }

    let mut names: Vec<String> = rows
        .iter()
        .filter(|r| Target::from_name(&r.2).is_none())
        .map(|r| r.2.clone())
        .collect();
    names.sort_by(|a, b| natural_cmp(a, b));
    names.dedup();
    let name_idx: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    let k = names.len();
    let mut order: Vec<String> = Vec::new();
    let mut by_patient: HashMap<String, Vec<Visit>> = HashMap::new();
    for (pid, t, field, value, line) in rows {
        let visits = by_patient.entry(pid.clone()).or_insert_with(|| {
            order.push(pid.clone());
            Vec::new()
        });
        let vi = match visits.iter().position(|v| v.time_months.to_bits() == t.to_bits()) {
            Some(i) => i,
            None => {
                visits.push(Visit {
                    time_months: t,
                    biomarkers: vec![None; k],
                    scores: CognitiveScores::default(),
                });
                visits.len() - 1
            }
        };
        let v = &mut visits[vi];
        let dup = match Target::from_name(&field) {
            Some(tg) => v.scores.get(tg).replace(value).is_some() || {
                v.scores.set(tg, Some(value));
                false
            },
            None => v.biomarkers[name_idx[&field]].replace(value).is_some(),
        };
        if dup {
            return Err(Error::Parse {
                line,
                message: format!("duplicate entry for {pid} at {t} months, field {field}"),
            });
        }
    }
    let patients = order
        .into_iter()
        .map(|pid| {
            let mut visits = by_patient.remove(&pid).unwrap_or_default();
            visits.sort_by(|a, b| a.time_months.total_cmp(&b.time_months));
            PatientRecord { patient_id: pid, visits }
        })
        .collect();
    let cohort = Cohort {
        patients,
        biomarker_names: names,
        provenance: Provenance::LoadedFrom(source.to_string()),
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Column statistics and principal axes fitted on a training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    /// Fill value for missing (NaN) entries, per input column.
    pub impute: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Columns with zero spread, mapped to 0.
    pub constant: Vec<bool>,
    /// Retained principal axes as columns, by decreasing variance.
    pub basis: DMatrix<f64>,
    /// Eigenvalues of the normalized covariance, decreasing.
    pub eigenvalues: Vec<f64>,
    pub variance_fraction: f64,
}

/// Fits imputation, z-normalization and PCA keeping the fewest components
/// that explain at least `variance_fraction` of the variance.
pub fn fit_preprocessor(x: &DMatrix<f64>, variance_fraction: f64) -> Result<Preprocessor> {
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "variance fraction must lie in (0, 1], got {variance_fraction}"
        )));
    }
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::DegenerateData(format!("{n} rows")));
    }
    let impute: Vec<f64> = (0..p)
        .map(|c| {
            let obs: Vec<f64> = x.column(c).iter().copied().filter(|v| !v.is_nan()).collect();
            if obs.is_empty() {
                0.0
            } else {
                obs.iter().sum::<f64>() / obs.len() as f64
            }
        })
        .collect();
    let filled = DMatrix::from_fn(n, p, |i, j| if x[(i, j)].is_nan() { impute[j] } else { x[(i, j)] });
    let distinct = (1..n).any(|i| filled.row(i) != filled.row(0));
    if !distinct {
        return Err(Error::DegenerateData("fewer than 2 distinct rows".into()));
    }
    let mut mean = vec![0.0; p];
    let mut sd = vec![1.0; p];
    let mut constant = vec![false; p];
    for c in 0..p {
        let col = filled.column(c);
        mean[c] = col.mean();
        let var = col.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / (n - 1) as f64;
        if var.sqrt() <= 1e-12 * (1.0 + mean[c].abs()) {
            constant[c] = true;
        } else {
            sd[c] = var.sqrt();
        }
    }
    let z = normalize(&filled, &mean, &sd, &constant);
    let cov = z.transpose() * &z / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..p).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let mut keep = p;
    let mut acc = 0.0;
    for (c, ev) in eigenvalues.iter().enumerate() {
        acc += ev;
        if acc >= variance_fraction * total * (1.0 - 1e-12) {
            keep = c + 1;
            break;
        }
    }
    let mut basis = DMatrix::zeros(p, keep);
    for (c, &i) in idx.iter().take(keep).enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let pivot = v.iter().copied().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v = -v;
        }
        basis.set_column(c, &v);
    }
    Ok(Preprocessor {
        impute,
        mean,
        sd,
        constant,
        basis,
        eigenvalues,
        variance_fraction,
    })
}

fn normalize(x: &DMatrix<f64>, mean: &[f64], sd: &[f64], constant: &[bool]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        if constant[j] {
            0.0
        } else {
            (x[(i, j)] - mean[j]) / sd[j]
        }
    })
}

impl Preprocessor {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.basis.ncols()
    }

    /// Imputes with the fitted fill values, normalizes and projects.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "preprocessor fitted on {} columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let filled = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            if x[(i, j)].is_nan() {
                self.impute[j]
            } else {
                x[(i, j)]
            }
        });
        Ok(normalize(&filled, &self.mean, &self.sd, &self.constant) * &self.basis)
    }

    /// Maps component scores back to input units (constant columns return their mean).
    pub fn inverse_transform(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.n_components() {
            return Err(Error::DimensionMismatch("component count".into()));
        }
        let zn = z * self.basis.transpose();
        Ok(DMatrix::from_fn(zn.nrows(), zn.ncols(), |i, j| {
            if self.constant[j] {
                self.mean[j]
            } else {
                zn[(i, j)] * self.sd[j] + self.mean[j]
            }
        }))
    }
}

/// Raw input at time `t` from visits at or before `t`: latest value of each
/// biomarker, `t`, then months since each of those values was measured.
/// Never-observed biomarkers are NaN in both blocks.
pub fn encode_history(patient: &PatientRecord, k: usize, t: f64) -> DVector<f64> {
    let mut latest = vec![f64::NAN; k];
    let mut when = vec![f64::NAN; k];
    for v in patient.visits.iter().take_while(|v| v.time_months <= t + 1e-9) {
        for (b, x) in v.biomarkers.iter().enumerate() {
            if let Some(x) = x {
                latest[b] = *x;
                when[b] = v.time_months;
            }
        }
    }
    let mut out = DVector::from_element(2 * k + 1, f64::NAN);
    for b in 0..k {
        out[b] = latest[b];
        out[k + 1 + b] = t - when[b];
    }
    out[k] = t;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedPair {
    pub input: DVector<f64>,
    /// Indexed by [`Target::index`]; `None` when the matched visit lacks that score.
    pub targets: [Option<f64>; 3],
    pub patient_id: String,
    pub base_time: f64,
}

/// One pair per visit that has a later visit within `tol` of `t + tau`
/// (the closest such visit, earliest on ties). Pairs whose matched visit has
/// no scores at all are skipped.
pub fn make_supervised_pairs(cohort: &Cohort, tau: f64, tol: f64) -> Result<Vec<SupervisedPair>> {
    if !(tau > 0.0) || !(tol >= 0.0) {
        return Err(Error::InvalidConfig(format!("horizon {tau} and tolerance {tol} must be positive")));
    }
    let k = cohort.k();
    let mut pairs = Vec::new();
    for p in &cohort.patients {
        for (j, base) in p.visits.iter().enumerate() {
            let want = base.time_months + tau;
            let best = p.visits[j + 1..]
                .iter()
                .filter(|v| (v.time_months - want).abs() <= tol)
                .min_by(|a, b| (a.time_months - want).abs().total_cmp(&(b.time_months - want).abs()));
            let Some(m) = best else { continue };
            let targets = Target::ALL.map(|tg| m.scores.get(tg));
            if targets.iter().all(Option::is_none) {
                continue;
            }
            pairs.push(SupervisedPair {
                input: encode_history(p, k, base.time_months),
                targets,
                patient_id: p.patient_id.clone(),
                base_time: base.time_months,
            });
        }
    }
    Ok(pairs)
}

/// Turns raw encoded inputs into model inputs: PCA over the biomarker and
/// staleness block, followed by the z-normalized time as the last column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPipeline {
    pub k: usize,
    pub block: Preprocessor,
    pub time_mean: f64,
    pub time_sd: f64,
}

impl InputPipeline {
    pub fn fit(raw: &DMatrix<f64>, k: usize, variance_fraction: f64) -> Result<Self> {
        if raw.ncols() != 2 * k + 1 {
            return Err(Error::DimensionMismatch(format!("expected {} raw columns", 2 * k + 1)));
        }
        let block = fit_preprocessor(&Self::block_of(raw, k), variance_fraction)?;
        let t = raw.column(k);
        let n = t.len() as f64;
        let time_mean = t.mean();
        let var = t.iter().map(|v| (v - time_mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let time_sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(InputPipeline {
            k,
            block,
            time_mean,
            time_sd,
        })
    }

    fn block_of(raw: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(raw.nrows(), 2 * k, |i, j| raw[(i, if j < k { j } else { j + 1 })])
    }

    pub fn output_dim(&self) -> usize {
        self.block.n_components() + 1
    }

    /// Column of the model input holding time.
    pub fn time_axis(&self) -> usize {
        self.block.n_components()
    }

    pub fn transform(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if raw.ncols() != 2 * self.k + 1 {
            return Err(Error::DimensionMismatch(format!("expected {} raw columns", 2 * self.k + 1)));
        }
        let z = self.block.transform(&Self::block_of(raw, self.k))?;
        let c = z.ncols();
        Ok(DMatrix::from_fn(raw.nrows(), c + 1, |i, j| {
            if j < c {
                z[(i, j)]
            } else {
                (raw[(i, self.k)] - self.time_mean) / self.time_sd
            }
        }))
    }
}

/// Stacks pair inputs into a raw design matrix.
pub fn stack_inputs(pairs: &[SupervisedPair]) -> DMatrix<f64> {
    let p = pairs.first().map_or(0, |q| q.input.len());
    DMatrix::from_fn(pairs.len(), p, |i, j| pairs[i].input[j])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            n_patients: 25,
            k_biomarkers: 4,
            ..Default::default()
        }
    }

    #[test]
    fn sigmoid_midpoint() {
        let cfg = SimConfig {
            n_patients: 3,
            k_biomarkers: 1,
            biomarkers: vec![SigmoidParams {
                scale: 3.0,
                steepness: 0.1,
                offset: 12.0,
            }],
            onset_sd: 0.0,
            biomarker_noise_sd: 0.0,
            visit_jitter_sd: 0.0,
            missing_rate: 0.0,
            min_visits: 4,
            max_visits: 4,
            ..Default::default()
        };
        let c = simulate_cohort(&cfg, 1).unwrap();
        for p in &c.patients {
            assert_eq!(p.visits[2].time_months, 12.0);
            assert!((p.visits[2].biomarkers[0].unwrap() - 1.5).abs() < 1e-15);
        }
    }

    #[test]
    fn simulation_is_deterministic_and_valid() {
        let a = simulate_cohort(&small(), 7).unwrap();
        let b = simulate_cohort(&small(), 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let c = simulate_cohort(&small(), 8).unwrap();
        assert!(!a.same_records(&c));
        for p in &a.patients {
            assert!(p.visits.iter().all(|v| {
                v.biomarkers.iter().any(Option::is_some) || Target::ALL.iter().any(|t| v.scores.get(*t).is_some())
            }));
        }
    }

    #[test]
    fn noiseless_series_are_non_decreasing() {
        let cfg = SimConfig {
            biomarker_noise_sd: 0.0,
            missing_rate: 0.0,
            ..small()
        };
        let c = simulate_cohort(&cfg, 3).unwrap();
        for p in &c.patients {
            for w in p.visits.windows(2) {
                for b in 0..c.k() {
                    assert!(w[1].biomarkers[b].unwrap() >= w[0].biomarkers[b].unwrap());
                }
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SimConfig {
                missing_rate: 1.5,
                ..small()
            },
            SimConfig {
                n_patients: 0,
                ..small()
            },
            SimConfig {
                min_visits: 5,
                max_visits: 2,
                ..small()
            },
        ] {
            assert!(matches!(simulate_cohort(&cfg, 0), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn csv_round_trip_and_sorting() {
        let c = simulate_cohort(&small(), 11).unwrap();
        let mut buf = Vec::new();
        write_cohort_csv(&c, &mut buf).unwrap();
        let back = read_cohort_csv(buf.as_slice(), "mem").unwrap();
        assert!(c.same_records(&back));

        let text = "patient_id,time_months,field,value\nA,6,BM1,2.0\nA,0,BM1,1.0\nA,0,MMSE,28\n";
        let c = read_cohort_csv(text.as_bytes(), "mem").unwrap();
        let times: Vec<f64> = c.patients[0].visits.iter().map(|v| v.time_months).collect();
        assert_eq!(times, vec![0.0, 6.0]);
        assert_eq!(c.patients[0].visits[0].scores.mmse, Some(28.0));
        assert_eq!(c.patients[0].visits[1].scores.mmse, None);
    }

    #[test]
    fn csv_errors() {
        let bad_range = "patient_id,time_months,field,value\nA,0,MMSE,31\n";
        assert!(matches!(read_cohort_csv(bad_range.as_bytes(), "m"), Err(Error::Schema(_))));
        let missing = "patient_id,time_months,field\nA,0,MMSE\n";
        match read_cohort_csv(missing.as_bytes(), "m") {
            Err(Error::Schema(m)) => assert!(m.contains("value")),
            other => panic!("{other:?}"),
        }
        let junk = "patient_id,time_months,field,value\nA,0,BM1,1\nA,x,BM1,2\n";
        assert!(matches!(read_cohort_csv(junk.as_bytes(), "m"), Err(Error::Parse { line: 3, .. })));
        let dup = "patient_id,time_months,field,value\nA,0,BM1,1\nA,0,BM1,2\n";
        assert!(matches!(read_cohort_csv(dup.as_bytes(), "m"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn preprocessor_component_counts() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]);
        let p = fit_preprocessor(&x, 0.95).unwrap();
        assert_eq!(p.n_components(), 1);
        assert!(p.constant[1]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(5000, 3, |_, _| gauss(&mut rng));
        let p = fit_preprocessor(&x, 0.95).unwrap();
        assert_eq!(p.n_components(), 3);
        // eigenvalues against a brute-force eigendecomposition of the correlation matrix
        let z = normalize(&x, &p.mean, &p.sd, &p.constant);
        let cov = z.transpose() * &z / 4999.0;
        let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ev.iter().zip(&p.eigenvalues) {
            assert!((a - b).abs() < 1e-10);
        }
        let t = p.transform(&x).unwrap();
        for c in 0..3 {
            assert!(t.column(c).mean().abs() < 1e-10);
        }
    }

    #[test]
    fn full_pca_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(50, 4, |_, j| gauss(&mut rng) * (j + 1) as f64 + j as f64);
        let p = fit_preprocessor(&x, 1.0).unwrap();
        let back = p.inverse_transform(&p.transform(&x).unwrap()).unwrap();
        assert!((back - &x).norm() / x.norm() < 1e-8);
    }

    #[test]
    fn degenerate_preprocessor_input() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(fit_preprocessor(&x, 0.9), Err(Error::DegenerateData(_))));
        assert!(fit_preprocessor(&DMatrix::zeros(1, 2), 0.9).is_err());
    }

    #[test]
    fn missing_values_take_training_means() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, f64::NAN, 3.0, 4.0, 5.0, 8.0]);
        let p = fit_preprocessor(&x, 1.0).unwrap();
        assert_eq!(p.impute, vec![3.0, 6.0]);
    }

    fn patient(times: &[f64]) -> PatientRecord {
        PatientRecord {
            patient_id: "A".into(),
            visits: times
                .iter()
                .map(|&t| Visit {
                    time_months: t,
                    biomarkers: vec![Some(t), None],
                    scores: CognitiveScores {
                        mmse: Some(25.0),
                        ..Default::default()
                    },
                })
                .collect(),
        }
    }

    fn cohort_of(ps: Vec<PatientRecord>) -> Cohort {
        Cohort {
            patients: ps,
            biomarker_names: vec!["BM1".into(), "BM2".into()],
            provenance: Provenance::LoadedFrom("test".into()),
        }
    }

    #[test]
    fn pair_construction() {
        let single = cohort_of(vec![patient(&[0.0])]);
        assert!(make_supervised_pairs(&single, 12.0, 1.5).unwrap().is_empty());
        let two = cohort_of(vec![patient(&[0.0, 12.0])]);
        let pairs = make_supervised_pairs(&two, 12.0, 1.5).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].base_time, 0.0);
        assert_eq!(pairs[0].targets[0], Some(25.0));
        // latest BM1, BM2 never seen, time, staleness
        let x = &pairs[0].input;
        assert_eq!(x[0], 0.0);
        assert!(x[1].is_nan() && x[4].is_nan());
        assert_eq!((x[2], x[3]), (0.0, 0.0));
    }

    #[test]
    fn closest_match_wins() {
        let c = cohort_of(vec![patient(&[0.0, 11.0, 12.5])]);
        let p = make_supervised_pairs(&c, 12.0, 1.5).unwrap();
        assert_eq!(p.len(), 1);
        let mut c2 = c.clone();
        c2.patients[0].visits[2].scores.mmse = Some(20.0);
        c2.patients[0].visits[1].scores.mmse = Some(21.0);
        assert_eq!(make_supervised_pairs(&c2, 12.0, 1.5).unwrap()[0].targets[0], Some(20.0));
    }

    #[test]
    fn pair_counts_match_brute_force() {
        let c = simulate_cohort(&small(), 21).unwrap();
        let pairs = make_supervised_pairs(&c, 12.0, 1.5).unwrap();
        let mut expected = 0;
        for p in &c.patients {
            let n = p.visits.len();
            for i in 0..n {
                let mut found = None;
                let mut best = f64::INFINITY;
                for j in 0..n {
                    let d = p.visits[j].time_months - p.visits[i].time_months - 12.0;
                    if j > i && d.abs() <= 1.5 && d.abs() < best {
                        best = d.abs();
                        found = Some(j);
                    }
                }
                if let Some(j) = found {
                    let s = p.visits[j].scores;
                    if s.mmse.is_some() || s.adas13.is_some() || s.cdrsb.is_some() {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(pairs.len(), expected);
        assert!(expected > 20);
    }

    #[test]
    fn pipeline_keeps_time_as_last_axis() {
        let c = simulate_cohort(&small(), 5).unwrap();
        let pairs = make_supervised_pairs(&c, 12.0, 1.5).unwrap();
        let raw = stack_inputs(&pairs);
        let pipe = InputPipeline::fit(&raw, c.k(), 0.95).unwrap();
        let x = pipe.transform(&raw).unwrap();
        assert_eq!(x.ncols(), pipe.output_dim());
        let t = x.column(pipe.time_axis());
        assert!(t.mean().abs() < 1e-12);
        assert!(x.iter().all(|v| v.is_finite()));
    }
}
