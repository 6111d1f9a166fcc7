//! Model variants and per-target training on preprocessed inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{stack_inputs, InputPipeline, SupervisedPair, Target};
use crate::error::{Error, Result};
use crate::gp::{train, FeatureMode, FittedGp, GpModel, Prediction};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::monotonic::{
    laplace_fit_base, monotone_predict, monotone_predict_joint, BasePosterior, MonotoneFit,
    VirtualDerivativeSet, DEFAULT_GRID_POINTS, DEFAULT_MAX_ITER, DEFAULT_NU,
};
use crate::net::{init_net, init_net_passthrough, FeatureNet, DEFAULT_L2};

/// Weight decay on the feature network weights.
const NET_WEIGHT_DECAY: f64 = 30.0;
use crate::optim::OptimizerConfig;
use crate::sparse::{init_inducing, train_sparse, FittedSparse, InducingSet, InducingSpace, SparseConfig};

/// How many trailing loss values a trained model keeps.
const LOSS_TAIL: usize = 20;

/// Where virtual derivative sites sit in the coordinates other than time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VirtualAnchor {
    /// Training column means.
    ColumnMeans,
    /// The training row closest in time to each grid point.
    #[default]
    NearestRows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonotoneConfig {
    pub grid_points: usize,
    pub anchor: VirtualAnchor,
    pub nu: f64,
    pub max_iter: usize,
    /// Scores the constraint applies to.
    pub targets: Vec<Target>,
}

impl Default for MonotoneConfig {
    fn default() -> Self {
        MonotoneConfig {
            grid_points: DEFAULT_GRID_POINTS,
            anchor: VirtualAnchor::default(),
            nu: DEFAULT_NU,
            max_iter: DEFAULT_MAX_ITER,
            targets: Target::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub feature_mode: FeatureMode,
    /// Net models: feed the time column to the kernel directly instead of
    /// through the network.
    pub time_passthrough: bool,
    pub kernel: KernelFamily,
    pub sparse: Option<SparseConfig>,
    pub monotonic: Option<MonotoneConfig>,
    pub optimizer: OptimizerConfig,
    pub net_l2: f64,
    pub init_length_sq: f64,
    pub init_noise_var: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::pp_dkl()
    }
}

impl ModelSpec {
    /// Exact GP with a rational-quadratic kernel on the inputs; hyperparameters
    /// are fitted on a row subsample.
    pub fn exact_gp() -> Self {
        ModelSpec {
            name: "ExactGP".into(),
            feature_mode: FeatureMode::RawInputs,
            time_passthrough: false,
            kernel: KernelFamily::RationalQuadratic,
            sparse: None,
            monotonic: None,
            optimizer: OptimizerConfig {
                iterations: 50,
                step_size: 0.1,
                subsample: Some(300),
                ..Default::default()
            },
            net_l2: DEFAULT_L2,
            init_length_sq: 4.0,
            init_noise_var: 0.1,
        }
    }

    /// Deep kernel on network features with fixed feature-space inducing points.
    pub fn dkl() -> Self {
        ModelSpec {
            name: "DKL".into(),
            feature_mode: FeatureMode::NetFeatures,
            time_passthrough: false,
            kernel: KernelFamily::Rbf,
            sparse: Some(SparseConfig {
                num_inducing: 32,
                inducing_space: InducingSpace::FeatureSpace,
                ..Default::default()
            }),
            monotonic: None,
            optimizer: OptimizerConfig {
                iterations: 100,
                step_size: 0.01,
                ..Default::default()
            },
            net_l2: NET_WEIGHT_DECAY,
            init_length_sq: 1.0,
            init_noise_var: 0.1,
        }
    }

    /// Warped deep kernel, trainable data-space inducing points, monotone in time.
    pub fn pp_dkl() -> Self {
        ModelSpec {
            name: "PP-DKL".into(),
            feature_mode: FeatureMode::WarpedKernel,
            time_passthrough: true,
            sparse: Some(SparseConfig {
                num_inducing: 32,
                inducing_space: InducingSpace::DataSpace,
                ..Default::default()
            }),
            monotonic: Some(MonotoneConfig::default()),
            ..Self::dkl()
        }
    }

    /// PP-DKL without the monotone constraint.
    pub fn pp_dkl_unconstrained() -> Self {
        ModelSpec {
            name: "PP-DKL'".into(),
            monotonic: None,
            ..Self::pp_dkl()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "exact_gp" | "ExactGP" => Ok(Self::exact_gp()),
            "dkl" | "DKL" => Ok(Self::dkl()),
            "pp_dkl" | "PP-DKL" => Ok(Self::pp_dkl()),
            "pp_dkl_prime" | "PP-DKL'" => Ok(Self::pp_dkl_unconstrained()),
            other => Err(Error::InvalidConfig(format!("unknown model preset `{other}`"))),
        }
    }

    /// Same spec apart from the monotone layer: such models share training.
    pub fn shares_training_with(&self, other: &ModelSpec) -> bool {
        let strip = |s: &ModelSpec| ModelSpec {
            name: String::new(),
            monotonic: None,
            ..s.clone()
        };
        strip(self) == strip(other)
    }

    fn initial_model(&self, input_dim: usize, time_axis: usize, seed: u64) -> Result<GpModel> {
        if !(self.init_length_sq > 0.0 && self.init_noise_var > 0.0) {
            return Err(Error::InvalidConfig("initial length scale and noise must be positive".into()));
        }
        let kernel = KernelSpec::default_for(self.kernel, self.init_length_sq);
        let log_noise = self.init_noise_var.ln();
        let net = || -> Result<FeatureNet> {
            let mut n = if self.time_passthrough {
                init_net_passthrough(input_dim, time_axis, seed)?
            } else {
                init_net(input_dim, seed)
            };
            n.l2_coeff = self.net_l2;
            Ok(n)
        };
        let model = match self.feature_mode {
            FeatureMode::RawInputs => GpModel::raw(kernel, log_noise),
            FeatureMode::NetFeatures => GpModel::net_features(kernel, net()?, log_noise),
            FeatureMode::WarpedKernel => GpModel::warped(kernel, net()?, 0.0, log_noise),
        };
        model.validate()?;
        Ok(model)
    }
}

fn virtual_sites(x: &DMatrix<f64>, time_axis: usize, mc: &MonotoneConfig, sign: f64) -> Result<VirtualDerivativeSet> {
    let grid = VirtualDerivativeSet::on_grid(x, time_axis, mc.grid_points, sign, mc.nu)?;
    match mc.anchor {
        VirtualAnchor::ColumnMeans => Ok(grid),
        VirtualAnchor::NearestRows => {
            let times = x.column(time_axis);
            let rows: Vec<_> = grid
                .locations
                .column(time_axis)
                .iter()
                .map(|&t| {
                    let i = (0..x.nrows()).min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs())).expect("non-empty");
                    x.row(i)
                })
                .collect();
            VirtualDerivativeSet::along_axis(x, &DMatrix::from_rows(&rows), time_axis, mc.grid_points, sign, mc.nu)
        }
    }
}

/// Trained hyperparameters for one target score, with what is needed to
/// rebuild its posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedTarget {
    pub target: Target,
    pub model: GpModel,
    pub inducing: Option<InducingSet>,
    pub virtuals: Option<VirtualDerivativeSet>,
    pub monotone_max_iter: usize,
    /// Targets are standardized before fitting: `y = mean + sd · ỹ`.
    pub y_mean: f64,
    pub y_sd: f64,
    pub x_train: DMatrix<f64>,
    /// Standardized training targets.
    pub y_train: DVector<f64>,
    pub loss_tail: Vec<f64>,
    /// Full training trace; not stored in model files.
    #[serde(skip)]
    pub loss_trace: Vec<f64>,
}

/// Trains one target's model on model inputs `x` (time on `time_axis`).
pub fn train_target(
    spec: &ModelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    target: Target,
    time_axis: usize,
    seed: u64,
) -> Result<TrainedTarget> {
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if x.nrows() != n {
        return Err(Error::LengthMismatch(x.nrows(), n));
    }
    let y_mean = y.mean();
    let var = if n > 1 {
        y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let y_sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    let ys = y.map(|v| (v - y_mean) / y_sd);

    let model0 = spec.initial_model(x.ncols(), time_axis, seed)?;
    let mut opt = spec.optimizer.clone();
    opt.seed = seed;
    let (model, inducing, trace) = match &spec.sparse {
        None => {
            let (m, t) = train(&model0, x, &ys, &opt)?;
            (m, None, t)
        }
        Some(cfg) => {
            let z0 = init_inducing(&model0, x, cfg, seed)?;
            let (m, z, t) = train_sparse(&model0, &z0, x, &ys, &opt)?;
            (m, Some(z), t)
        }
    };
    let virtuals = match &spec.monotonic {
        Some(mc) if mc.targets.contains(&target) && mc.grid_points > 0 => Some(virtual_sites(x, time_axis, mc, target.severity_sign())?),
        _ => None,
    };
    Ok(TrainedTarget {
        target,
        model,
        inducing,
        virtuals,
        monotone_max_iter: spec.monotonic.as_ref().map_or(DEFAULT_MAX_ITER, |m| m.max_iter),
        y_mean,
        y_sd,
        x_train: x.clone(),
        y_train: ys,
        loss_tail: trace[trace.len().saturating_sub(LOSS_TAIL)..].to_vec(),
        loss_trace: trace,
    })
}

#[derive(Debug, Clone)]
enum Posterior {
    Base(BasePosterior),
    Monotone(Box<MonotoneFit>),
}

/// A conditioned per-target model predicting in original score units.
#[derive(Debug, Clone)]
pub struct FittedTarget {
    pub target: Target,
    posterior: Posterior,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl TrainedTarget {
    fn base(&self) -> Result<BasePosterior> {
        Ok(match &self.inducing {
            None => BasePosterior::Exact(FittedGp::fit(self.model.clone(), self.x_train.clone(), self.y_train.clone())?),
            Some(z) => BasePosterior::Sparse(
                self.model.clone(),
                FittedSparse::fit(self.model.clone(), z.clone(), &self.x_train, &self.y_train)?,
            ),
        })
    }

    /// Conditions on the training data, with the monotone layer when configured.
    pub fn fit(&self) -> Result<FittedTarget> {
        self.fit_with(true)
    }

    /// Like [`TrainedTarget::fit`]; `monotone = false` drops the constraint.
    pub fn fit_with(&self, monotone: bool) -> Result<FittedTarget> {
        let base = self.base()?;
        let posterior = match (&self.virtuals, monotone) {
            (Some(v), true) => {
                let fit = laplace_fit_base(base, &self.x_train, v, self.monotone_max_iter)?;
                if !fit.state.converged {
                    return Err(Error::NonConvergence);
                }
                Posterior::Monotone(Box::new(fit))
            }
            _ => Posterior::Base(base),
        };
        Ok(FittedTarget {
            target: self.target,
            posterior,
            y_mean: self.y_mean,
            y_sd: self.y_sd,
        })
    }

    pub fn net(&self) -> Option<&FeatureNet> {
        self.model.net.as_ref()
    }
}

impl FittedTarget {
    /// Observation noise variance in score units.
    pub fn noise_var(&self) -> f64 {
        self.model().noise_var() * self.y_sd * self.y_sd
    }

    pub fn model(&self) -> &GpModel {
        match &self.posterior {
            Posterior::Base(b) => b.model(),
            Posterior::Monotone(m) => m.base.model(),
        }
    }

    pub fn is_monotone(&self) -> bool {
        matches!(self.posterior, Posterior::Monotone(_))
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Prediction> {
        let p = match &self.posterior {
            Posterior::Base(b) => b.predict(x)?,
            Posterior::Monotone(m) => monotone_predict(m, x)?,
        };
        let s2 = self.y_sd * self.y_sd;
        Ok(Prediction {
            mean: p.mean.map(|v| self.y_mean + self.y_sd * v),
            latent_var: p.latent_var * s2,
            obs_var: p.obs_var * s2,
            clamped: p.clamped,
        })
    }

    /// Latent mean and covariance in score units.
    pub fn predict_joint(&self, x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (m, c) = match &self.posterior {
            Posterior::Base(b) => b.predict_joint(x)?,
            Posterior::Monotone(f) => monotone_predict_joint(f, x)?,
        };
        Ok((m.map(|v| self.y_mean + self.y_sd * v), c * (self.y_sd * self.y_sd)))
    }
}

/// Per-target models trained on one set of supervised pairs, with the input
/// pipeline fitted on the same pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortModel {
    pub spec: ModelSpec,
    pub horizon: f64,
    pub pipeline: InputPipeline,
    pub targets: Vec<TrainedTarget>,
}

/// Seed for one target's model, decorrelated from neighbouring seeds.
pub fn target_seed(seed: u64, target: Target) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(target.index() as u64 + 1)
}

/// Trains one model per target present in `targets` on `pairs`.
pub fn train_on_pairs(
    spec: &ModelSpec,
    pairs: &[SupervisedPair],
    k: usize,
    horizon: f64,
    variance_fraction: f64,
    targets: &[Target],
    seed: u64,
) -> Result<CohortModel> {
    if pairs.is_empty() {
        return Err(Error::EmptyData);
    }
    let raw = stack_inputs(pairs);
    let pipeline = InputPipeline::fit(&raw, k, variance_fraction)?;
    let x = pipeline.transform(&raw)?;
    let trained = targets
        .iter()
        .map(|&t| {
            let rows: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].targets[t.index()].is_some()).collect();
            let xt = x.select_rows(&rows);
            let yt = DVector::from_iterator(rows.len(), rows.iter().map(|&i| pairs[i].targets[t.index()].unwrap()));
            train_target(spec, &xt, &yt, t, pipeline.time_axis(), target_seed(seed, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CohortModel { spec: spec.clone(), horizon, pipeline, targets: trained })
}

impl CohortModel {
    pub fn fit(&self) -> Result<FittedCohort> {
        self.fit_with(true)
    }

    pub fn fit_with(&self, monotone: bool) -> Result<FittedCohort> {
        Ok(FittedCohort {
            horizon: self.horizon,
            pipeline: self.pipeline.clone(),
            targets: self.targets.iter().map(|t| t.fit_with(monotone)).collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FittedCohort {
    pub horizon: f64,
    pub pipeline: InputPipeline,
    pub targets: Vec<FittedTarget>,
}

impl FittedCohort {
    pub fn target(&self, t: Target) -> Option<&FittedTarget> {
        self.targets.iter().find(|m| m.target == t)
    }

    /// Predictions for raw encoded inputs, one per fitted target.
    pub fn predict_raw(&self, raw: &DMatrix<f64>) -> Result<Vec<Prediction>> {
        let x = self.pipeline.transform(raw)?;
        self.targets.iter().map(|m| m.predict(&x)).collect()
    }
}
