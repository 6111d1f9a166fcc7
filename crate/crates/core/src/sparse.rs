//! Inducing-point approximation with the collapsed variational bound
//!
//! `F = log N(y; μ₀, Q_nn + φ_n² I) − tr(K_nn − Q_nn) / (2 φ_n²)`,
//! `Q_nn = K_nm K_mm⁻¹ K_mn`, evaluated in `O(n M²)` through
//! `A = L_m⁻¹ K_mn / φ_n` and `B = I + A Aᵀ`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GpModel, Prediction};
use crate::net::GradientTape;
use crate::numerics::{chol_of, CholFactor};
use crate::optim::{adam_minimize, OptimizerConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Relative diagonal jitter on `K_mm`.
const KMM_JITTER: f64 = 1e-10;
pub const DEFAULT_NUM_INDUCING: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InducingSpace {
    /// Inducing inputs live where the data lives and pass through the network.
    DataSpace,
    /// Inducing inputs live in the network's output space.
    FeatureSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    SubsetOfData,
    KMeansLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SparseConfig {
    pub num_inducing: usize,
    pub inducing_space: InducingSpace,
    pub init_strategy: InitStrategy,
    /// Overrides the default: trainable in data space, fixed in feature space.
    pub trainable: Option<bool>,
}

impl Default for SparseConfig {
    fn default() -> Self {
        SparseConfig {
            num_inducing: DEFAULT_NUM_INDUCING,
            inducing_space: InducingSpace::DataSpace,
            init_strategy: InitStrategy::SubsetOfData,
            trainable: None,
        }
    }
}

impl SparseConfig {
    pub fn is_trainable(&self) -> bool {
        self.trainable
            .unwrap_or(self.inducing_space == InducingSpace::DataSpace)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    pub z: DMatrix<f64>,
    pub space: InducingSpace,
    pub trainable: bool,
}

impl InducingSet {
    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub(crate) fn map(&self, model: &GpModel, keep_tape: bool) -> Result<(DMatrix<f64>, Option<GradientTape>)> {
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("inducing points must be finite".into()));
        }
        if self.space == InducingSpace::DataSpace && model.uses_net() {
            let m = model.map(&self.z, keep_tape)?;
            Ok((m.feats, m.tape))
        } else {
            Ok((self.z.clone(), None))
        }
    }
}

/// Picks `m` inducing inputs from the rows of `x`.
///
/// `SubsetOfData` samples rows uniformly without replacement (returned in data
/// order); `KMeansLike` runs 10 Lloyd iterations from such a subset. With
/// `m ≥ n` both return every row.
pub fn select_inducing(x: &DMatrix<f64>, m: usize, strategy: InitStrategy, seed: u64) -> Result<InducingSet> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if m == 0 {
        return Err(Error::InvalidConfig("need at least one inducing point".into()));
    }
    let wrap = |z| InducingSet {
        z,
        space: InducingSpace::DataSpace,
        trainable: true,
    };
    if m >= n {
        return Ok(wrap(x.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, m).into_vec();
    idx.sort_unstable();
    let mut z = x.select_rows(idx.iter());
    if strategy == InitStrategy::KMeansLike {
        let d = x.ncols();
        for _ in 0..10 {
            let mut sums = DMatrix::zeros(m, d);
            let mut counts = vec![0usize; m];
            for i in 0..n {
                let xi = x.row(i);
                let (best, _) = (0..m)
                    .map(|c| (c, (z.row(c) - xi).norm_squared()))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                counts[best] += 1;
                let mut row = sums.row_mut(best);
                row += xi;
            }
            for c in 0..m {
                if counts[c] > 0 {
                    z.set_row(c, &(sums.row(c) / counts[c] as f64));
                }
            }
        }
    }
    Ok(wrap(z))
}

/// Clamps the configured count to the data size and selects in the configured space.
pub fn init_inducing(model: &GpModel, x: &DMatrix<f64>, cfg: &SparseConfig, seed: u64) -> Result<InducingSet> {
    let m = cfg.num_inducing.max(1).min(x.nrows().max(1));
    let source = if cfg.inducing_space == InducingSpace::FeatureSpace && model.uses_net() {
        model.map(x, false)?.feats
    } else {
        x.clone()
    };
    let mut set = select_inducing(&source, m, cfg.init_strategy, seed)?;
    set.space = cfg.inducing_space;
    set.trainable = cfg.is_trainable();
    Ok(set)
}

/// Factorizations shared by the bound, its gradient and prediction.
struct Terms {
    fx: DMatrix<f64>,
    tape_x: Option<GradientTape>,
    fz: DMatrix<f64>,
    tape_z: Option<GradientTape>,
    kmm: DMatrix<f64>,
    kmn: DMatrix<f64>,
    kdiag: DVector<f64>,
    lm: CholFactor,
    a: DMatrix<f64>,
    lb: CholFactor,
    c: DVector<f64>,
    resid: DVector<f64>,
    sigma: f64,
}

fn check(model: &GpModel, z: &InducingSet, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    model.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} inputs, {} targets", x.nrows(), y.len())));
    }
    if z.is_empty() {
        return Err(Error::InvalidConfig("inducing set is empty".into()));
    }
    Ok(())
}

fn kmm_factor(model: &GpModel, fz: &DMatrix<f64>) -> Result<(DMatrix<f64>, CholFactor)> {
    let kmm = model.kern(fz, fz)?;
    let m = kmm.nrows();
    let jitter = KMM_JITTER * kmm.trace() / m as f64;
    let mut shifted = kmm.clone();
    for i in 0..m {
        shifted[(i, i)] += jitter;
    }
    Ok((kmm, chol_of(shifted)?))
}

fn terms(model: &GpModel, z: &InducingSet, x: &DMatrix<f64>, y: &DVector<f64>, keep_tape: bool) -> Result<Terms> {
    check(model, z, x, y)?;
    let mx = model.map(x, keep_tape)?;
    let (fz, tape_z) = z.map(model, keep_tape)?;
    if fz.ncols() != mx.feats.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "inducing points have dimension {}, kernel inputs {}",
            fz.ncols(),
            mx.feats.ncols()
        )));
    }
    let (kmm, lm) = kmm_factor(model, &fz)?;
    let kmn = model.kern(&fz, &mx.feats)?;
    let kdiag = model.kern_diag(&mx.feats)?;
    let sigma = model.noise_var().sqrt();
    let a = lm.solve_lower(&kmn)? / sigma;
    let mut b = &a * a.transpose();
    for i in 0..b.nrows() {
        b[(i, i)] += 1.0;
    }
    let lb = chol_of(b)?;
    let resid = y.add_scalar(-model.mean);
    let c = lb.solve_lower_vec(&(&a * &resid))? / sigma;
    Ok(Terms {
        fx: mx.feats,
        tape_x: mx.tape,
        fz,
        tape_z,
        kmm,
        kmn,
        kdiag,
        lm,
        a,
        lb,
        c,
        resid,
        sigma,
    })
}

fn bound(t: &Terms) -> f64 {
    let n = t.resid.len() as f64;
    let s2 = t.sigma * t.sigma;
    let log_det_b: f64 = t.lb.lower().diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * n * LN_2PI - log_det_b - 0.5 * n * s2.ln() - t.resid.norm_squared() / (2.0 * s2)
        + 0.5 * t.c.norm_squared()
        - t.kdiag.sum() / (2.0 * s2)
        + 0.5 * t.a.norm_squared()
}

/// Collapsed evidence lower bound; never exceeds the exact log marginal likelihood.
pub fn elbo(model: &GpModel, z: &InducingSet, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(bound(&terms(model, z, x, y, false)?))
}

/// Gradient of `−F` in the layout of [`GpModel::params`], plus the inducing inputs.
#[derive(Debug, Clone)]
pub struct ElboGradients {
    pub neg_elbo: f64,
    pub model: Vec<f64>,
    pub inducing: DMatrix<f64>,
}

impl ElboGradients {
    /// Model gradient followed by the inducing gradient when `trainable`.
    pub fn flat(&self, trainable: bool) -> Vec<f64> {
        let mut g = self.model.clone();
        if trainable {
            g.extend_from_slice(self.inducing.as_slice());
        }
        g
    }
}

pub fn elbo_gradients(model: &GpModel, z: &InducingSet, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<ElboGradients> {
    if y.is_empty() {
        return Err(Error::EmptyData);
    }
    let t = terms(model, z, x, y, true)?;
    let f = bound(&t);
    let n = t.resid.len() as f64;
    let s2 = t.sigma * t.sigma;

    // β = Σ⁻¹ r,  P = K_mm⁻¹ K_mn = σ L_m⁻ᵀ A
    let binv_ar = t.lb.solve_upper_vec(&t.c)? * t.sigma;
    let beta = (&t.resid - t.a.transpose() * &binv_ar) / s2;
    let p = t.lm.solve_upper(&t.a)? * t.sigma;
    let binv_a = t.lb.solve(&t.a)?;
    let pat = &p * t.a.transpose();
    let pb = &p * &beta;

    // ∂F/∂K_mn, ∂F/∂K_mm, ∂F/∂diag K_nn
    let g_kmn = &pb * beta.transpose() + (&pat * &binv_a) / s2;
    let g_kmm = (&pb * pb.transpose() + (&pat * &binv_a * p.transpose()) / s2) * -0.5;
    let g_diag = DVector::from_element(t.kdiag.len(), -0.5 / s2);

    let tr_sigma_inv = (n - binv_a.component_mul(&t.a).sum()) / s2;
    let tr_q = s2 * t.a.norm_squared();
    let d_s2 = 0.5 * beta.norm_squared() - 0.5 * tr_sigma_inv + (t.kdiag.sum() - tr_q) / (2.0 * s2 * s2);
    let d_mean = beta.sum();

    let scale = model.kernel.outscale();
    let mut hyper = model.kernel.contract_hyper(&t.fz, &t.fx, &g_kmn)?;
    for (h, v) in hyper
        .iter_mut()
        .zip(model.kernel.contract_hyper(&t.fz, &t.fz, &g_kmm)?)
    {
        *h += v;
    }
    for (h, v) in hyper
        .iter_mut()
        .zip(model.kernel.contract_hyper_diag(&t.fx, &g_diag)?)
    {
        *h += v;
    }
    let mut grad: Vec<f64> = hyper.into_iter().map(|v| -v * scale).collect();
    if model.kernel.warp.is_some() {
        let d = g_kmn.component_mul(&t.kmn).sum() + g_kmm.component_mul(&t.kmm).sum() + g_diag.dot(&t.kdiag);
        grad.push(-d);
    }
    grad.push(-d_s2 * s2);
    grad.push(-d_mean);

    let (dz1, dx) = model.kernel.contract_points(&t.fz, &t.fx, &g_kmn)?;
    let (dzz1, dzz2) = model.kernel.contract_points(&t.fz, &t.fz, &g_kmm)?;
    let dx = (dx + model.kernel.contract_points_diag(&t.fx, &g_diag)?) * (-scale);
    let dfz = (dz1 + dzz1 + dzz2) * (-scale);

    let mut inducing = dfz.clone();
    if model.uses_net() {
        let net = model.net.as_ref().expect("validated");
        let tape_x = t.tape_x.as_ref().expect("tape kept");
        let (mut ng, _) = net.backward(tape_x, &dx)?;
        if let Some(tape_z) = &t.tape_z {
            let (nz, gz) = net.backward_with_decay(tape_z, &dfz, false)?;
            ng.add_assign(&nz);
            inducing = gz;
        }
        grad.extend(ng.flat());
    }
    Ok(ElboGradients {
        neg_elbo: -f,
        model: grad,
        inducing,
    })
}

/// A sparse GP conditioned on data under the optimal variational posterior.
#[derive(Debug, Clone)]
pub struct FittedSparse {
    pub model: GpModel,
    pub inducing: InducingSet,
    fz: DMatrix<f64>,
    lm: CholFactor,
    lb: CholFactor,
    c: DVector<f64>,
}

impl FittedSparse {
    /// With no training rows the fit is `None` and predictions fall back to the prior.
    pub fn fit(model: GpModel, inducing: InducingSet, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Option<Self>> {
        if y.is_empty() {
            model.validate()?;
            return Ok(None);
        }
        let t = terms(&model, &inducing, x, y, false)?;
        Ok(Some(FittedSparse {
            model,
            inducing,
            fz: t.fz,
            lm: t.lm,
            lb: t.lb,
            c: t.c,
        }))
    }

    pub(crate) fn inducing_feats(&self) -> &DMatrix<f64> {
        &self.fz
    }

    /// `A_* = L_m⁻¹ K_m*` for a cross-covariance block `K_m*`.
    pub(crate) fn project(&self, kms: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lm.solve_lower(kms)
    }

    /// Posterior mean offset `A_*ᵀ L_B⁻ᵀ c` for projected items.
    pub(crate) fn mean_offset(&self, a_star: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(a_star.transpose() * self.lb.solve_upper_vec(&self.c)?)
    }

    /// `L_B⁻¹ A_*`.
    pub(crate) fn whiten(&self, a_star: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lb.solve_lower(a_star)
    }

    pub fn predict(&self, x_star: &DMatrix<f64>) -> Result<Prediction> {
        let fs = self.model.map(x_star, false)?.feats;
        if fs.ncols() != self.fz.ncols() {
            return Err(Error::DimensionMismatch("query dimension".into()));
        }
        let kms = self.model.kern(&self.fz, &fs)?;
        let a_star = self.project(&kms)?;
        let mean = self.mean_offset(&a_star)?.add_scalar(self.model.mean);
        let b = self.whiten(&a_star)?;
        let prior = self.model.kern_diag(&fs)?;
        let var = DVector::from_iterator(
            fs.nrows(),
            (0..fs.nrows()).map(|j| {
                prior[j] - a_star.column(j).norm_squared() + b.column(j).norm_squared()
            }),
        );
        Ok(Prediction::from_parts(mean, var, self.model.noise_var()))
    }
}

/// Predictive moments under the optimal variational distribution.
pub fn sparse_predict(
    model: &GpModel,
    z: &InducingSet,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    x_star: &DMatrix<f64>,
) -> Result<Prediction> {
    match FittedSparse::fit(model.clone(), z.clone(), x, y)? {
        Some(f) => f.predict(x_star),
        None => {
            let fs = model.map(x_star, false)?.feats;
            Ok(Prediction::from_parts(
                DVector::from_element(x_star.nrows(), model.mean),
                model.kern_diag(&fs)?,
                model.noise_var(),
            ))
        }
    }
}

/// ADAM on `−F` over the model parameters and, when trainable, the inducing inputs.
pub fn train_sparse(
    model: &GpModel,
    inducing: &InducingSet,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    opt: &OptimizerConfig,
) -> Result<(GpModel, InducingSet, Vec<f64>)> {
    check(model, inducing, x, y)?;
    let np = model.num_params();
    let mut x0 = model.params();
    if inducing.trainable {
        x0.extend_from_slice(inducing.z.as_slice());
    }
    let mut m = model.clone();
    let mut z = inducing.clone();
    let unpack = |p: &[f64], m: &mut GpModel, z: &mut InducingSet| -> Result<()> {
        m.set_params(&p[..np])?;
        if z.trainable {
            z.z.as_mut_slice().copy_from_slice(&p[np..]);
        }
        Ok(())
    };
    let (best, trace) = adam_minimize(x0, opt, |p| {
        unpack(p, &mut m, &mut z)?;
        let g = elbo_gradients(&m, &z, x, y)?;
        Ok((g.neg_elbo, g.flat(z.trainable)))
    })?;
    unpack(&best, &mut m, &mut z)?;
    m.validate()?;
    Ok((m, z, trace))
}
